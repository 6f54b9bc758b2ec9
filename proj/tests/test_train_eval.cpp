#include <cmath>
#include <filesystem>
#include <fstream>

#include "afm/checkpoint.hpp"
#include "afm/errors.hpp"
#include "afm/train.hpp"
#include "doctest.h"
#include "support/gradient_suite.hpp"
#include "support/oracles.hpp"

using namespace afm;
namespace fs = std::filesystem;

namespace {

Dataset tiny_data(std::size_t classes = 3) {
  DatasetSpec spec;
  spec.num_classes = classes;
  spec.per_class = 2;
  spec.image_size = 32;
  return synth_generate(spec);
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 4;
  return tc;
}

}  // namespace

TEST_SUITE("train_eval") {
  TEST_CASE("AdamW fixed points and decay") {
    Var<double> p(Tensor<double>({3}, {1.0, -2.0, 0.5}), true);
    AdamW<double> plain({{"p", &p}}, 0.0);
    p.node().grad = Tensor<double>({3}, 0.0);
    plain.step(1e-2);
    CHECK(p.value() == Tensor<double>({3}, {1.0, -2.0, 0.5}));

    Var<double> q(Tensor<double>({2}, {1.0, -3.0}), true);
    AdamW<double> decay({{"q", &q}}, 0.05);
    const double lr = 1e-2;
    for (int t = 1; t <= 5; ++t) {
      q.node().grad = Tensor<double>({2}, 0.0);
      decay.step(lr);
      CHECK(q.value()[0] == doctest::Approx(std::pow(1 - lr * 0.05, t)).epsilon(1e-12));
      CHECK(q.value()[1] == doctest::Approx(-3.0 * std::pow(1 - lr * 0.05, t)).epsilon(1e-12));
    }
  }

  TEST_CASE("AdamW first step is lr times the gradient sign") {
    const std::vector<double> g{0.3, -2.0, 1e-3, -7.5};
    for (double scale : {1.0, 40.0, 1e-2}) {
      Var<double> p(Tensor<double>({4}, 0.0), true);
      AdamW<double> opt({{"p", &p}}, 0.0);
      Tensor<double> grad({4});
      for (std::size_t i = 0; i < 4; ++i) grad[i] = scale * g[i];
      p.node().grad = grad;
      opt.step(1e-3);
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(-p.value()[i] == doctest::Approx(1e-3 * (g[i] > 0 ? 1 : -1)).epsilon(2e-3));
      }
    }
  }

  TEST_CASE("AdamW leaves parameters without a gradient untouched") {
    Var<double> p(Tensor<double>({2}, 1.0), true);
    AdamW<double> opt({{"p", &p}}, 0.5);
    opt.step(0.1);
    CHECK(p.value() == Tensor<double>({2}, 1.0));
  }

  TEST_CASE("learning-rate schedule") {
    TrainConfig tc;
    const std::size_t total = 1000, w = warmup_steps(total, tc);
    CHECK(w == 50);
    CHECK(lr_schedule(0, total, tc) == 0.0);
    CHECK(lr_schedule(static_cast<double>(w), total, tc) == doctest::Approx(5e-4).epsilon(1e-15));
    CHECK(lr_schedule((w + total) / 2.0, total, tc) == doctest::Approx(2.5e-4).epsilon(1e-12));
    CHECK(std::abs(lr_schedule(static_cast<double>(total), total, tc)) < 1e-18);
    const double left = lr_schedule(w - 1e-9, total, tc), right = lr_schedule(w + 1e-9, total, tc);
    CHECK(std::abs(left - right) < 1e-12);
  }

  TEST_CASE("metrics examples") {
    const std::vector<int> y{0, 1, 0, 1};
    auto perfect = compute_metrics(y, y, 2);
    CHECK(perfect.oa == 1.0);
    CHECK(perfect.weighted_precision == 1.0);
    CHECK(perfect.weighted_recall == 1.0);
    CHECK(perfect.weighted_f1 == 1.0);

    const std::vector<int> labels{0, 0, 1, 1}, preds{0, 1, 1, 1};
    auto m = compute_metrics(preds, labels, 2);
    CHECK(m.precision[0] == 1.0);
    CHECK(m.recall[0] == 0.5);
    CHECK(m.precision[1] == doctest::Approx(2.0 / 3).epsilon(1e-15));
    CHECK(m.recall[1] == 1.0);
    CHECK(m.oa == 0.75);
    CHECK(std::abs(m.weighted_f1 - 0.7333) <= 1e-4);
    CHECK(m.to_json().at("OA") == 0.75);
    CHECK(m.confusion_csv() == "true\\pred,0,1\n0,1,1\n1,0,2\n");

    const std::vector<int> l3{0, 0, 1}, p3{0, 2, 1};
    auto z = compute_metrics(p3, l3, 3);
    CHECK(z.support[2] == 0);
    CHECK(z.precision[2] == 0.0);
    CHECK(z.f1[2] == 0.0);
    CHECK(z.weighted_recall == doctest::Approx(z.oa).epsilon(1e-15));
    CHECK_THROWS_AS(compute_metrics(std::vector<int>{3}, std::vector<int>{0}, 3), DataError);
  }

  TEST_CASE("metrics agree with brute-force counting") {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 200; ++t) {
      const std::size_t c = 2 + rng() % 44, n = 1 + rng() % 120;
      std::vector<int> p(n), l(n);
      for (std::size_t i = 0; i < n; ++i) {
        l[i] = static_cast<int>(rng() % c);
        p[i] = rng() % 3 == 0 ? l[i] : static_cast<int>(rng() % c);
      }
      auto got = compute_metrics(p, l, c);
      auto want = afm::testing::brute_metrics(p, l, c);
      CHECK(got.tp == want.tp);
      CHECK(got.fp == want.fp);
      CHECK(got.fn == want.fn);
      CHECK(got.confusion == want.confusion);
      CHECK(std::abs(got.weighted_f1 - want.weighted_f1) < 1e-12);
      CHECK(std::abs(got.weighted_recall - got.oa) < 1e-12);
    }
  }

  TEST_CASE("total loss") {
    Var<double> ce(Tensor<double>::scalar(1.25));
    CHECK(total_loss(ce, Var<double>(Tensor<double>::scalar(0.0))).item() == 1.25);
    CHECK(total_loss(ce, Var<double>()).item() == 1.25);
  }

  TEST_CASE("two runs with the same seed give identical traces and artifacts") {
    const auto data = tiny_data();
    const fs::path root = fs::current_path() / "train_eval_work";
    fs::remove_all(root);
    std::vector<double> traces[2];
    for (int r = 0; r < 2; ++r) {
      AfmNet<float> model(afm::testing::tiny_gradcheck_config(), 1);
      TrainOptions opt;
      opt.out_dir = root / ("run" + std::to_string(r));
      auto res = train_run(quick(3), model, data, opt);
      traces[r] = res.step_loss;
      CHECK(res.epochs_run == 3);
      CHECK(res.step_loss.size() == 6);
      CHECK(res.epoch_log.size() == 3);
      CHECK(res.epoch_log.back().contains("OA"));
      CHECK(res.epoch_log.back().contains("expert_utilization"));
    }
    CHECK(traces[0] == traces[1]);
    for (const char* f : {"manifest.json", "metrics.jsonl", "loss_trace.csv"}) CHECK(fs::exists(root / "run0" / f));
    std::ifstream a(root / "run0" / "loss_trace.csv"), b(root / "run1" / "loss_trace.csv");
    std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
  }

  TEST_CASE("ablated run records the toggle in its manifest") {
    ModelConfig cfg = afm::testing::tiny_gradcheck_config();
    apply_ablation(cfg, "no-mamba");
    AfmNet<float> model(cfg, 2);
    TrainOptions opt;
    opt.out_dir = fs::current_path() / "train_eval_work" / "no_mamba";
    train_run(quick(1), model, tiny_data(), opt);
    auto manifest = read_manifest(*opt.out_dir);
    CHECK(manifest.at("ablation").at("mamba") == false);
    CHECK(manifest.at("ablation") == ablation_record(cfg));
  }

  TEST_CASE("data errors carry epoch and step context") {
    auto data = tiny_data();
    data.labels[3] = 7;
    AfmNet<float> model(afm::testing::tiny_gradcheck_config(), 3);
    try {
      train_run(quick(1), model, data);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("epoch 0 step") != std::string::npos);
    }
    auto wrong_size = tiny_data();
    wrong_size.image_size = 64;
    CHECK_THROWS_AS(train_run(quick(1), model, wrong_size), DataError);
  }

  TEST_CASE("evaluate covers every sample") {
    AfmNet<float> model(afm::testing::tiny_gradcheck_config(), 4);
    auto data = tiny_data();
    auto ev = evaluate(model, data, 4);
    CHECK(ev.predictions.size() == data.size());
    CHECK(ev.metrics.count == data.size());
    CHECK(std::isfinite(ev.mean_loss));
  }

  TEST_CASE("config validation") {
    TrainConfig tc;
    tc.label_smoothing = 1.0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    ModelConfig mc;
    mc.moe.top_k = 5;
    CHECK_THROWS_AS(mc.validate(), ConfigError);
    CHECK_THROWS_AS(apply_ablation(mc, "colour=on"), ConfigError);
  }
}
