#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "afm/analysis.hpp"
#include "afm/checkpoint.hpp"
#include "afm/errors.hpp"
#include "doctest.h"
#include "support/gradient_suite.hpp"
#include "support/oracles.hpp"

using namespace afm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kWork = "cli_analysis_work";

Dataset tiny_data(std::size_t classes = 3, std::size_t per_class = 2) {
  DatasetSpec spec;
  spec.num_classes = classes;
  spec.per_class = per_class;
  spec.image_size = 32;
  return synth_generate(spec);
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 4;
  return tc;
}

int run_cli(const std::string& args, const std::string& log) {
  const std::string cmd = std::string(AFMNET_EXE) + " " + args + " > " + (kWork / (log + ".out")).string() + " 2> " +
                          (kWork / (log + ".err")).string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  json j;
  in >> j;
  return j;
}

fs::path write_config(const ModelConfig& model, const std::string& name) {
  fs::create_directories(kWork);
  const auto path = kWork / name;
  std::ofstream out(path);
  out << json{{"model", model}, {"train", quick(1)}, {"data", "synthetic:classes=3,per_class=2,size=32"}}.dump(2);
  return path;
}

}  // namespace

TEST_SUITE("cli_analysis") {
  TEST_CASE("erf of a pointwise map touches only the centre") {
    Tensor<double> w({2, 3, 1, 1}, 0.5);
    TapFn<double> tap = [&](const Var<double>& x) { return ops::conv2d(x, Var<double>(w)); };
    std::mt19937_64 rng(1);
    const auto map = erf_map<double>(tap, afm::testing::random_tensor({1, 3, 9, 9}, rng));
    CHECK(map.shape() == Shape{9, 9});
    CHECK(support_count(map) == 1);
    CHECK(map.at({4, 4}) == doctest::Approx(1.0));
  }

  TEST_CASE("grad-cam map follows the activation under a uniform gradient") {
    std::mt19937_64 rng(2);
    auto act = afm::testing::random_tensor({1, 4, 4}, rng);
    const auto cam = grad_cam_map<double>(act, Tensor<double>({1, 4, 4}, 0.3), 4, 4);
    double peak = 0;
    for (std::size_t i = 0; i < 16; ++i) peak = std::max(peak, act[i]);
    REQUIRE(peak > 0);
    for (std::size_t i = 0; i < 16; ++i) CHECK(cam[i] == doctest::Approx(std::max(act[i], 0.0) / peak).epsilon(1e-12));

    const auto zero = grad_cam_map<double>(act, Tensor<double>({1, 4, 4}, 0.0), 8, 8);
    CHECK(zero.shape() == Shape{8, 8});
    for (double v : zero.data()) CHECK(v == 0.0);
  }

  TEST_CASE("model grad-cam stays in the unit interval") {
    AfmNet<double> model(afm::testing::tiny_gradcheck_config(), 3);
    std::mt19937_64 rng(3);
    const auto img = afm::testing::random_tensor({1, 3, 32, 32}, rng, 0, 1);
    for (auto layer : {FeatureTap::kCnn, FeatureTap::kMamba, FeatureTap::kFused}) {
      const auto cam = model_grad_cam(model, img, 1, layer);
      CHECK(cam.shape() == Shape{32, 32});
      for (double v : cam.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
    CHECK_THROWS_AS(parse_feature_tap("attention"), ConfigError);
  }

  TEST_CASE("routing statistics average the gate per class") {
    AfmNet<float> model(afm::testing::tiny_gradcheck_config(), 4);
    const auto data = tiny_data(3, 3);
    const auto stats = routing_stats(model, data, 4);
    REQUIRE(stats.mean_gate.size() == 3);
    std::vector<std::vector<double>> manual(3, std::vector<double>(3, 0.0));
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& img = data.images[i];
      auto out = model.forward(Var<float>(img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)})));
      for (std::size_t m = 0; m < 3; ++m)
        manual[static_cast<std::size_t>(data.labels[i])][m] += out.routing->scores.value().at({0, m}) / 3.0;
    }
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(stats.class_counts[c] == 3);
      double sum = 0;
      for (std::size_t m = 0; m < 3; ++m) {
        sum += stats.mean_gate[c][m];
        CHECK(stats.mean_gate[c][m] == doctest::Approx(manual[c][m]).epsilon(1e-5));
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
    const auto csv = stats.csv();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

    auto cfg = afm::testing::tiny_gradcheck_config();
    cfg.head = HeadKind::kMlp;
    AfmNet<float> mlp(cfg, 4);
    CHECK_THROWS_AS(routing_stats(mlp, data), CapabilityError);
  }

  TEST_CASE("parameter counts of single layers") {
    Rng rng(5);
    Linear<double> fc(10, 5, true, rng);
    ParamCollector<double> a;
    fc.collect(a, "fc");
    CHECK(a.param_elements() == 55);
    Conv2d<double> conv(4, 8, 3, {1, 1, 1}, true, rng);
    ParamCollector<double> b;
    conv.collect(b, "conv");
    CHECK(b.param_elements() == 296);
  }

  TEST_CASE("complexity matches the hand ledgers and the built model") {
    for (const auto& ledger : {afm::testing::ledger_tiny_dense(), afm::testing::ledger_tiny_concat_mlp()}) {
      const auto report = count_params_flops(ledger.config);
      CHECK(report.total_params == ledger.params());
      CHECK(report.total_macs == ledger.macs());
      CHECK(report.flops() == 2 * report.total_macs);
      AfmNet<float> model(ledger.config, 1);
      CHECK(model.parameters().param_elements() == report.total_params);
      const auto j = report.to_json();
      CHECK(j.at("total_params").get<std::size_t>() == report.total_params);
    }
    const auto full = count_params_flops(ModelConfig{});
    AfmNet<float> model(ModelConfig{}, 1);
    CHECK(model.parameters().param_elements() == full.total_params);
  }

  TEST_CASE("expert sweep grows with M and rejects M below k") {
    auto cfg = afm::testing::tiny_gradcheck_config();
    const auto data = tiny_data();
    const auto rows = expert_sweep(cfg, quick(1), data, nullptr, {2, 3, 5});
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].params < rows[1].params);
    CHECK(rows[1].params < rows[2].params);
    for (const auto& r : rows) {
      auto c = cfg;
      c.moe.num_experts = r.num_experts;
      CHECK(r.params == count_params_flops(c).total_params);
    }
    const auto csv = sweep_csv(rows);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

    AfmNet<float> same(cfg, quick(1).seed);
    train_run(quick(1), same, data);
    const auto ev = evaluate(same, data, 4);
    CHECK(rows[1].oa == ev.metrics.oa);
    CHECK(rows[1].weighted_f1 == ev.metrics.weighted_f1);

    CHECK_THROWS_AS(expert_sweep(cfg, quick(1), data, nullptr, {1}), ConfigError);
  }

  TEST_CASE("command line round trip and exit codes") {
    fs::remove_all(kWork);
    const auto config = write_config(afm::testing::tiny_gradcheck_config(), "tiny.json");
    const std::string run = (kWork / "run").string();
    const std::string cfg = " --config " + config.string();

    REQUIRE(run_cli("train" + cfg + " --out " + run, "train") == 0);
    CHECK(fs::exists(kWork / "run" / "manifest.json"));
    CHECK(fs::exists(kWork / "run" / "metrics.jsonl"));

    CHECK(run_cli("eval" + cfg + " --ckpt " + run, "eval") == 0);
    const auto metrics = read_json(kWork / "run" / "metrics.json");
    CHECK(metrics.contains("OA"));
    CHECK(fs::exists(kWork / "run" / "confusion.csv"));

    const std::string art = (kWork / "artifacts").string();
    CHECK(run_cli("erf" + cfg + " --ckpt " + run + " --tap fused --out " + art, "erf") == 0);
    CHECK(fs::exists(kWork / "artifacts" / "erf_fused.csv"));
    const auto meta = read_json(kWork / "artifacts" / "erf_fused.json");
    CHECK(meta.at("config_hash") == config_hash(read_manifest(run).at("config").get<ModelConfig>()));
    CHECK(run_cli("cam" + cfg + " --ckpt " + run + " --layer cnn --out " + art, "cam") == 0);
    CHECK(fs::exists(kWork / "artifacts" / "cam.csv"));
    CHECK(run_cli("routing" + cfg + " --ckpt " + run + " --out " + art, "routing") == 0);
    CHECK(fs::exists(kWork / "artifacts" / "routing.csv"));
    CHECK(run_cli("complexity" + cfg + " --out " + art, "complexity") == 0);
    const auto cx = read_json(kWork / "artifacts" / "complexity.json");
    CHECK(cx.at("total_params").get<std::size_t>() == read_manifest(run).at("param_elements").get<std::size_t>());

    CHECK(run_cli("train" + cfg + " --ablate colour=off --out " + run + "_x", "bad_ablation") == 2);
    CHECK(run_cli("train --no-such-flag", "bad_flag") == 2);
    CHECK(run_cli("eval" + cfg + " --ckpt " + run + " --data folder:" + (kWork / "missing").string(), "data") == 3);

    const fs::path corrupt = kWork / "corrupt";
    fs::copy(run, corrupt, fs::copy_options::recursive);
    for (const auto& e : fs::directory_iterator(corrupt / "params")) {
      if (e.path().extension() == ".bin") {
        fs::resize_file(e.path(), fs::file_size(e.path()) - 2);
        break;
      }
    }
    CHECK(run_cli("eval" + cfg + " --ckpt " + corrupt.string(), "corrupt") == 4);
  }
}
