// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: afm_acceptance [work_dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "afm/analysis.hpp"
#include "afm/checkpoint.hpp"
#include "afm/data.hpp"
#include "afm/errors.hpp"
#include "afm/model.hpp"
#include "afm/ssm.hpp"
#include "afm/train.hpp"
#include "support/gradient_suite.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace afm;
using afm::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s [%d] %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

// Runs one criterion, turning an unexpected exception into a FAIL line.
void criterion(int id, const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
  const auto t0 = Clock::now();
  try {
    auto [pass, detail] = body();
    char buf[64];
    std::snprintf(buf, sizeof buf, " (%.1fs)", seconds_since(t0));
    report(id, name, pass, detail + buf);
  } catch (const std::exception& e) {
    report(id, name, false, std::string("exception: ") + e.what());
  }
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------

std::pair<bool, std::string> gradient_suite() {
  const auto t0 = Clock::now();
  const auto ops = afm::testing::run_op_gradients(20, 20240611);
  double worst = 0;
  std::string worst_op;
  bool ok = true;
  for (const auto& r : ops) {
    if (r.worst > worst) {
      worst = r.worst;
      worst_op = r.op;
    }
    if (!(r.worst < 1e-5) || r.instances < 20) {
      ok = false;
      std::printf("  op %s: worst %.3g over %zu\n", r.op.c_str(), r.worst, r.instances);
    }
  }
  const auto model = afm::testing::run_model_gradient(7);
  const double secs = seconds_since(t0);
  ok = ok && model.rel_error < 1e-4 && secs < 300;
  return {ok, std::to_string(ops.size()) + " ops x 20 instances, worst " + fmt("%.2e", worst) + " (" + worst_op +
                  "); model " + fmt("%.2e", model.rel_error) + " over " + std::to_string(model.checked) +
                  " scalars; " + fmt("%.0fs", secs) + " < 300s"};
}

std::pair<bool, std::string> scan_oracle() {
  std::mt19937_64 rng(515);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  double seq_vs_assoc = 0, vs_loops = 0, cumsum = 0;
  for (int c = 0; c < 50; ++c) {
    const std::size_t n = pick(1, 2), l = pick(1, 64), e = pick(1, 8), s = pick(1, 8);
    auto x = random_tensor({n, l, e}, rng);
    auto delta = random_tensor({n, l, e}, rng, 1e-3, 0.5);
    auto A = random_tensor({e, s}, rng, -3.0, -0.05);
    auto B = random_tensor({n, l, s}, rng);
    auto C = random_tensor({n, l, s}, rng);
    auto run = [&](const Tensor<double>& a, ScanImpl impl) {
      NoGradGuard g;
      return selective_scan(Var<double>(x), Var<double>(delta), Var<double>(a), Var<double>(B), Var<double>(C), impl)
          .value();
    };
    const auto ys = run(A, ScanImpl::kSequential);
    const auto ya = run(A, ScanImpl::kAssociative);
    seq_vs_assoc = std::max(seq_vs_assoc, max_abs_diff(ys, ya));
    vs_loops = std::max(vs_loops, max_abs_diff(ys, afm::testing::scan_loops(x, delta, A, B, C)));

    auto tiny = random_tensor({e, s}, rng, -1e-12, 1e-12);
    const auto closed = afm::testing::scan_cumsum(x, delta, B, C);
    cumsum = std::max(cumsum, max_abs_diff(run(tiny, ScanImpl::kSequential), closed));
    cumsum = std::max(cumsum, max_abs_diff(run(tiny, ScanImpl::kAssociative), closed));
  }
  const bool ok = seq_vs_assoc <= 1e-10 && vs_loops <= 1e-10 && cumsum <= 1e-8;
  return {ok, "50 cases: sequential vs associative " + fmt("%.2e", seq_vs_assoc) + ", vs scalar recurrence " +
                  fmt("%.2e", vs_loops) + ", A->0 vs cumulative sum " + fmt("%.2e", cumsum)};
}

std::pair<bool, std::string> conv_oracle() {
  std::mt19937_64 rng(33);
  double worst = 0;
  int cases = 0;
  for (std::size_t stride : {1, 2})
    for (std::size_t pad : {1, 2})
      for (std::size_t dil : {1, 2}) {
        auto x = random_tensor({2, 3, 5, 5}, rng);
        auto w = random_tensor({4, 3, 3, 3}, rng);
        NoGradGuard g;
        const auto y = ops::conv2d(Var<double>(x), Var<double>(w), {stride, pad, dil}).value();
        worst = std::max(worst, max_abs_diff(y, afm::testing::conv2d_loops(x, w, stride, pad, dil)));
        ++cases;
      }
  return {worst <= 1e-12, std::to_string(cases) + " (stride, padding, dilation) cases on 5x5, max |diff| " +
                              fmt("%.2e", worst)};
}

std::pair<bool, std::string> moe_invariants() {
  const std::size_t d = 16, b = 32;
  std::mt19937_64 rng(404);
  MoEConfig cfg;  // M = 4, k = 2, one shared expert, alpha = 0.01
  Rng init(5);
  MoEHead<double> head(d, 6, cfg, init);
  const Var<double> v(random_tensor({b, d}, rng, -2, 2));
  NoGradGuard g;

  head.reset_evaluations();
  auto out = head.forward(v);
  double row_err = 0;
  for (std::size_t r = 0; r < b; ++r) {
    double s = 0;
    for (std::size_t i = 0; i < cfg.num_experts; ++i) s += out.report.scores.value()[r * cfg.num_experts + i];
    row_err = std::max(row_err, std::abs(s - 1));
  }
  bool k_per_row = true;
  for (const auto& sel : out.report.selected) k_per_row = k_per_row && sel.size() == cfg.top_k;
  std::size_t f_sum = 0;
  for (auto c : out.report.counts) f_sum += c;
  const std::size_t evaluations = head.evaluations();
  const bool counter = evaluations == cfg.top_k * b && out.report.expert_evaluations == cfg.top_k * b;

  // uniform routing: zero gate weights and bias
  head.gate_linear().weight.mutable_value().fill(0);
  head.gate_linear().bias.mutable_value().fill(0);
  const double uniform = head.forward(v).report.aux_loss.item();

  // collapse onto expert 0 with k = 1
  MoEConfig one = cfg;
  one.top_k = 1;
  Rng init1(6);
  MoEHead<double> collapsed(d, 6, one, init1);
  collapsed.gate_linear().weight.mutable_value().fill(0);
  auto& bias = collapsed.gate_linear().bias.mutable_value();
  bias.fill(0);
  bias[0] = 60;
  const double collapse = collapsed.forward(v).report.aux_loss.item();

  const double want_uniform = cfg.alpha * static_cast<double>(cfg.top_k);
  const double want_collapse = cfg.alpha * static_cast<double>(cfg.num_experts);
  const bool ok = row_err <= 1e-6 && k_per_row && counter && f_sum == cfg.top_k * b &&
                  std::abs(uniform - want_uniform) <= 1e-6 && std::abs(collapse - want_collapse) <= 1e-6;
  return {ok, "row sum err " + fmt("%.1e", row_err) + "; expert evaluations " + std::to_string(evaluations) +
                  " = k*B " + std::to_string(cfg.top_k * b) + "; uniform aux " + fmt("%.9f", uniform) + " (alpha*k " +
                  fmt("%.3f", want_uniform) + "); collapse aux " + fmt("%.9f", collapse) + " (alpha*M " +
                  fmt("%.3f", want_collapse) + ")"};
}

std::pair<bool, std::string> metrics_oracle() {
  std::mt19937_64 rng(1013);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  std::size_t mismatches = 0;
  double wr_vs_oa = 0, score_diff = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t c = pick(2, 45), n = pick(1, 300);
    std::vector<int> preds(n), labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(pick(0, c - 1));
      preds[i] = pick(0, 3) == 0 ? labels[i] : static_cast<int>(pick(0, c - 1));
    }
    const auto got = compute_metrics(preds, labels, c);
    const auto want = afm::testing::brute_metrics(preds, labels, c);
    if (got.tp != want.tp || got.fp != want.fp || got.fn != want.fn || got.support != want.support ||
        got.confusion != want.confusion || got.count != n)
      ++mismatches;
    score_diff = std::max({score_diff, std::abs(got.weighted_precision - want.weighted_precision),
                           std::abs(got.weighted_recall - want.weighted_recall),
                           std::abs(got.weighted_f1 - want.weighted_f1), std::abs(got.oa - want.oa)});
    wr_vs_oa = std::max(wr_vs_oa, std::abs(got.weighted_recall - got.oa));
  }
  const std::vector<int> hl{0, 0, 1, 1}, hp{0, 1, 1, 1};
  const auto hand = compute_metrics(hp, hl, 2);
  const bool hand_ok = hand.oa == 0.75 && std::abs(hand.weighted_f1 - 0.7333) <= 1e-4;
  const bool ok = mismatches == 0 && score_diff <= 1e-12 && wr_vs_oa <= 1e-12 && hand_ok;
  return {ok, "1000 vectors: " + std::to_string(mismatches) + " count mismatches, score diff " + fmt("%.1e", score_diff) +
                  ", |wR - OA| " + fmt("%.1e", wr_vs_oa) + "; hand case OA " + fmt("%.4f", hand.oa) + " wF1 " +
                  fmt("%.6f", hand.weighted_f1)};
}

std::pair<bool, std::string> fusion_widths() {
  bool ok = true;
  std::string detail;
  for (std::size_t f : {16, 32}) {
    for (auto mode : {FusionMode::kDense, FusionMode::kConcat}) {
      ModelConfig cfg;
      cfg.fusion.width = f;
      cfg.fusion_mode = mode;
      AfmNet<float> model(cfg, 3);
      Tensor<float> img({1, 3, cfg.image_size, cfg.image_size}, 0.5f);
      NoGradGuard g;
      const auto r = model.forward(Var<float>(img));
      std::string widths;
      for (std::size_t i = 0; i < cfg.num_fusion_stages(); ++i) {
        const std::size_t want = mode == FusionMode::kDense ? f * (2 + i) : 2 * f;
        const std::size_t built = model.fusion().block(i).in_channels();
        const std::size_t seen = r.fusion_inputs.at(i).dim(1);
        ok = ok && built == want && seen == want;
        widths += (i ? "/" : "") + std::to_string(seen);
      }
      detail += "F=" + std::to_string(f) + (mode == FusionMode::kDense ? " dense " : " concat ") + widths + "; ";
    }
  }
  return {ok, detail};
}

std::pair<bool, std::string> erf_locality() {
  std::mt19937_64 rng(77);
  const auto w1 = random_tensor({3, 2, 3, 3}, rng);
  const auto w2 = random_tensor({4, 3, 3, 3}, rng);
  TapFn<double> toy = [&](const Var<double>& x) {
    auto h = ops::conv2d(x, ops::constant(w1), {1, 1, 1});
    return ops::conv2d(h, ops::constant(w2), {1, 1, 1});
  };
  const std::size_t side = 15, c = side / 2;
  const auto map = erf_map(toy, random_tensor({1, 2, side, side}, rng));
  std::size_t outside_nonzero = 0, inside_nonzero = 0;
  for (std::size_t i = 0; i < side; ++i)
    for (std::size_t j = 0; j < side; ++j) {
      const std::size_t cheb = std::max(i > c ? i - c : c - i, j > c ? j - c : c - j);
      const double v = map.at({i, j});
      if (cheb > 2 && v != 0.0) ++outside_nonzero;
      if (cheb <= 2 && v != 0.0) ++inside_nonzero;
    }
  bool ok = outside_nonzero == 0 && inside_nonzero == 25;
  std::string detail = "toy: " + std::to_string(outside_nonzero) + " nonzero outside radius 2, " +
                       std::to_string(inside_nonzero) + "/25 inside; support full vs cnn-only at 128px:";
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ModelConfig full;
    full.image_size = 128;
    ModelConfig cnn_only = full;
    cnn_only.mamba_enabled = false;
    AfmNet<float> a(full, seed), b(cnn_only, seed);
    Rng img_rng(seed * 101);
    const auto input = synth_image(seed % kSyntheticRuleCount, 128, img_rng).reshaped({1, 3, 128, 128});
    const auto sa = support_count(model_erf(a, input, FeatureTap::kFused));
    const auto sb = support_count(model_erf(b, input, FeatureTap::kCnn));
    ok = ok && sa > sb;
    detail += " " + std::to_string(sa) + ">" + std::to_string(sb);
  }
  return {ok, detail};
}

struct Workspace {
  fs::path root;
  Dataset data;
  std::vector<fs::path> checkpoints;
  fs::path overfit_ckpt;
  std::unique_ptr<AfmNet<float>> trained;  // first overfit run, still in memory
};

std::pair<bool, std::string> overfit(Workspace& ws) {
  ModelConfig cfg;  // 64x64, F = 32, M = 4, k = 2
  TrainConfig tc;   // 200 epochs, batch 16
  double secs[2] = {0, 0};
  TrainResult runs[2];
  for (int r = 0; r < 2; ++r) {
    auto holder = std::make_unique<AfmNet<float>>(cfg, tc.seed);
    AfmNet<float>& model = *holder;
    TrainOptions opt;
    opt.out_dir = ws.root / ("overfit_run" + std::to_string(r + 1));
    opt.early_stop_accuracy = 0.99;
    const auto t0 = Clock::now();
    runs[r] = train_run(tc, model, ws.data, opt);
    secs[r] = seconds_since(t0);
    ws.checkpoints.push_back(*opt.out_dir);
    if (r == 0) ws.trained = std::move(holder);
  }
  ws.overfit_ckpt = ws.checkpoints.front();
  const double acc = runs[0].final_train ? runs[0].final_train->oa : 0.0;
  const bool identical = runs[0].step_loss == runs[1].step_loss;
  const bool ok = acc >= 0.99 && runs[0].epochs_run <= 200 && secs[0] < 900 && secs[1] < 900 && identical;
  return {ok, "train OA " + fmt("%.4f", acc) + " after " + std::to_string(runs[0].epochs_run) + " epochs in " +
                  fmt("%.0fs", secs[0]) + "; repeat run " + fmt("%.0fs", secs[1]) + ", " +
                  std::to_string(runs[0].step_loss.size()) + " step losses " +
                  (identical ? "bit-identical" : "DIFFER")};
}

std::pair<bool, std::string> ablations(Workspace& ws) {
  const std::vector<std::string> variants{"cnn=off", "mamba=off", "e1=off", "e2=off", "e1+e2", "head=mlp", "dense=concat"};
  TrainConfig tc;
  tc.epochs = 5;
  bool ok = true;
  std::string detail;
  for (const auto& v : variants) {
    ModelConfig cfg;
    if (v == "e1+e2") {
      apply_ablation(cfg, "e1=off");
      apply_ablation(cfg, "e2=off");
    } else {
      apply_ablation(cfg, v);
    }
    AfmNet<float> model(cfg, tc.seed);
    TrainOptions opt;
    opt.out_dir = ws.root / ("ablate_" + v);
    const auto r = train_run(tc, model, ws.data, opt);
    const auto manifest = read_manifest(*opt.out_dir);
    const bool recorded = manifest.at("ablation") == ablation_record(cfg);
    const bool finite = !r.step_loss.empty() && std::isfinite(r.step_loss.back());
    ok = ok && recorded && finite && r.epochs_run == 5;
    ws.checkpoints.push_back(*opt.out_dir);
    detail += v + (recorded && finite ? " ok; " : " BAD; ");
  }
  return {ok, detail};
}

std::pair<bool, std::string> checkpoint_round_trip(Workspace& ws) {
  AfmNet<float>& original = *ws.trained;
  const fs::path copy = ws.overfit_ckpt;
  auto loaded = load_checkpoint<float>(copy);

  const auto batch = make_batch(ws.data, {0, 1, 2, 3, 4, 5, 6, 7}, 0, 8);
  NoGradGuard g;
  const auto ya = original.logits(Var<float>(batch.images)).value();
  const auto yb = loaded->logits(Var<float>(batch.images)).value();
  const bool exact = ya == yb;

  const fs::path bad = ws.root / "corrupt";
  fs::remove_all(bad);
  fs::copy(copy, bad, fs::copy_options::recursive);
  const std::string victim = "fusion.stage0.reduce.conv.weight";
  const fs::path blob = bad / "params" / (victim + ".bin");
  fs::resize_file(blob, fs::file_size(blob) - 3);
  bool detected = false;
  std::string message;
  try {
    load_checkpoint<float>(bad);
  } catch (const IntegrityError& e) {
    message = e.what();
    detected = message.find(victim) != std::string::npos;
  }
  return {exact && detected, std::string("forward after reload ") + (exact ? "bit-identical" : "DIFFERS") +
                                 "; truncated blob -> IntegrityError: " + (message.empty() ? "none" : message)};
}

std::pair<bool, std::string> complexity(const Workspace& ws) {
  bool ok = true;
  std::string detail;
  for (const auto& ledger : {afm::testing::ledger_tiny_dense(), afm::testing::ledger_tiny_concat_mlp()}) {
    const auto rep = count_params_flops(ledger.config);
    AfmNet<float> model(ledger.config, 1);
    const std::size_t built = model.parameters().param_elements();
    const bool match = rep.total_params == ledger.params() && rep.total_macs == ledger.macs() && built == ledger.params();
    ok = ok && match;
    detail += "ledger " + std::to_string(ledger.params()) + "p/" + std::to_string(ledger.macs()) + "mac vs counter " +
              std::to_string(rep.total_params) + "p/" + std::to_string(rep.total_macs) + "mac, model " +
              std::to_string(built) + "p; ";
  }
  std::size_t agree = 0;
  for (const auto& dir : ws.checkpoints) {
    const auto manifest = read_manifest(dir);
    const auto rep = count_params_flops(manifest.at("config").get<ModelConfig>());
    if (rep.total_params == manifest.at("param_elements").get<std::size_t>()) ++agree;
  }
  ok = ok && !ws.checkpoints.empty() && agree == ws.checkpoints.size();
  detail += std::to_string(agree) + "/" + std::to_string(ws.checkpoints.size()) + " trained checkpoints match";
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  Workspace ws;
  ws.root = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance_work";
  fs::remove_all(ws.root);
  fs::create_directories(ws.root);
  ws.data = synth_generate(DatasetSpec{});  // 8 classes x 8 images, 64x64

  criterion(1, "gradient suite", gradient_suite);
  criterion(2, "scan oracle", scan_oracle);
  criterion(3, "convolution oracle", conv_oracle);
  criterion(4, "MoE invariants", moe_invariants);
  criterion(5, "metrics oracle", metrics_oracle);
  criterion(6, "dense-fusion channel law", fusion_widths);
  criterion(7, "ERF locality", erf_locality);
  criterion(8, "overfit sanity", [&] { return overfit(ws); });
  criterion(9, "ablation wiring", [&] { return ablations(ws); });
  criterion(10, "checkpoint round trip", [&] {
    if (!ws.trained) return std::pair<bool, std::string>{false, "no trained checkpoint"};
    return checkpoint_round_trip(ws);
  });
  criterion(11, "complexity counter", [&] { return complexity(ws); });

  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
