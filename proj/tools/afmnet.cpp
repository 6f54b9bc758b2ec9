// afmnet: training, evaluation and analysis entry points.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "afm/analysis.hpp"
#include "afm/checkpoint.hpp"
#include "afm/errors.hpp"
#include "afm/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kData = 3, kIntegrity = 4 };

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> ablate;
  std::string data;
  std::string ckpt;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch;
};

struct Resolved {
  afm::ModelConfig model;
  afm::TrainConfig train;
  std::string data = "synthetic";
};

Resolved resolve(const Common& c) {
  Resolved r;
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw afm::ConfigError("cannot read config " + c.config_path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw afm::ConfigError("config " + c.config_path + " is not valid JSON: " + e.what());
    }
    if (j.contains("model")) r.model = j.at("model").get<afm::ModelConfig>();
    if (j.contains("train")) r.train = j.at("train").get<afm::TrainConfig>();
    if (j.contains("data")) r.data = j.at("data").get<std::string>();
  }
  for (const auto& a : c.ablate) afm::apply_ablation(r.model, a);
  if (c.seed) r.train.seed = *c.seed;
  if (c.epochs) r.train.epochs = *c.epochs;
  if (c.batch) r.train.batch_size = *c.batch;
  if (!c.data.empty()) r.data = c.data;
  r.model.validate();
  r.train.validate();
  return r;
}

afm::DatasetSpec data_spec(const Resolved& r) {
  auto spec = afm::parse_data_spec(r.data);
  if (r.data.find("size=") == std::string::npos) spec.image_size = r.model.image_size;
  if (spec.source == afm::DataSource::kSynthetic && r.data.find("classes=") == std::string::npos) {
    spec.num_classes = r.model.num_classes;
  }
  return spec;
}

struct Loaded {
  afm::Dataset train;
  afm::Dataset test;
};

Loaded load_split(const afm::DatasetSpec& spec) {
  auto all = afm::load_dataset(spec);
  const auto split = afm::split_indices(all.size(), spec.train_fraction, spec.seed);
  return {all.subset(split.train), all.subset(split.test)};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw afm::DataError("cannot write " + path.string());
  out << text;
}

std::unique_ptr<afm::AfmNet<float>> model_for(const Common& c, const Resolved& r) {
  if (!c.ckpt.empty()) {
    std::optional<afm::ModelConfig> requested;
    if (!c.ablate.empty()) requested = r.model;
    return afm::load_checkpoint<float>(c.ckpt, requested);
  }
  return std::make_unique<afm::AfmNet<float>>(r.model, r.train.seed);
}

void artifact_metadata(const fs::path& path, const std::string& kind, const afm::ModelConfig& config,
                       const std::string& input_id, const afm::Shape& dims) {
  json meta{{"kind", kind},
            {"config_hash", afm::config_hash(config)},
            {"input", input_id},
            {"dims", dims},
            {"ablation", afm::ablation_record(config)}};
  write_text(path, meta.dump(2) + "\n");
}

afm::Tensor<float> single_image(const afm::Dataset& data, std::size_t index) {
  if (index >= data.size()) {
    throw afm::DataError("sample index " + std::to_string(index) + " out of range for " + std::to_string(data.size()) +
                         " images");
  }
  const auto& img = data.images[index];
  return img.reshaped(afm::Shape{1, img.dim(0), img.dim(1), img.dim(2)});
}

int cmd_train(const Common& c) {
  const auto r = resolve(c);
  const auto spec = data_spec(r);
  const auto data = load_split(spec);
  afm::AfmNet<float> model(r.model, r.train.seed);
  const fs::path out = c.out.empty() ? fs::path("run") : fs::path(c.out);
  afm::TrainOptions opt;
  opt.out_dir = out;
  if (data.test.size() > 0) opt.eval_data = &data.test;
  opt.on_epoch = [](const json& e) { std::cerr << e.dump() << '\n'; };
  const auto result = afm::train_run(r.train, model, data.train, opt);
  write_text(out / "config.json", json{{"model", r.model}, {"train", r.train}, {"data", r.data}}.dump(2) + "\n");
  json summary{{"out", out.string()}, {"epochs_run", result.epochs_run}, {"steps", result.step_loss.size()}};
  if (!result.epoch_log.empty()) summary["last_epoch"] = result.epoch_log.back();
  std::cout << summary.dump(2) << '\n';
  return kOk;
}

int cmd_eval(const Common& c) {
  if (c.ckpt.empty()) throw CLI::RequiredError("--ckpt");
  Resolved r = resolve(c);
  const auto model = model_for(c, r);
  r.model = model->config();
  const auto spec = data_spec(r);
  const auto data = afm::load_dataset(spec);
  const auto ev = afm::evaluate(*model, data, r.train.batch_size);
  const fs::path out = c.out.empty() ? fs::path(c.ckpt) : fs::path(c.out);
  auto report = ev.metrics.to_json();
  report["mean_loss"] = ev.mean_loss;
  report["data"] = r.data;
  write_text(out / "metrics.json", report.dump(2) + "\n");
  write_text(out / "confusion.csv", ev.metrics.confusion_csv());
  std::cout << json{{"OA", ev.metrics.oa}, {"weighted_f1", ev.metrics.weighted_f1}, {"count", ev.metrics.count}}.dump()
            << '\n';
  return kOk;
}

int cmd_erf(const Common& c, const std::string& tap, std::size_t index) {
  Resolved r = resolve(c);
  auto model = model_for(c, r);
  r.model = model->config();
  const auto data = afm::load_dataset(data_spec(r));
  const auto map = afm::model_erf(*model, single_image(data, index), afm::parse_feature_tap(tap));
  const fs::path out = c.out.empty() ? fs::path(".") : fs::path(c.out);
  fs::create_directories(out);
  afm::write_csv_grid(out / ("erf_" + tap + ".csv"), map);
  artifact_metadata(out / ("erf_" + tap + ".json"), "erf", r.model, r.data + "#" + std::to_string(index), map.shape());
  std::cout << json{{"tap", tap}, {"support", afm::support_count(map)}, {"pixels", map.size()}}.dump() << '\n';
  return kOk;
}

int cmd_cam(const Common& c, const std::string& layer, std::size_t index, std::optional<std::size_t> class_id) {
  Resolved r = resolve(c);
  auto model = model_for(c, r);
  r.model = model->config();
  const auto data = afm::load_dataset(data_spec(r));
  const auto cls = class_id ? *class_id : static_cast<std::size_t>(data.labels.at(index));
  const auto map = afm::model_grad_cam(*model, single_image(data, index), cls, afm::parse_feature_tap(layer));
  const fs::path out = c.out.empty() ? fs::path(".") : fs::path(c.out);
  fs::create_directories(out);
  afm::write_csv_grid(out / "cam.csv", map);
  artifact_metadata(out / "cam.json", "cam", r.model,
                    r.data + "#" + std::to_string(index) + "/class" + std::to_string(cls), map.shape());
  std::cout << json{{"layer", layer}, {"class", cls}}.dump() << '\n';
  return kOk;
}

int cmd_routing(const Common& c) {
  Resolved r = resolve(c);
  auto model = model_for(c, r);
  r.model = model->config();
  const auto data = afm::load_dataset(data_spec(r));
  const auto stats = afm::routing_stats(*model, data, r.train.batch_size);
  const fs::path out = c.out.empty() ? fs::path(".") : fs::path(c.out);
  write_text(out / "routing.csv", stats.csv());
  artifact_metadata(out / "routing.json", "routing", r.model, r.data,
                    afm::Shape{stats.mean_gate.size(), r.model.moe.num_experts});
  std::cout << stats.csv();
  return kOk;
}

int cmd_complexity(const Common& c) {
  Resolved r = resolve(c);
  if (!c.ckpt.empty()) r.model = afm::read_manifest(c.ckpt).at("config").get<afm::ModelConfig>();
  const auto report = afm::count_params_flops(r.model);
  auto j = report.to_json();
  j["config_hash"] = afm::config_hash(r.model);
  if (!c.out.empty()) write_text(fs::path(c.out) / "complexity.json", j.dump(2) + "\n");
  std::cout << json{{"total_params", report.total_params}, {"total_macs", report.total_macs}, {"total_flops", report.flops()}}
                   .dump()
            << '\n';
  return kOk;
}

int cmd_sweep(const Common& c, const std::vector<std::size_t>& experts) {
  const auto r = resolve(c);
  const auto data = load_split(data_spec(r));
  const fs::path out = c.out.empty() ? fs::path("sweep") : fs::path(c.out);
  const auto rows = afm::expert_sweep(r.model, r.train, data.train, data.test.size() ? &data.test : nullptr, experts, out);
  write_text(out / "sweep.csv", afm::sweep_csv(rows));
  std::cout << afm::sweep_csv(rows);
  return kOk;
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON config with optional model/train/data sections")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Seed for initialization, data order and augmentation");
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--ablate", c.ablate, "key=value toggle (cnn, mamba, e1, e2, head, dense); repeatable")
      ->take_all()
      ->allow_extra_args(false);
  cmd->add_option("--data", c.data, "synthetic[:classes=C,per_class=N,size=S,train=F,seed=K] or folder:<path>");
  cmd->add_option("--epochs", c.epochs, "Override the number of training epochs");
  cmd->add_option("--batch", c.batch, "Override the batch size");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AFM-Net: hybrid CNN/Mamba scene classifier"};
  app.require_subcommand(1);
  Common c;

  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint plus epoch log");
  add_common(train, c);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint; writes metrics.json and confusion.csv");
  add_common(eval, c);
  eval->add_option("--ckpt", c.ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);

  std::string tap = "fused";
  std::size_t index = 0;
  auto* erf = app.add_subcommand("erf", "Effective receptive field map of a feature tap");
  add_common(erf, c);
  erf->add_option("--ckpt", c.ckpt, "Checkpoint directory (random init when omitted)")->check(CLI::ExistingDirectory);
  erf->add_option("--tap", tap, "cnn, mamba or fused");
  erf->add_option("--index", index, "Sample index in the dataset");

  std::string layer = "fused";
  std::optional<std::size_t> class_id;
  auto* cam = app.add_subcommand("cam", "Grad-CAM map for one image");
  add_common(cam, c);
  cam->add_option("--ckpt", c.ckpt, "Checkpoint directory (random init when omitted)")->check(CLI::ExistingDirectory);
  cam->add_option("--layer", layer, "cnn, mamba or fused");
  cam->add_option("--index", index, "Sample index in the dataset");
  cam->add_option("--class", class_id, "Target class (defaults to the sample label)");

  auto* routing = app.add_subcommand("routing", "Per-class mean gating weights");
  add_common(routing, c);
  routing->add_option("--ckpt", c.ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);

  auto* complexity = app.add_subcommand("complexity", "Analytic parameter and MAC/FLOP counts");
  add_common(complexity, c);
  complexity->add_option("--ckpt", c.ckpt, "Read the config from a checkpoint")->check(CLI::ExistingDirectory);

  std::vector<std::size_t> experts{2, 4, 6, 8};
  auto* sweep = app.add_subcommand("sweep-experts", "Train one model per routable expert count");
  add_common(sweep, c);
  sweep->add_option("--experts", experts, "Expert counts, e.g. --experts 2 4 8")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(c);
    if (*eval) return cmd_eval(c);
    if (*erf) return cmd_erf(c, tap, index);
    if (*cam) return cmd_cam(c, layer, index, class_id);
    if (*routing) return cmd_routing(c);
    if (*complexity) return cmd_complexity(c);
    if (*sweep) return cmd_sweep(c, experts);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const afm::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const afm::CapabilityError& e) {
    std::cerr << "unsupported: " << e.what() << '\n';
    return kUsage;
  } catch (const afm::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const afm::IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << '\n';
    return kIntegrity;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
