#include "afm/checkpoint.hpp"

#include <fstream>
#include <map>

#include "afm/errors.hpp"

namespace afm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFormat = "afm-checkpoint";
constexpr int kVersion = 1;

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_tensors(AfmNet<T>& model, std::vector<std::string>* kinds) {
  auto c = model.parameters();
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (auto& p : c.params) {
    out.emplace_back(p.name, &p.var->mutable_value());
    if (kinds) kinds->push_back("param");
  }
  for (auto& b : c.buffers) {
    out.emplace_back(b.name, b.tensor);
    if (kinds) kinds->push_back("buffer");
  }
  return out;
}

}  // namespace

template <typename T>
void save_checkpoint(AfmNet<T>& model, const fs::path& dir, const json& extra) {
  fs::create_directories(dir / "params");
  std::vector<std::string> kinds;
  const auto tensors = named_tensors(model, &kinds);
  json index = json::array();
  std::size_t param_elements = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, tensor] = tensors[i];
    const std::string file = "params/" + name + ".bin";
    save_tensor((dir / file).string(), *tensor);
    if (kinds[i] == "param") param_elements += tensor->size();
    index.push_back({{"name", name},
                     {"kind", kinds[i]},
                     {"shape", tensor->shape()},
                     {"file", file},
                     {"bytes", tensor_dump_bytes(tensor->shape(), precision_of<T>())}});
  }
  json manifest{{"format", kFormat},
                {"version", kVersion},
                {"precision", static_cast<int>(precision_of<T>())},
                {"config", model.config()},
                {"config_hash", config_hash(model.config())},
                {"ablation", ablation_record(model.config())},
                {"param_elements", param_elements},
                {"tensors", index}};
  if (!extra.is_null()) manifest["extra"] = extra;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

json read_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IntegrityError("missing checkpoint manifest " + path.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IntegrityError("unparseable checkpoint manifest " + path.string() + ": " + e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != kFormat || !manifest.contains("tensors") ||
      !manifest.contains("config")) {
    throw IntegrityError("not an AFM checkpoint manifest: " + path.string());
  }
  return manifest;
}

template <typename T>
void load_checkpoint_into(AfmNet<T>& model, const fs::path& dir) {
  const json manifest = read_manifest(dir);
  if (manifest.value("precision", 0) != static_cast<int>(precision_of<T>())) {
    throw IntegrityError("checkpoint precision " + std::to_string(manifest.value("precision", 0)) +
                         " does not match the requested model");
  }
  std::map<std::string, json> entries;
  for (const auto& e : manifest.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    if (!entries.emplace(name, e).second) throw IntegrityError("duplicate manifest entry '" + name + "'");
  }
  const auto tensors = named_tensors(model, nullptr);
  for (const auto& [name, target] : tensors) {
    auto it = entries.find(name);
    if (it == entries.end()) throw IntegrityError("parameter '" + name + "' missing from checkpoint manifest");
    const json& e = it->second;
    const auto shape = e.at("shape").get<Shape>();
    if (shape != target->shape()) {
      throw IntegrityError("parameter '" + name + "' has shape " + shape_str(shape) + " in the manifest but " +
                           shape_str(target->shape()) + " in the model");
    }
    const fs::path file = dir / e.at("file").get<std::string>();
    std::error_code ec;
    const auto actual = fs::file_size(file, ec);
    const auto expected = tensor_dump_bytes(shape, precision_of<T>());
    if (ec) throw IntegrityError("parameter '" + name + "': blob " + file.string() + " is unreadable");
    if (actual != expected) {
      throw IntegrityError("parameter '" + name + "': blob length " + std::to_string(actual) + " bytes, expected " +
                           std::to_string(expected));
    }
    auto loaded = load_tensor<T>(file.string(), "parameter '" + name + "'");
    if (loaded.shape() != shape) throw IntegrityError("parameter '" + name + "': blob shape disagrees with manifest");
    *target = std::move(loaded);
    entries.erase(it);
  }
  if (!entries.empty()) {
    throw IntegrityError("checkpoint has entry '" + entries.begin()->first + "' that the model does not define");
  }
}

template <typename T>
std::unique_ptr<AfmNet<T>> load_checkpoint(const fs::path& dir, const std::optional<ModelConfig>& requested) {
  const json manifest = read_manifest(dir);
  ModelConfig config;
  try {
    config = manifest.at("config").get<ModelConfig>();
  } catch (const Error& e) {
    throw IntegrityError(std::string("checkpoint config is invalid: ") + e.what());
  }
  if (requested) {
    const json want = ablation_record(*requested);
    const json have = ablation_record(config);
    if (want != have) {
      throw IntegrityError("checkpoint toggles " + have.dump() + " do not match the requested model " + want.dump());
    }
  }
  auto model = std::make_unique<AfmNet<T>>(config, 0);
  load_checkpoint_into(*model, dir);
  return model;
}

template void save_checkpoint(AfmNet<float>&, const fs::path&, const json&);
template void save_checkpoint(AfmNet<double>&, const fs::path&, const json&);
template void load_checkpoint_into(AfmNet<float>&, const fs::path&);
template void load_checkpoint_into(AfmNet<double>&, const fs::path&);
template std::unique_ptr<AfmNet<float>> load_checkpoint(const fs::path&, const std::optional<ModelConfig>&);
template std::unique_ptr<AfmNet<double>> load_checkpoint(const fs::path&, const std::optional<ModelConfig>&);

}  // namespace afm
