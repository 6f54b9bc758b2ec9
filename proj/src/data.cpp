#include "afm/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "afm/errors.hpp"
#include "afm/ops.hpp"

namespace afm {

namespace fs = std::filesystem;

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.image_size = image_size;
  out.class_names = class_names;
  for (auto i : indices) {
    out.images.push_back(images.at(i));
    out.labels.push_back(labels.at(i));
  }
  return out;
}

namespace {

std::size_t parse_size(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("data option " + key + " expects a non-negative integer, got '" + value + "'");
  }
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("data option " + key + " expects a number, got '" + value + "'");
  }
}

}  // namespace

DatasetSpec parse_data_spec(const std::string& text) {
  DatasetSpec spec;
  std::string rest;
  if (text.rfind("synthetic", 0) == 0) {
    spec.source = DataSource::kSynthetic;
    rest = text.size() > 9 && text[9] == ':' ? text.substr(10) : text.substr(9);
  } else if (text.rfind("folder:", 0) == 0) {
    spec.source = DataSource::kFolder;
    rest = text.substr(7);
    const auto comma = rest.find(',');
    spec.path = rest.substr(0, comma);
    rest = comma == std::string::npos ? "" : rest.substr(comma + 1);
    if (spec.path.empty()) throw ConfigError("folder data source needs a path");
  } else {
    throw ConfigError("data source must be synthetic[:...] or folder:<path>, got '" + text + "'");
  }
  std::stringstream ss(rest);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("data option must be key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    if (key == "classes") {
      spec.num_classes = parse_size(key, value);
    } else if (key == "per_class") {
      spec.per_class = parse_size(key, value);
    } else if (key == "size") {
      spec.image_size = parse_size(key, value);
    } else if (key == "train") {
      spec.train_fraction = parse_real(key, value);
    } else if (key == "seed") {
      spec.seed = parse_size(key, value);
    } else {
      throw ConfigError("unknown data option '" + key + "'");
    }
  }
  if (!(spec.train_fraction > 0 && spec.train_fraction <= 1)) throw ConfigError("train fraction must lie in (0, 1]");
  return spec;
}

const std::vector<std::string>& synthetic_rule_names() {
  static const std::vector<std::string> names{
      "horizontal_stripes", "vertical_stripes", "checkerboard",        "radial_gradient",
      "random_blobs",       "diagonal_bands",   "rings",               "noise_texture",
      "crosshatch",         "dot_grid",         "concentric_squares",  "horizontal_gradient",
      "vertical_gradient",  "wavy_lines",       "stars",               "half_plane"};
  return names;
}

namespace {

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

double square_wave(double phase) { return std::sin(phase) >= 0 ? 1.0 : 0.0; }

}  // namespace

Tensor<float> synth_image(std::size_t rule, std::size_t size, Rng& rng) {
  if (rule >= kSyntheticRuleCount) throw ConfigError("synthetic rule " + std::to_string(rule) + " does not exist");
  const double s = static_cast<double>(size);
  constexpr double kTau = 2 * std::numbers::pi;
  std::array<double, 3> bg{}, fg{};
  for (auto& c : bg) c = uniform(rng, 0.0, 0.4);
  for (auto& c : fg) c = uniform(rng, 0.6, 1.0);

  std::vector<double> p(size * size, 0.0);
  auto at = [&p, size](std::size_t y, std::size_t x) -> double& { return p[y * size + x]; };
  const double phase = uniform(rng, 0, kTau);
  const double cx = uniform(rng, 0.3 * s, 0.7 * s), cy = uniform(rng, 0.3 * s, 0.7 * s);

  switch (rule) {
    case 0:
    case 1: {
      const double period = uniform(rng, s / 8, s / 4);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) at(y, x) = square_wave(kTau * double(rule == 0 ? y : x) / period + phase);
      break;
    }
    case 2: {
      const double cell = uniform(rng, s / 10, s / 5), ox = uniform(rng, 0, cell), oy = uniform(rng, 0, cell);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const auto a = static_cast<long>(std::floor((double(x) + ox) / cell));
          const auto b = static_cast<long>(std::floor((double(y) + oy) / cell));
          at(y, x) = ((a + b) % 2 == 0) ? 1.0 : 0.0;
        }
      break;
    }
    case 3: {
      const double radius = uniform(rng, 0.5 * s, 0.9 * s);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) at(y, x) = std::max(0.0, 1.0 - std::hypot(x - cx, y - cy) / radius);
      break;
    }
    case 4: {
      const int count = std::uniform_int_distribution<int>(3, 6)(rng);
      for (int k = 0; k < count; ++k) {
        const double bx = uniform(rng, 0, s), by = uniform(rng, 0, s), sigma = uniform(rng, s / 16, s / 8);
        for (std::size_t y = 0; y < size; ++y)
          for (std::size_t x = 0; x < size; ++x) {
            const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
            at(y, x) = std::min(1.0, at(y, x) + std::exp(-d2 / (2 * sigma * sigma)));
          }
      }
      break;
    }
    case 5: {
      const double period = uniform(rng, s / 6, s / 3);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) at(y, x) = square_wave(kTau * double(x + y) / period + phase);
      break;
    }
    case 6:
    case 10: {
      const double period = uniform(rng, s / 8, s / 4);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double d = rule == 6 ? std::hypot(x - cx, y - cy) : std::max(std::abs(x - cx), std::abs(y - cy));
          at(y, x) = square_wave(kTau * d / period + phase);
        }
      break;
    }
    case 7: {
      const std::size_t cell = 2;
      const std::size_t cells = (size + cell - 1) / cell;
      std::vector<double> grid(cells * cells);
      for (auto& g : grid) g = uniform(rng, 0, 1);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) at(y, x) = grid[(y / cell) * cells + x / cell];
      break;
    }
    case 8: {
      const auto period = static_cast<std::size_t>(uniform(rng, s / 8, s / 5));
      const auto ox = std::uniform_int_distribution<std::size_t>(0, period - 1)(rng);
      const auto oy = std::uniform_int_distribution<std::size_t>(0, period - 1)(rng);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) at(y, x) = ((x + ox) % period < 2 || (y + oy) % period < 2) ? 1.0 : 0.0;
      break;
    }
    case 9: {
      const double period = uniform(rng, s / 8, s / 5), ox = uniform(rng, 0, period), oy = uniform(rng, 0, period);
      const double radius = period / 4;
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dx = std::remainder(double(x) + ox, period), dy = std::remainder(double(y) + oy, period);
          at(y, x) = std::hypot(dx, dy) < radius ? 1.0 : 0.0;
        }
      break;
    }
    case 11:
    case 12: {
      const bool flip = uniform(rng, 0, 1) < 0.5;
      const double gamma = uniform(rng, 0.7, 1.4);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          double t = double(rule == 11 ? x : y) / std::max(1.0, s - 1);
          if (flip) t = 1 - t;
          at(y, x) = std::pow(t, gamma);
        }
      break;
    }
    case 13: {
      const double period = uniform(rng, s / 8, s / 5), amp = uniform(rng, s / 16, s / 8);
      const double wavelength = uniform(rng, s / 3, s / 1.5);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          at(y, x) = square_wave(kTau * (double(y) + amp * std::sin(kTau * double(x) / wavelength)) / period + phase);
      break;
    }
    case 14: {
      const int count = std::uniform_int_distribution<int>(15, 40)(rng);
      std::uniform_int_distribution<std::size_t> pos(0, size - 1);
      for (int k = 0; k < count; ++k) {
        const std::size_t y = pos(rng), x = pos(rng);
        at(y, x) = 1.0;
        if (x + 1 < size) at(y, x + 1) = 1.0;
        if (y + 1 < size) at(y + 1, x) = 1.0;
      }
      break;
    }
    case 15: {
      const double c = std::cos(phase), sn = std::sin(phase);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) at(y, x) = (x - cx) * c + (y - cy) * sn > 0 ? 1.0 : 0.0;
      break;
    }
    default:
      break;
  }

  Tensor<float> img(Shape{3, size, size});
  std::normal_distribution<double> noise(0.0, 0.03);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < size * size; ++i) {
      const double v = bg[ch] * (1 - p[i]) + fg[ch] * p[i] + noise(rng);
      img[ch * size * size + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  return img;
}

std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(sample),
                    static_cast<std::uint32_t>(sample >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

Dataset synth_generate(const DatasetSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.num_classes > kSyntheticRuleCount) {
    throw ConfigError("synthetic generator supports at most " + std::to_string(kSyntheticRuleCount) + " classes, got " +
                      std::to_string(spec.num_classes));
  }
  if (spec.image_size < 8) throw ConfigError("synthetic images must be at least 8 pixels wide");
  Dataset d;
  d.image_size = spec.image_size;
  const auto& names = synthetic_rule_names();
  d.class_names.assign(names.begin(), names.begin() + static_cast<std::ptrdiff_t>(spec.num_classes));
  const std::size_t total = spec.num_classes * spec.per_class;
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t label = i % spec.num_classes;
    Rng rng(sample_seed(spec.seed, 0xD47A, i));
    d.images.push_back(synth_image(label, spec.image_size, rng));
    d.labels.push_back(static_cast<int>(label));
  }
  return d;
}

namespace {

Tensor<float> read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  auto token = [&in, &path]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) return t;
        continue;
      }
      t.push_back(c);
    }
    if (t.empty()) throw DataError("truncated PPM header in " + path.string());
    return t;
  };
  if (token() != "P6") throw DataError("not a binary PPM (P6): " + path.string());
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::logic_error&) {
    throw DataError("malformed PPM header in " + path.string());
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw DataError("invalid PPM dimensions in " + path.string());
  const std::size_t bytes = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(w * h * 3 * bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw DataError("truncated PPM pixel data in " + path.string());
  Tensor<float> img(Shape{3, h, w});
  for (std::size_t i = 0; i < w * h; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t k = (i * 3 + c) * bytes;
      const double v = bytes == 1 ? raw[k] : (raw[k] << 8 | raw[k + 1]);
      img[c * w * h + i] = static_cast<float>(v / static_cast<double>(maxval));
    }
  return img;
}

Tensor<float> read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError("cannot decode PNG " + path.string() + ": " + msg);
  }
  const std::size_t w = image.width, h = image.height;
  Tensor<float> img(Shape{3, h, w});
  for (std::size_t i = 0; i < w * h; ++i)
    for (std::size_t c = 0; c < 3; ++c) img[c * w * h + i] = static_cast<float>(buf[i * 3 + c] / 255.0);
  return img;
}

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

std::vector<unsigned char> to_bytes(const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("expected a [3,H,W] image, got " + shape_str(image.shape()));
  const std::size_t hw = image.dim(1) * image.dim(2);
  std::vector<unsigned char> out(hw * 3);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(image[c * hw + i]), 0.0, 1.0);
      out[i * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
  return out;
}

}  // namespace

Tensor<float> read_image(const fs::path& path) {
  const auto ext = lower_ext(path);
  if (ext == ".ppm") return read_ppm(path);
  if (ext == ".png") return read_png(path);
  throw DataError("unsupported image format: " + path.string());
}

void write_ppm(const fs::path& path, const Tensor<float>& image) {
  const auto bytes = to_bytes(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << image.dim(2) << ' ' << image.dim(1) << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_png(const fs::path& path, const Tensor<float>& image) {
  const auto bytes = to_bytes(image);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.dim(2));
  img.height = static_cast<png_uint_32>(image.dim(1));
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

Tensor<float> resize_image(const Tensor<float>& image, std::size_t out_h, std::size_t out_w) {
  if (image.dim(1) == out_h && image.dim(2) == out_w) return image;
  NoGradGuard guard;
  auto x = ops::constant(image.reshaped(Shape{1, 3, image.dim(1), image.dim(2)}));
  return ops::interpolate(x, out_h, out_w, ops::InterpMode::kBilinear).value().reshaped(Shape{3, out_h, out_w});
}

Dataset load_folder(const fs::path& root, std::size_t image_size) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DataError("dataset root is not a directory: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.size() < 2) throw DataError("dataset root needs at least 2 class directories: " + root.string());
  Dataset d;
  d.image_size = image_size;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[label])) {
      const auto ext = lower_ext(entry.path());
      if (entry.is_regular_file() && (ext == ".png" || ext == ".ppm")) files.push_back(entry.path());
    }
    if (files.empty()) throw DataError("class directory has no PNG/PPM images: " + class_dirs[label].string());
    std::sort(files.begin(), files.end());
    d.class_names.push_back(class_dirs[label].filename().string());
    for (const auto& f : files) {
      d.images.push_back(resize_image(read_image(f), image_size, image_size));
      d.labels.push_back(static_cast<int>(label));
    }
  }
  return d;
}

Dataset load_dataset(const DatasetSpec& spec) {
  return spec.source == DataSource::kSynthetic ? synth_generate(spec) : load_folder(spec.path, spec.image_size);
}

Split split_indices(std::size_t n, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction >= 0 && train_fraction <= 1)) throw ConfigError("train fraction must lie in [0, 1]");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  Split s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(cut));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(cut), perm.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

Tensor<float> hflip(const Tensor<float>& image) {
  Tensor<float> out(image.shape());
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(k * h + y) * w + x] = image[(k * h + y) * w + (w - 1 - x)];
  return out;
}

Tensor<float> vflip(const Tensor<float>& image) {
  Tensor<float> out(image.shape());
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(k * h + y) * w + x] = image[(k * h + (h - 1 - y)) * w + x];
  return out;
}

Tensor<float> augment(const Tensor<float>& image, Rng& rng, const AugmentOptions& opt) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<float> out = image;
  if (u(rng) < opt.hflip_prob) out = hflip(out);
  if (u(rng) < opt.vflip_prob) out = vflip(out);
  const std::size_t hw = out.dim(1) * out.dim(2);
  for (std::size_t c = 0; c < out.dim(0); ++c) {
    const double scale = opt.scale_min + (opt.scale_max - opt.scale_min) * u(rng);
    const double shift = opt.shift * (2 * u(rng) - 1);
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = static_cast<double>(out[c * hw + i]) * scale + shift;
      out[c * hw + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices, std::size_t begin, std::size_t end,
                 const AugmentOptions* augment_opt, std::uint64_t augment_seed, std::uint64_t epoch) {
  if (begin >= end || end > indices.size()) throw ContractError("empty or out-of-range batch");
  const std::size_t s = data.image_size, plane = 3 * s * s;
  Batch b;
  b.images = Tensor<float>(Shape{end - begin, 3, s, s});
  for (std::size_t i = begin; i < end; ++i) {
    const std::size_t idx = indices[i];
    const auto& src = data.images.at(idx);
    if (src.shape() != Shape{3, s, s}) {
      throw DataError("sample " + std::to_string(idx) + " has shape " + shape_str(src.shape()) + ", expected " +
                      shape_str(Shape{3, s, s}));
    }
    const float* from = src.ptr();
    Tensor<float> aug;
    if (augment_opt) {
      Rng rng(sample_seed(augment_seed, epoch, idx));
      aug = augment(src, rng, *augment_opt);
      from = aug.ptr();
    }
    std::copy(from, from + plane, b.images.ptr() + (i - begin) * plane);
    b.labels.push_back(data.labels.at(idx));
  }
  return b;
}

}  // namespace afm
