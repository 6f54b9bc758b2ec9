#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "afm/nn.hpp"
#include "afm/tensor.hpp"

namespace afm {

/// Labeled RGB images, each [3,S,S] with values in [0,1].
struct Dataset {
  std::size_t image_size = 0;
  std::vector<std::string> class_names;
  std::vector<Tensor<float>> images;
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

enum class DataSource { kSynthetic, kFolder };

struct DatasetSpec {
  DataSource source = DataSource::kSynthetic;
  std::size_t num_classes = 8;
  std::size_t per_class = 8;
  std::size_t image_size = 64;
  double train_fraction = 1.0;  // remainder is the test split
  std::uint64_t seed = 1;
  std::filesystem::path path;   // folder source only
};

/// Parses `synthetic[:key=value,...]` (keys classes, per_class, size, train, seed)
/// or `folder:<path>[,size=N][,train=F][,seed=N]`. Throws ConfigError.
DatasetSpec parse_data_spec(const std::string& text);

constexpr std::size_t kSyntheticRuleCount = 16;
const std::vector<std::string>& synthetic_rule_names();

/// Procedural scenes, label = generating rule, sample i has label i % C.
/// Bit-identical for equal specs. Throws ConfigError when C exceeds the rule count.
Dataset synth_generate(const DatasetSpec& spec);

/// Renders one image of the given rule from its own rng stream.
Tensor<float> synth_image(std::size_t rule, std::size_t size, Rng& rng);

/// `root/<class>/<image>.{png,ppm}`; classes sorted lexicographically, images
/// bilinearly resized to `image_size`. Throws DataError naming the offending path.
Dataset load_folder(const std::filesystem::path& root, std::size_t image_size);

/// Decodes one PNG or binary PPM (P6) file into [3,H,W] in [0,1].
Tensor<float> read_image(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
void write_png(const std::filesystem::path& path, const Tensor<float>& image);

/// Bilinear resize of a [3,H,W] image.
Tensor<float> resize_image(const Tensor<float>& image, std::size_t out_h, std::size_t out_w);

Dataset load_dataset(const DatasetSpec& spec);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded permutation cut at round(train_fraction * n). Disjoint and exhaustive.
Split split_indices(std::size_t n, double train_fraction, std::uint64_t seed);

struct AugmentOptions {
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double scale_min = 0.8;
  double scale_max = 1.2;
  double shift = 0.1;

  static AugmentOptions none() { return {0, 0, 1, 1, 0}; }
};

Tensor<float> hflip(const Tensor<float>& image);
Tensor<float> vflip(const Tensor<float>& image);
/// Independent flips, then per-channel x*scale + shift clamped to [0,1].
Tensor<float> augment(const Tensor<float>& image, Rng& rng, const AugmentOptions& opt = {});

/// Stream seed for (seed, epoch, sample) so per-sample work is order independent.
std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample);

struct Batch {
  Tensor<float> images;  // [B,3,S,S]
  std::vector<int> labels;
};

/// Stacks dataset[indices[begin..end)], augmenting each sample with its own
/// stream when `augment_seed` is given.
Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices, std::size_t begin, std::size_t end,
                 const AugmentOptions* augment_opt = nullptr, std::uint64_t augment_seed = 0,
                 std::uint64_t epoch = 0);

}  // namespace afm
