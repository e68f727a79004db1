#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "manpp/rng.hpp"
#include "manpp/tensor.hpp"

namespace manpp {

/// In-memory labelled dataset; features are stored row-major per sample.
struct Dataset {
  Shape sample_shape;
  std::vector<double> features;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return shape_numel(sample_shape); }
  Shape batch_shape(std::size_t n) const;
  /// Gathers rows `idx` into a [n, sample_shape...] tensor.
  Tensor batch(std::span<const std::size_t> idx, std::vector<int>& labels_out) const;
  Dataset slice(std::size_t begin, std::size_t count) const;
  /// Throws InputError on labels outside [0, classes) or non-finite features.
  void validate() const;
};

// IDX files (big-endian header): 0x00 0x00 <type> <ndims>, then ndims u32
// extents, then the payload. Only unsigned-byte payloads (type 0x08) are
// accepted. 0x00000801 holds labels, 0x00000803 images [n, h, w] and
// 0x00000804 images [n, c, h, w].

/// Images as [n, 1, h, w] (or [n, c, h, w]) scaled by 1/255. Throws
/// FormatError naming the byte offset of a bad magic or truncated payload.
Tensor parse_idx_images(const std::filesystem::path& path, std::size_t limit = 0);
std::vector<int> parse_idx_labels(const std::filesystem::path& path, std::size_t limit = 0);
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t limit = 0);

void write_idx_images(const std::filesystem::path& path, std::size_t n, std::size_t h, std::size_t w,
                      std::span<const std::uint8_t> pixels);
void write_idx_labels(const std::filesystem::path& path, std::span<const int> labels);

/// CSV with header `label,f0,f1,...`; one sample per row.
Dataset parse_csv(const std::filesystem::path& path);

struct BlobSpec {
  std::size_t classes = 2;
  std::size_t dim = 2;
  std::size_t n = 1000;
  double noise = 0.5;
};

/// Gaussian clusters around seeded centers. Centers are drawn uniformly in a
/// box and resampled until every pair is at least 4 * noise apart; labels
/// cycle through the classes.
Dataset gen_blobs(const BlobSpec& spec, Rng& rng);

/// Two samples drawn from the same centers: a training set of n_train and a
/// test set of n_test points.
std::pair<Dataset, Dataset> gen_blobs_split(const BlobSpec& spec, std::size_t n_test, Rng& rng);

/// Synthetic handwritten-style digits: stroke glyphs for 0-9 under random
/// jitter, affine warp and stroke width, rendered to 28x28 and quantized to
/// bytes. Returns pixels as n*784 bytes plus labels.
struct DigitImages {
  std::size_t n = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
};
DigitImages gen_digit_images(std::size_t n, Rng& rng);

/// Images [n, 1, 28, 28] scaled by 1/255, ten classes.
Dataset to_dataset(const DigitImages& digits);

enum class Normalization { none, standardize };

/// Per-feature standardization with statistics from `train`, applied to both.
void normalize(Normalization mode, Dataset& train, Dataset* test);

}  // namespace manpp
