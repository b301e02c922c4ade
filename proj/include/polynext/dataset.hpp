#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "polynext/rng.hpp"
#include "polynext/tensor.hpp"

namespace polynext {

/// Image classification source. Pixels are stored as raw bytes (CIFAR-style
/// planes) and decoded to standardized f64 on batch assembly; per-channel
/// mean/std come from the training split that produced the source.
struct DatasetSource {
  enum class Kind { kCifar10, kSynthetic };
  Kind kind = Kind::kSynthetic;
  int64_t classes = 10;
  int64_t resolution = 32;
  std::vector<uint8_t> pixels;  // n * 3 * res * res, channel-plane order
  std::vector<uint8_t> labels;  // n, values < classes
  std::array<double, 3> channel_mean{0.5, 0.5, 0.5};
  std::array<double, 3> channel_std{0.25, 0.25, 0.25};
  bool allow_flip = true;  // SVHN-style sources disable horizontal flips

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  int64_t pixels_per_image() const { return 3 * resolution * resolution; }

  /// Recomputes mean/std from this source's own pixels.
  void compute_stats();
  /// Adopts another split's standardization (validation/test sources use the
  /// training statistics).
  void use_stats_of(const DatasetSource& train);
  /// First-`count` (or arbitrary-range) view copy.
  DatasetSource slice(int64_t start, int64_t count) const;
};

/// Standard CIFAR-10 binary layout: 3073-byte records (label byte + 3072
/// pixel bytes, R/G/B planes of a row-major 32x32 image). A directory path
/// loads data_batch_1..5.bin; a file path loads that file.
DatasetSource load_cifar10(const std::string& path);
DatasetSource load_cifar10_files(const std::vector<std::string>& files);
/// Serializes records [start, start+count) back to the binary layout.
void write_cifar10_file(const DatasetSource& src, const std::string& path, int64_t start, int64_t count);

/// Class-conditioned Gaussian blob images; nearly separable by construction.
DatasetSource synthetic_dataset(uint64_t seed, int64_t classes, int64_t resolution, int64_t n);

/// Assembles a standardized batch [B,3,R,R]; augmentation = random
/// horizontal flip (when the source allows) plus 4-pixel pad-and-crop.
Tensor make_batch(const DatasetSource& src, const std::vector<int64_t>& indices, bool augment, Rng* rng);
std::vector<int> batch_labels(const DatasetSource& src, const std::vector<int64_t>& indices);

}  // namespace polynext
