#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bnnlab/tensor.hpp"

namespace bnnlab {

// Images [N, C, H, W] with pixels in [0, 1] and one label per image.
struct Dataset {
  Tensor images;
  std::vector<std::size_t> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> gather_labels(std::span<const std::size_t> indices) const;
  // First n examples (all of them when n == 0 or n >= size()).
  Dataset head(std::size_t n) const;
};

// Throws FormatError if labels or pixels are out of range or sizes disagree.
void validate(const Dataset& d);

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

struct SynthSpec {
  std::size_t classes = 4;
  std::size_t channels = 1;
  std::size_t image_size = 8;
  std::size_t samples_per_class = 100;
  double noise = 0.1;      // std of additive Gaussian pixel noise
  double contrast = 0.25;  // peak-to-peak motif amplitude around mid-gray
  std::uint64_t seed = 1;
};

// Class-conditioned motifs (bars, diagonals, blobs, rings, checkers, ...)
// with per-sample amplitude jitter and Gaussian noise, clamped to [0, 1].
// Split 80/20 per class, then each split shuffled.
DatasetSplit synth_dataset(const SynthSpec& spec);

inline constexpr std::size_t kCifarRecordBytes = 3073;

// One CIFAR-10 binary batch: records of 1 label byte + 3072 channel-major
// pixel bytes.
Dataset load_cifar10_batch(const std::string& path);
// data_batch_1..5.bin and test_batch.bin from `dir`.
DatasetSplit load_cifar10(const std::string& dir);

// Stores a dataset in the BNNL container format.
void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace bnnlab
