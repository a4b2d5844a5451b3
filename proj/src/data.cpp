#include "bnnlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include "bnnlab/container.hpp"
#include "bnnlab/error.hpp"
#include "bnnlab/rng.hpp"

namespace bnnlab {

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t per = images.size() / std::max<std::size_t>(size(), 1);
  Shape shape = images.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const double* src = images.data().data() + indices[k] * per;
    std::copy(src, src + per, out.data().data() + k * per);
  }
  return out;
}

std::vector<std::size_t> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels[i]);
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  if (n == 0 || n >= size()) return *this;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return Dataset{gather(idx), gather_labels(idx), class_count};
}

void validate(const Dataset& d) {
  if (d.images.rank() != 4) throw FormatError("dataset: images must be [N, C, H, W]");
  if (d.images.dim(0) != d.labels.size()) throw FormatError("dataset: image and label counts differ");
  for (auto l : d.labels) {
    if (l >= d.class_count) throw FormatError("dataset: label " + std::to_string(l) + " out of range");
  }
  for (double v : d.images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw FormatError("dataset: pixel outside [0, 1]");
  }
}

// ---------------------------------------------------------------- synthetic

namespace {

constexpr std::size_t kMotifs = 10;

double motif(std::size_t kind, double u, double v) {
  const double pi = std::numbers::pi;
  auto bar = [](double d) { return std::exp(-(d * d) / (2 * 0.18 * 0.18)); };
  switch (kind % kMotifs) {
    case 0: return bar(v);                                        // horizontal bar
    case 1: return bar(u);                                        // vertical bar
    case 2: return bar((u - v) / std::numbers::sqrt2);            // diagonal
    case 3: return bar((u + v) / std::numbers::sqrt2);            // anti-diagonal
    case 4: return std::exp(-(u * u + v * v) / (2 * 0.3 * 0.3));  // blob
    case 5: return bar(std::sqrt(u * u + v * v) - 0.65);          // ring
    case 6: return 0.5 + 0.5 * std::sin(pi * 1.5 * u) * std::sin(pi * 1.5 * v);  // checker
    case 7: return std::max(bar(u), bar(v));                      // cross
    case 8: return std::max(std::abs(u), std::abs(v)) > 0.7 ? 1.0 : 0.0;  // frame
    default: return 0.5 + 0.5 * std::cos(pi * 2.0 * v);           // stripes
  }
}

// Zero-mean, unit-peak pattern per class and channel.
std::vector<double> class_pattern(std::size_t cls, std::size_t channels, std::size_t size) {
  std::vector<double> p(channels * size * size);
  const double scale = 2.0 / static_cast<double>(size);
  for (std::size_t c = 0; c < channels; ++c) {
    // Higher class ids beyond the motif count reuse motifs with a channel tint.
    const double tint = channels == 1 ? 1.0 : 0.5 + 0.5 * ((cls / kMotifs + c) % 2);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double u = (static_cast<double>(x) + 0.5) * scale - 1.0;
        const double v = (static_cast<double>(y) + 0.5) * scale - 1.0;
        p[(c * size + y) * size + x] = tint * motif(cls, u, v);
      }
  }
  double mean = 0.0;
  for (double v : p) mean += v;
  mean /= static_cast<double>(p.size());
  double peak = 0.0;
  for (double& v : p) {
    v -= mean;
    peak = std::max(peak, std::abs(v));
  }
  if (peak > 0.0)
    for (double& v : p) v /= 2.0 * peak;
  return p;
}

void shuffle(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
}

Dataset assemble(const std::vector<std::vector<double>>& images, const std::vector<std::size_t>& labels,
                 std::vector<std::size_t> order, const SynthSpec& spec, Rng& rng) {
  shuffle(order, rng);
  const std::size_t per = spec.channels * spec.image_size * spec.image_size;
  Dataset d;
  d.class_count = spec.classes;
  d.images = Tensor({order.size(), spec.channels, spec.image_size, spec.image_size});
  for (std::size_t k = 0; k < order.size(); ++k) {
    std::copy(images[order[k]].begin(), images[order[k]].end(), d.images.data().data() + k * per);
    d.labels.push_back(labels[order[k]]);
  }
  return d;
}

}  // namespace

DatasetSplit synth_dataset(const SynthSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synth: need at least 2 classes");
  if (!(spec.noise >= 0.0)) throw ConfigError("synth: noise must be nonnegative");
  if (spec.image_size < 2 || spec.channels == 0) throw ConfigError("synth: image too small");
  if (spec.samples_per_class < 2) throw ConfigError("synth: need at least 2 samples per class");
  Rng rng(derive_seed(spec.seed, "synth.pixels"));
  Rng split_rng(derive_seed(spec.seed, "synth.split"));
  std::vector<std::vector<double>> images;
  std::vector<std::size_t> labels, train_idx, test_idx;
  const std::size_t n_test = std::max<std::size_t>(1, spec.samples_per_class / 5);
  for (std::size_t cls = 0; cls < spec.classes; ++cls) {
    const auto pattern = class_pattern(cls, spec.channels, spec.image_size);
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      const double amplitude = spec.contrast * rng.uniform(0.75, 1.25);
      std::vector<double> img(pattern.size());
      for (std::size_t i = 0; i < img.size(); ++i) {
        const double noise = spec.noise > 0.0 ? spec.noise * rng.normal() : 0.0;
        img[i] = std::clamp(0.5 + amplitude * pattern[i] + noise, 0.0, 1.0);
      }
      (s < n_test ? test_idx : train_idx).push_back(images.size());
      images.push_back(std::move(img));
      labels.push_back(cls);
    }
  }
  DatasetSplit split;
  split.train = assemble(images, labels, train_idx, spec, split_rng);
  split.test = assemble(images, labels, test_idx, spec, split_rng);
  return split;
}

// ---------------------------------------------------------------- CIFAR-10

Dataset load_cifar10_batch(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open CIFAR-10 batch file");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % kCifarRecordBytes;
    throw FormatError(path + ": truncated record at offset " + std::to_string(offset) + " (file size " +
                      std::to_string(bytes.size()) + " is not a multiple of 3073)");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset d;
  d.class_count = 10;
  d.images = Tensor({n, 3, 32, 32});
  d.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t offset = r * kCifarRecordBytes;
    const auto label = static_cast<unsigned char>(bytes[offset]);
    if (label > 9) {
      throw FormatError(path + ": label byte " + std::to_string(label) + " at offset " + std::to_string(offset) +
                        " outside 0-9");
    }
    d.labels[r] = label;
    double* dst = d.images.data().data() + r * 3072;
    for (std::size_t i = 0; i < 3072; ++i) {
      dst[i] = static_cast<double>(static_cast<unsigned char>(bytes[offset + 1 + i])) / 255.0;
    }
  }
  return d;
}

namespace {

Dataset concat(std::vector<Dataset> parts) {
  Dataset out;
  out.class_count = 10;
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  out.images = Tensor({n, 3, 32, 32});
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.images.data().begin(), p.images.data().end(), out.images.data().begin() + at);
    at += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

}  // namespace

DatasetSplit load_cifar10(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<Dataset> train;
  for (int b = 1; b <= 5; ++b) {
    const fs::path p = fs::path(dir) / ("data_batch_" + std::to_string(b) + ".bin");
    if (!fs::exists(p)) throw FormatError(p.string() + ": missing CIFAR-10 batch file");
    train.push_back(load_cifar10_batch(p.string()));
  }
  const fs::path t = fs::path(dir) / "test_batch.bin";
  if (!fs::exists(t)) throw FormatError(t.string() + ": missing CIFAR-10 batch file");
  return {concat(std::move(train)), load_cifar10_batch(t.string())};
}

// ---------------------------------------------------------------- container

void save_dataset(const Dataset& d, const std::string& path) {
  Container c;
  c.header = {{"kind", "dataset"}, {"class_count", d.class_count}};
  Tensor labels({d.labels.size()});
  for (std::size_t i = 0; i < d.labels.size(); ++i) labels[i] = static_cast<double>(d.labels[i]);
  c.tensors.push_back({"images", d.images});
  c.tensors.push_back({"labels", std::move(labels)});
  write_container(path, c);
}

Dataset load_dataset(const std::string& path) {
  Container c = read_container(path);
  if (c.header.value("kind", "") != "dataset" || c.tensors.size() != 2 || c.tensors[0].name != "images" ||
      c.tensors[1].name != "labels") {
    throw FormatError(path + ": container does not hold a dataset");
  }
  Dataset d;
  d.class_count = c.header.at("class_count").get<std::size_t>();
  d.images = std::move(c.tensors[0].tensor);
  for (double v : c.tensors[1].tensor.data()) {
    if (v < 0.0 || v != std::floor(v)) throw FormatError(path + ": non-integer label");
    d.labels.push_back(static_cast<std::size_t>(v));
  }
  validate(d);
  return d;
}

}  // namespace bnnlab
