#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "advrob/error.hpp"
#include "advrob/network.hpp"
#include "advrob/rng.hpp"
#include "advrob/tensor.hpp"

namespace advrob {

enum class Split { Train, Test };

inline std::string_view to_string(Split s) { return s == Split::Train ? "train" : "test"; }

/// Images in [0,1] ([N, C, H, W]) with one label each.
template <std::floating_point Real>
struct Dataset {
  Tensor<Real> images;
  LabelBatch labels;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;
  std::string split;

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample() const { return sample_shape(images.shape()); }

  void validate() const {
    if (images.batch() != labels.size())
      throw ShapeError("dataset has " + std::to_string(images.batch()) + " images but " +
                       std::to_string(labels.size()) + " labels");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] >= num_classes) throw InvalidArgument("dataset label out of range at index " + std::to_string(i));
    for (std::size_t i = 0; i < images.size(); ++i)
      if (!(images[i] >= Real(0) && images[i] <= Real(1)))
        throw InvalidArgument("dataset pixel outside [0,1] at flat index " + std::to_string(i));
  }

  /// Samples [first, first + count).
  Dataset slice(std::size_t first, std::size_t count) const {
    Dataset d;
    d.images = images.slice_rows(first, count);
    d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(first),
                    labels.begin() + static_cast<std::ptrdiff_t>(first + count));
    d.num_classes = num_classes;
    d.class_names = class_names;
    d.split = split;
    return d;
  }
};

inline const std::vector<std::string>& cifar10_class_names() {
  static const std::vector<std::string> names = {"airplane", "automobile", "bird",  "cat",  "deer",
                                                 "dog",      "frog",       "horse", "ship", "truck"};
  return names;
}

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarPixels = 3072;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

/// One CIFAR-10 binary batch file: records of 1 label byte followed by
/// 3072 pixel bytes (R, G, B planes, each 32x32 row-major). Pixels map to
/// byte / 255.
template <std::floating_point Real>
Dataset<Real> load_cifar10_file(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw MissingFileError("CIFAR-10 file not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecordBytes != 0)
    throw TruncatedRecordError(path.string() + ": length " + std::to_string(bytes.size()) +
                               " is not a multiple of " + std::to_string(kCifarRecordBytes));
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset<Real> d;
  d.images = Tensor<Real>({n, 3, 32, 32});
  d.labels.resize(n);
  d.num_classes = 10;
  d.class_names = cifar10_class_names();
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] >= 10)
      throw BadLabelError(path.string() + ": record " + std::to_string(r) + " has label byte " +
                          std::to_string(rec[0]));
    d.labels[r] = rec[0];
    Real* px = d.images.data() + r * kCifarPixels;
    for (std::size_t j = 0; j < kCifarPixels; ++j) px[j] = static_cast<Real>(rec[1 + j]) / Real(255);
  }
  return d;
}

/// Loads a CIFAR-10 split. `path` may be a single batch file (loaded as
/// is) or the directory of the binary distribution, in which case the
/// standard file names are used and every file must hold 10000 records
/// (50000 train / 10000 test).
template <std::floating_point Real>
Dataset<Real> load_cifar10(const std::filesystem::path& path, Split split = Split::Test) {
  if (std::filesystem::is_regular_file(path)) {
    auto d = load_cifar10_file<Real>(path);
    d.split = std::string(to_string(split));
    return d;
  }
  if (!std::filesystem::is_directory(path)) throw MissingFileError("CIFAR-10 path not found: " + path.string());
  std::vector<std::filesystem::path> files;
  if (split == Split::Test) {
    files.push_back(path / "test_batch.bin");
  } else {
    for (int i = 1; i <= 5; ++i) files.push_back(path / ("data_batch_" + std::to_string(i) + ".bin"));
  }
  std::vector<Dataset<Real>> parts;
  std::size_t total = 0;
  for (const auto& f : files) {
    parts.push_back(load_cifar10_file<Real>(f));
    if (parts.back().size() != kCifarRecordsPerFile)
      throw FormatError(f.string() + ": expected " + std::to_string(kCifarRecordsPerFile) + " records, found " +
                        std::to_string(parts.back().size()));
    total += parts.back().size();
  }
  Dataset<Real> d;
  d.images = Tensor<Real>({total, 3, 32, 32});
  d.num_classes = 10;
  d.class_names = cifar10_class_names();
  d.split = std::string(to_string(split));
  std::size_t offset = 0;
  for (auto& p : parts) {
    std::copy(p.images.values().begin(), p.images.values().end(), d.images.data() + offset * kCifarPixels);
    d.labels.insert(d.labels.end(), p.labels.begin(), p.labels.end());
    offset += p.size();
  }
  return d;
}

/// Knobs of the synthetic image generator.
struct SyntheticOptions {
  double noise = 0.08;        // per-pixel Gaussian noise
  double amplitude = 0.45;    // max blob intensity deviation from mid-grey
  double blob_sigma = 0.25;   // blob width as a fraction of the image height
  std::size_t jitter = 1;     // max blob center shift in pixels
  std::size_t offset = 0;     // index of the first sample; disjoint offsets give disjoint samples
};

/// Deterministic class-separable images: every class owns a Gaussian blob
/// (center and per-channel color drawn from `seed`); samples jitter the
/// center, add pixel noise, clip to [0,1] and snap to the 8-bit grid.
/// Labels cycle 0..K-1 so class counts differ by at most one.
template <std::floating_point Real>
Dataset<Real> synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t num_classes, const Shape& shape,
                                const SyntheticOptions& opt = {}) {
  if (shape.size() != 3 || shape_volume(shape) == 0)
    throw ShapeError("synthetic images need a [C,H,W] shape, got " + shape_str(shape));
  if (num_classes == 0 || n < num_classes) throw InvalidArgument("synthetic dataset needs n >= num_classes >= 1");
  const std::size_t c = shape[0], h = shape[1], w = shape[2];

  struct Blob {
    double cy, cx;
    std::vector<double> color;
  };
  Rng class_rng(seed, 0x5EED);
  std::vector<Blob> blobs(num_classes);
  for (auto& b : blobs) {
    b.cy = class_rng.uniform(0.2, 0.8) * static_cast<double>(h - 1);
    b.cx = class_rng.uniform(0.2, 0.8) * static_cast<double>(w - 1);
    b.color.resize(c);
    for (auto& v : b.color) v = class_rng.uniform(-opt.amplitude, opt.amplitude);
  }
  const double sigma = std::max(0.5, opt.blob_sigma * static_cast<double>(h));

  Dataset<Real> d;
  d.images = Tensor<Real>(batched(n, shape));
  d.labels.resize(n);
  d.num_classes = num_classes;
  d.split = "synthetic";
  for (std::size_t k = 0; k < num_classes; ++k) d.class_names.push_back("class" + std::to_string(k));

  const auto jitter = static_cast<std::uint64_t>(opt.jitter);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t index = opt.offset + i;
    Rng rng(seed, 1, index);
    const std::size_t label = index % num_classes;
    d.labels[i] = label;
    const Blob& b = blobs[label];
    const double dy = static_cast<double>(rng.below(2 * jitter + 1)) - static_cast<double>(jitter);
    const double dx = static_cast<double>(rng.below(2 * jitter + 1)) - static_cast<double>(jitter);
    Real* px = d.images.data() + i * c * h * w;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double ry = static_cast<double>(y) - (b.cy + dy);
          const double rx = static_cast<double>(x) - (b.cx + dx);
          const double bump = std::exp(-(ry * ry + rx * rx) / (2.0 * sigma * sigma));
          double v = 0.5 + b.color[ch] * bump + opt.noise * rng.normal();
          v = std::clamp(v, 0.0, 1.0);
          px[(ch * h + y) * w + x] = static_cast<Real>(std::nearbyint(v * 255.0)) / Real(255);
        }
  }
  return d;
}

}  // namespace advrob
