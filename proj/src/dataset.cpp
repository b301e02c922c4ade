#include "polynext/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace polynext {

namespace {
constexpr int64_t kCifarRes = 32;
constexpr int64_t kCifarRecord = 1 + 3 * kCifarRes * kCifarRes;
}  // namespace

void DatasetSource::compute_stats() {
  check(size() > 0, "dataset: cannot compute statistics of an empty source");
  int64_t plane = resolution * resolution;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int64_t i = 0; i < size(); ++i) {
      const uint8_t* base = pixels.data() + i * pixels_per_image() + c * plane;
      for (int64_t p = 0; p < plane; ++p) {
        double v = base[p] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    double n = static_cast<double>(size() * plane);
    double mean = sum / n;
    double var = sq / n - mean * mean;
    channel_mean[static_cast<size_t>(c)] = mean;
    channel_std[static_cast<size_t>(c)] = std::sqrt(std::max(var, 1e-12));
  }
}

void DatasetSource::use_stats_of(const DatasetSource& train) {
  channel_mean = train.channel_mean;
  channel_std = train.channel_std;
}

DatasetSource DatasetSource::slice(int64_t start, int64_t count) const {
  check(start >= 0 && count >= 0 && start + count <= size(),
        "dataset: slice [" + std::to_string(start) + "," + std::to_string(start + count) + ") out of range for " +
            std::to_string(size()) + " records");
  DatasetSource out = *this;
  out.labels.assign(labels.begin() + start, labels.begin() + start + count);
  out.pixels.assign(pixels.begin() + start * pixels_per_image(),
                    pixels.begin() + (start + count) * pixels_per_image());
  return out;
}

DatasetSource load_cifar10_files(const std::vector<std::string>& files) {
  check(!files.empty(), "cifar10: no files to load");
  DatasetSource src;
  src.kind = DatasetSource::Kind::kCifar10;
  src.classes = 10;
  src.resolution = kCifarRes;
  for (const std::string& path : files) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "cifar10: cannot open '" + path + "'");
    in.seekg(0, std::ios::end);
    int64_t bytes = static_cast<int64_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    check(bytes > 0 && bytes % kCifarRecord == 0,
          "cifar10: '" + path + "' has " + std::to_string(bytes) + " bytes, not a multiple of " +
              std::to_string(kCifarRecord));
    int64_t records = bytes / kCifarRecord;
    std::vector<uint8_t> buf(static_cast<size_t>(bytes));
    in.read(reinterpret_cast<char*>(buf.data()), bytes);
    check(in.gcount() == bytes, "cifar10: short read on '" + path + "'");
    for (int64_t r = 0; r < records; ++r) {
      const uint8_t* rec = buf.data() + r * kCifarRecord;
      check(rec[0] < 10, "cifar10: record " + std::to_string(r) + " in '" + path + "' has label " +
                             std::to_string(int(rec[0])) + " >= 10");
      src.labels.push_back(rec[0]);
      src.pixels.insert(src.pixels.end(), rec + 1, rec + kCifarRecord);
    }
  }
  src.compute_stats();
  return src;
}

DatasetSource load_cifar10(const std::string& path) {
  namespace fs = std::filesystem;
  if (fs::is_directory(path)) {
    std::vector<std::string> files;
    for (int i = 1; i <= 5; ++i) {
      std::string f = path + "/data_batch_" + std::to_string(i) + ".bin";
      if (fs::exists(f)) files.push_back(f);
    }
    check(!files.empty(), "cifar10: no data_batch_*.bin files under '" + path + "'");
    return load_cifar10_files(files);
  }
  return load_cifar10_files({path});
}

void write_cifar10_file(const DatasetSource& src, const std::string& path, int64_t start, int64_t count) {
  check(src.resolution == kCifarRes, "cifar10: writes require 32x32 sources");
  check(start >= 0 && start + count <= src.size(), "cifar10: write range out of bounds");
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "cifar10: cannot open '" + path + "' for writing");
  for (int64_t i = start; i < start + count; ++i) {
    uint8_t label = src.labels[static_cast<size_t>(i)];
    out.write(reinterpret_cast<const char*>(&label), 1);
    out.write(reinterpret_cast<const char*>(src.pixels.data() + i * src.pixels_per_image()),
              src.pixels_per_image());
  }
  check(out.good(), "cifar10: write to '" + path + "' failed");
}

DatasetSource synthetic_dataset(uint64_t seed, int64_t classes, int64_t resolution, int64_t n) {
  check(classes >= 2 && classes <= 256, "synthetic: classes must be in [2,256]");
  check(resolution >= 4, "synthetic: resolution must be >= 4");
  DatasetSource src;
  src.kind = DatasetSource::Kind::kSynthetic;
  src.classes = classes;
  src.resolution = resolution;
  int64_t plane = resolution * resolution;

  // Per-class template: a few smooth bumps at class-specific locations.
  Rng proto_rng(seed);
  std::vector<std::vector<double>> templates(static_cast<size_t>(classes));
  for (int64_t k = 0; k < classes; ++k) {
    Rng crng = proto_rng.fork(static_cast<uint64_t>(k) + 1);
    std::vector<double>& tmpl = templates[static_cast<size_t>(k)];
    tmpl.assign(static_cast<size_t>(3 * plane), 0.45);
    for (int bump = 0; bump < 3; ++bump) {
      double cy = crng.uniform(0.15, 0.85) * resolution;
      double cx = crng.uniform(0.15, 0.85) * resolution;
      double sigma = crng.uniform(0.10, 0.22) * resolution;
      int ch = static_cast<int>(crng.below(3));
      double amp = crng.uniform(0.35, 0.5) * (crng.bernoulli(0.5) ? 1.0 : -1.0);
      for (int64_t y = 0; y < resolution; ++y) {
        for (int64_t x = 0; x < resolution; ++x) {
          double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          tmpl[static_cast<size_t>(ch * plane + y * resolution + x)] +=
              amp * std::exp(-d2 / (2 * sigma * sigma));
        }
      }
    }
  }

  Rng sample_rng = proto_rng.fork(0xDA7A);
  src.labels.reserve(static_cast<size_t>(n));
  src.pixels.reserve(static_cast<size_t>(n * 3 * plane));
  for (int64_t i = 0; i < n; ++i) {
    int64_t k = i % classes;
    src.labels.push_back(static_cast<uint8_t>(k));
    const std::vector<double>& tmpl = templates[static_cast<size_t>(k)];
    for (int64_t p = 0; p < 3 * plane; ++p) {
      double v = tmpl[static_cast<size_t>(p)] + 0.06 * sample_rng.normal();
      v = std::min(1.0, std::max(0.0, v));
      src.pixels.push_back(static_cast<uint8_t>(std::lround(v * 255.0)));
    }
  }
  if (n > 0) src.compute_stats();
  return src;
}

Tensor make_batch(const DatasetSource& src, const std::vector<int64_t>& indices, bool augment, Rng* rng) {
  check(!indices.empty(), "dataset: empty batch");
  int64_t res = src.resolution;
  int64_t plane = res * res;
  Tensor batch({static_cast<int64_t>(indices.size()), 3, res, res});
  const int64_t pad = 4;
  for (size_t bi = 0; bi < indices.size(); ++bi) {
    int64_t i = indices[bi];
    check(i >= 0 && i < src.size(), "dataset: index out of range");
    bool flip = false;
    int64_t dy = 0, dx = 0;
    if (augment) {
      check(rng != nullptr, "dataset: augmentation needs an rng");
      flip = src.allow_flip && rng->bernoulli(0.5);
      dy = rng->below(2 * pad + 1) - pad;
      dx = rng->below(2 * pad + 1) - pad;
    }
    for (int64_t c = 0; c < 3; ++c) {
      const uint8_t* base = src.pixels.data() + i * src.pixels_per_image() + c * plane;
      double mean = src.channel_mean[static_cast<size_t>(c)];
      double stddev = src.channel_std[static_cast<size_t>(c)];
      double* out = batch.data() + (static_cast<int64_t>(bi) * 3 + c) * plane;
      for (int64_t y = 0; y < res; ++y) {
        for (int64_t x = 0; x < res; ++x) {
          int64_t sy = y + dy;
          int64_t sx = x + dx;
          double v = 0.0;  // pad-and-crop reads zeros outside the padded frame
          if (sy >= 0 && sy < res && sx >= 0 && sx < res) {
            int64_t col = flip ? (res - 1 - sx) : sx;
            v = base[sy * res + col] / 255.0;
          }
          out[y * res + x] = (v - mean) / stddev;
        }
      }
    }
  }
  return batch;
}

std::vector<int> batch_labels(const DatasetSource& src, const std::vector<int64_t>& indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int64_t i : indices) out.push_back(src.labels[static_cast<size_t>(i)]);
  return out;
}

}  // namespace polynext
