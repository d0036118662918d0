#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdl/tensor.hpp"

namespace cdl::data {

struct Dataset {
  int rows = 28, cols = 28, classes = 10;
  std::int64_t count = 0;
  std::vector<float> images;  // count * rows * cols, in [0,1]
  std::vector<std::uint8_t> labels;

  net::Shape sample_shape() const { return {1, rows, cols}; }
  void fill_sample(std::int64_t i, net::Tensor& out) const;
};

// Standard IDX binary files (train-images-idx3-ubyte etc.), uncompressed.
// limit > 0 keeps only the first `limit` samples.
Dataset load_mnist_idx(const std::string& dir, bool train, std::int64_t limit = 0);

// Deterministic Gaussian-blob clusters: each class is a fixed arrangement of
// soft blobs with per-sample position jitter and pixel noise. Hermetic
// stand-in for image data in CI.
Dataset make_synthetic(std::int64_t count, int classes, std::uint64_t seed, bool train_split);

struct DatasetPair {
  Dataset train, test;
  std::string description;
};

// Accepts "synthetic[:train=N,test=N,classes=C,seed=S]" or "mnist[:dir]"
// (mnist dir defaults to $CDL_DATA_DIR). train/test limits apply to mnist too
// via train=/test= keys.
DatasetPair load_dataset(const std::string& spec);

}  // namespace cdl::data
