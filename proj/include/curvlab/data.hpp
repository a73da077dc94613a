#pragma once

#include "curvlab/net.hpp"
#include "curvlab/types.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace curvlab {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs are stored column-per-example (features × N).
struct Dataset {
  std::string name;
  Mat inputs;
  Targets targets;
  Index num_classes = 0;  // 0 for regression targets
  double norm_mean = 0.0;
  double norm_std = 1.0;
  Index image_rows = 0;
  Index image_cols = 0;

  Index size() const { return inputs.cols(); }
  Index input_dim() const { return inputs.rows(); }
  Dataset select(std::span<const Index> columns) const;
};

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Files ending in ".gz" are decompressed transparently. Pixels are scaled
/// to [0, 1]; each image becomes one column.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Scalar mean / std over every input entry.
std::pair<double, double> normalization_constants(const Dataset& ds);
/// (x - mean) / std elementwise.
Dataset normalize(const Dataset& ds, double mean, double std);

/// k distinct examples drawn without replacement.
Dataset subset(const Dataset& ds, Index k, std::uint64_t seed);
/// Splits off k random examples; returns {chosen, remainder}.
std::pair<Dataset, Dataset> split(const Dataset& ds, Index k, std::uint64_t seed);

/// Average-pools square images by `factor` in each direction.
Dataset pool_images(const Dataset& ds, Index factor);

/// Per-epoch batch index lists. Each epoch is reshuffled with a seed derived
/// from (seed, epoch); the last short batch is kept.
class Batcher {
 public:
  Batcher(Index dataset_size, Index batch_size, std::uint64_t seed, bool shuffle = true);

  std::vector<std::vector<Index>> epoch(std::int64_t epoch_index) const;
  Index batches_per_epoch() const;
  Index batch_size() const { return batch_size_; }

 private:
  Index n_;
  Index batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
};

std::vector<Index> permutation(Index n, std::uint64_t seed);

/// Two-point linear regression: inputs (3,1), (1,0), labels 1, -1.
Dataset synth_toy();
/// Zero 1×2 weights, squared error, the model paired with synth_toy.
Network synth_toy_network();

/// Gaussian inputs labelled by a random teacher network (test fixture).
Dataset synth_teacher(Index n, Index input_dim, Index classes, std::uint64_t seed);

}  // namespace curvlab
