#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace curvlab {

using Index = Eigen::Index;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowMajorMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised when matrix or vector shapes do not chain as required.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a symmetric positive-definite factorization breaks down.
/// Carries the smallest pivot seen by an LDLT of the offending matrix.
class FactorizationError : public std::runtime_error {
 public:
  FactorizationError(const std::string& what, double smallest_pivot)
      : std::runtime_error(what), smallest_pivot_(smallest_pivot) {}
  double smallest_pivot() const noexcept { return smallest_pivot_; }

 private:
  double smallest_pivot_;
};

/// Raised by the dense oracle when an instance is too large to assemble.
class SizeGuardError : public std::length_error {
 public:
  using std::length_error::length_error;
};

struct LayerShape {
  Index rows = 0;  // output width n_{k+1}
  Index cols = 0;  // input width n_k
  Index size() const { return rows * cols; }
  bool operator==(const LayerShape&) const = default;
};

/// Parameter vector layout: every layer matrix is stored row-major and the
/// layers are concatenated input-to-output. All Kronecker identities in this
/// library (curvature Σ_E ⊗ Σ_A, g = e ⊗ a) assume this ordering.
class FlatLayout {
 public:
  FlatLayout() = default;
  explicit FlatLayout(std::vector<LayerShape> shapes);

  std::size_t num_layers() const { return shapes_.size(); }
  Index size() const { return total_; }
  Index offset(std::size_t layer) const { return offsets_.at(layer); }
  const LayerShape& shape(std::size_t layer) const { return shapes_.at(layer); }
  const std::vector<LayerShape>& shapes() const { return shapes_; }

  Eigen::Map<RowMajorMat> block(Vec& flat, std::size_t layer) const;
  Eigen::Map<const RowMajorMat> block(const Vec& flat, std::size_t layer) const;

  Vec flatten(std::span<const Mat> layers) const;
  std::vector<Mat> unflatten(const Vec& flat) const;
  std::vector<Mat> zeros() const;

  bool operator==(const FlatLayout& other) const { return shapes_ == other.shapes_; }

 private:
  void check(const Vec& flat) const;

  std::vector<LayerShape> shapes_;
  std::vector<Index> offsets_;
  Index total_ = 0;
};

/// max |a - b| / max |b|; zero when both are zero.
double relative_deviation(const Eigen::Ref<const Mat>& actual, const Eigen::Ref<const Mat>& reference);

}  // namespace curvlab
