#include "curvlab/types.hpp"

#include <limits>
#include <string>

namespace curvlab {

FlatLayout::FlatLayout(std::vector<LayerShape> shapes) : shapes_(std::move(shapes)) {
  offsets_.reserve(shapes_.size());
  for (const auto& s : shapes_) {
    offsets_.push_back(total_);
    total_ += s.size();
  }
}

void FlatLayout::check(const Vec& flat) const {
  if (flat.size() != total_) {
    throw DimensionError("flat vector has length " + std::to_string(flat.size()) + ", layout expects " +
                         std::to_string(total_));
  }
}

Eigen::Map<RowMajorMat> FlatLayout::block(Vec& flat, std::size_t layer) const {
  check(flat);
  const auto& s = shapes_.at(layer);
  return {flat.data() + offsets_[layer], s.rows, s.cols};
}

Eigen::Map<const RowMajorMat> FlatLayout::block(const Vec& flat, std::size_t layer) const {
  check(flat);
  const auto& s = shapes_.at(layer);
  return {flat.data() + offsets_[layer], s.rows, s.cols};
}

Vec FlatLayout::flatten(std::span<const Mat> layers) const {
  if (layers.size() != shapes_.size()) {
    throw DimensionError("flatten: got " + std::to_string(layers.size()) + " layers, layout has " +
                         std::to_string(shapes_.size()));
  }
  Vec flat(total_);
  for (std::size_t k = 0; k < shapes_.size(); ++k) {
    if (layers[k].rows() != shapes_[k].rows || layers[k].cols() != shapes_[k].cols) {
      throw DimensionError("flatten: layer " + std::to_string(k) + " has shape " +
                           std::to_string(layers[k].rows()) + "x" + std::to_string(layers[k].cols()));
    }
    block(flat, k) = layers[k];
  }
  return flat;
}

std::vector<Mat> FlatLayout::unflatten(const Vec& flat) const {
  std::vector<Mat> out;
  out.reserve(shapes_.size());
  for (std::size_t k = 0; k < shapes_.size(); ++k) out.emplace_back(block(flat, k));
  return out;
}

std::vector<Mat> FlatLayout::zeros() const {
  std::vector<Mat> out;
  for (const auto& s : shapes_) out.push_back(Mat::Zero(s.rows, s.cols));
  return out;
}

double relative_deviation(const Eigen::Ref<const Mat>& actual, const Eigen::Ref<const Mat>& reference) {
  if (actual.rows() != reference.rows() || actual.cols() != reference.cols()) {
    throw DimensionError("relative_deviation: shape mismatch");
  }
  const double diff = actual.size() == 0 ? 0.0 : (actual - reference).cwiseAbs().maxCoeff();
  const double scale = reference.size() == 0 ? 0.0 : reference.cwiseAbs().maxCoeff();
  if (diff == 0.0) return 0.0;
  if (scale == 0.0) return std::numeric_limits<double>::infinity();
  return diff / scale;
}

}  // namespace curvlab
