#pragma once

#include "curvlab/types.hpp"

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace curvlab {

enum class Activation { kRelu, kTanh };
enum class LossKind { kCrossEntropy, kSquaredError };

std::string_view to_string(Activation a);
std::string_view to_string(LossKind l);

/// Supervised (or sampled) targets for one batch. Cross-entropy uses class
/// indices; squared error uses an n_out × D value matrix.
struct Targets {
  std::vector<int> classes;
  Mat values;

  static Targets from_classes(std::vector<int> classes);
  static Targets from_values(Mat values);

  bool is_classification() const { return values.size() == 0; }
  Index size() const;
  Targets select(std::span<const Index> columns) const;
};

/// Fully-connected network without biases: S^(k+1) = W^(k) A^(k),
/// A^(k+1) = σ(S^(k+1)) for hidden layers; the last S is the output.
class Network {
 public:
  Network(std::vector<Mat> weights, Activation activation, LossKind loss);

  /// Kaiming-He normal initialisation, std = sqrt(2 / fan_in).
  static Network kaiming(std::span<const Index> layer_sizes, Activation activation, LossKind loss,
                         std::uint64_t seed);

  std::size_t num_layers() const { return weights_.size(); }
  Index input_dim() const { return weights_.front().cols(); }
  Index output_dim() const { return weights_.back().rows(); }
  Index num_params() const { return layout_.size(); }
  const FlatLayout& layout() const { return layout_; }

  const Mat& weight(std::size_t k) const { return weights_.at(k); }
  const std::vector<Mat>& weights() const { return weights_; }
  Activation activation() const { return activation_; }
  LossKind loss_kind() const { return loss_; }

  /// W^(k) += scale · delta^(k) for every layer.
  void apply_update(std::span<const Mat> delta, double scale = 1.0);
  Network with_update(std::span<const Mat> delta, double scale = 1.0) const;

  Vec flat_weights() const { return layout_.flatten(weights_); }
  void set_flat_weights(const Vec& flat);

 private:
  std::vector<Mat> weights_;
  Activation activation_;
  LossKind loss_;
  FlatLayout layout_;
};

/// Per-layer quantities of one forward/backward pass over D columns.
/// Index k refers to weight layer k: inputs[k] = A^(k) (n_k × D),
/// preacts[k] = W^(k) A^(k), errors[k] = ∂L/∂preacts[k].
struct BatchTrace {
  std::vector<Mat> inputs;
  std::vector<Mat> preacts;
  /// Derivatives of the mean batch loss, so grad_k = errors[k] · inputs[k]ᵀ.
  std::vector<Mat> errors;
  /// Per-datapoint derivatives of -log p(ỹ|x) with ỹ sampled from the model.
  /// Unscaled; col_weights carries the Fisher column scale.
  std::vector<Mat> sampled_errors;
  Vec col_weights;

  Index batch_size() const { return inputs.empty() ? 0 : inputs.front().cols(); }
  const Mat& outputs() const { return preacts.back(); }
};

struct LabelSample {
  Targets labels;
  std::uint64_t seed = 0;
};

Mat activate(Activation a, const Mat& preacts);
Mat activation_derivative(Activation a, const Mat& preacts);
Mat softmax(const Mat& logits);

BatchTrace forward(const Network& net, const Mat& inputs);

/// Fills trace.errors and returns per-layer gradients of the mean loss.
std::vector<Mat> backward(const Network& net, BatchTrace& trace, const Targets& targets);

/// Backpropagates an output-layer error matrix through the network.
/// Result[k] is the error at the output of weight layer k.
std::vector<Mat> backpropagate(const Network& net, const BatchTrace& trace, Mat output_error);

std::vector<Mat> layer_gradients(const BatchTrace& trace);

LabelSample sample_labels(const Mat& outputs, LossKind loss, std::uint64_t seed);

/// Fills trace.sampled_errors and sets col_weights to 1/sqrt(D).
void backward_sampled(const Network& net, BatchTrace& trace, const LabelSample& sample);

/// Mean loss over the columns: cross-entropy via shifted log-sum-exp, or
/// (1/D) Σ ½‖s - y‖² for squared error.
double loss_from_outputs(LossKind loss, const Mat& outputs, const Targets& targets);
double loss(const Network& net, const Mat& inputs, const Targets& targets);
double accuracy(const Mat& outputs, const Targets& targets);

}  // namespace curvlab
