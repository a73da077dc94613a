#include "curvlab/net.hpp"

#include "curvlab/random.hpp"

#include <cmath>
#include <string>

namespace curvlab {

std::string_view to_string(Activation a) { return a == Activation::kRelu ? "relu" : "tanh"; }

std::string_view to_string(LossKind l) {
  return l == LossKind::kCrossEntropy ? "cross_entropy" : "squared_error";
}

Targets Targets::from_classes(std::vector<int> classes) {
  Targets t;
  t.classes = std::move(classes);
  return t;
}

Targets Targets::from_values(Mat values) {
  Targets t;
  t.values = std::move(values);
  return t;
}

Index Targets::size() const {
  return is_classification() ? static_cast<Index>(classes.size()) : values.cols();
}

Targets Targets::select(std::span<const Index> columns) const {
  Targets out;
  if (is_classification()) {
    out.classes.reserve(columns.size());
    for (Index c : columns) out.classes.push_back(classes.at(static_cast<std::size_t>(c)));
  } else {
    out.values.resize(values.rows(), static_cast<Index>(columns.size()));
    for (std::size_t j = 0; j < columns.size(); ++j) out.values.col(static_cast<Index>(j)) = values.col(columns[j]);
  }
  return out;
}

Network::Network(std::vector<Mat> weights, Activation activation, LossKind loss)
    : weights_(std::move(weights)), activation_(activation), loss_(loss) {
  if (weights_.empty()) throw DimensionError("network needs at least one layer");
  std::vector<LayerShape> shapes;
  for (std::size_t k = 0; k < weights_.size(); ++k) {
    if (k > 0 && weights_[k].cols() != weights_[k - 1].rows()) {
      throw DimensionError("layer " + std::to_string(k) + " expects " + std::to_string(weights_[k].cols()) +
                           " inputs but layer " + std::to_string(k - 1) + " produces " +
                           std::to_string(weights_[k - 1].rows()));
    }
    shapes.push_back({weights_[k].rows(), weights_[k].cols()});
  }
  layout_ = FlatLayout(std::move(shapes));
}

Network Network::kaiming(std::span<const Index> layer_sizes, Activation activation, LossKind loss,
                         std::uint64_t seed) {
  if (layer_sizes.size() < 2) throw DimensionError("need input and output sizes");
  Rng rng(seed, 0x1417);
  std::vector<Mat> weights;
  for (std::size_t k = 0; k + 1 < layer_sizes.size(); ++k) {
    const Index fan_in = layer_sizes[k];
    const Index fan_out = layer_sizes[k + 1];
    if (fan_in <= 0 || fan_out <= 0) throw DimensionError("layer sizes must be positive");
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    Mat w(fan_out, fan_in);
    for (Index i = 0; i < fan_out; ++i)
      for (Index j = 0; j < fan_in; ++j) w(i, j) = stddev * rng.normal();
    weights.push_back(std::move(w));
  }
  return Network(std::move(weights), activation, loss);
}

void Network::apply_update(std::span<const Mat> delta, double scale) {
  if (delta.size() != weights_.size()) throw DimensionError("update has wrong number of layers");
  for (std::size_t k = 0; k < weights_.size(); ++k) {
    if (delta[k].rows() != weights_[k].rows() || delta[k].cols() != weights_[k].cols()) {
      throw DimensionError("update for layer " + std::to_string(k) + " has wrong shape");
    }
    weights_[k] += scale * delta[k];
  }
}

Network Network::with_update(std::span<const Mat> delta, double scale) const {
  Network copy = *this;
  copy.apply_update(delta, scale);
  return copy;
}

void Network::set_flat_weights(const Vec& flat) { weights_ = layout_.unflatten(flat); }

Mat activate(Activation a, const Mat& preacts) {
  if (a == Activation::kRelu) return preacts.cwiseMax(0.0);
  return preacts.array().tanh().matrix();
}

Mat activation_derivative(Activation a, const Mat& preacts) {
  if (a == Activation::kRelu) return (preacts.array() > 0.0).cast<double>().matrix();
  return (1.0 - preacts.array().tanh().square()).matrix();
}

Mat softmax(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Index j = 0; j < logits.cols(); ++j) {
    const double shift = logits.col(j).maxCoeff();
    out.col(j) = (logits.col(j).array() - shift).exp().matrix();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

BatchTrace forward(const Network& net, const Mat& inputs) {
  if (inputs.cols() < 1) throw DimensionError("forward: batch must have at least one column");
  if (inputs.rows() != net.input_dim()) {
    throw DimensionError("forward: layer 0 expects " + std::to_string(net.input_dim()) + " input rows, got " +
                         std::to_string(inputs.rows()));
  }
  BatchTrace trace;
  const std::size_t L = net.num_layers();
  trace.inputs.reserve(L);
  trace.preacts.reserve(L);
  trace.inputs.push_back(inputs);
  for (std::size_t k = 0; k < L; ++k) {
    trace.preacts.push_back(net.weight(k) * trace.inputs[k]);
    if (k + 1 < L) trace.inputs.push_back(activate(net.activation(), trace.preacts[k]));
  }
  return trace;
}

std::vector<Mat> backpropagate(const Network& net, const BatchTrace& trace, Mat output_error) {
  const std::size_t L = net.num_layers();
  if (trace.preacts.size() != L) throw DimensionError("backpropagate: trace does not match network depth");
  if (output_error.rows() != net.output_dim() || output_error.cols() != trace.outputs().cols()) {
    throw DimensionError("backpropagate: output error has wrong shape");
  }
  std::vector<Mat> errors(L);
  errors[L - 1] = std::move(output_error);
  for (std::size_t k = L - 1; k > 0; --k) {
    errors[k - 1] = (net.weight(k).transpose() * errors[k])
                        .cwiseProduct(activation_derivative(net.activation(), trace.preacts[k - 1]));
  }
  return errors;
}

namespace {

void check_targets(const Network& net, const Mat& outputs, const Targets& targets) {
  if (targets.size() != outputs.cols()) {
    throw DimensionError("targets have " + std::to_string(targets.size()) + " columns, batch has " +
                         std::to_string(outputs.cols()));
  }
  if (net.loss_kind() == LossKind::kCrossEntropy) {
    if (!targets.is_classification()) throw DimensionError("cross-entropy loss needs class targets");
    for (int c : targets.classes) {
      if (c < 0 || c >= outputs.rows()) throw DimensionError("class index " + std::to_string(c) + " out of range");
    }
  } else if (targets.values.rows() != outputs.rows()) {
    throw DimensionError("squared-error targets have wrong row count");
  }
}

// Per-datapoint derivative of the loss w.r.t. the outputs (no 1/D factor).
Mat output_residual(LossKind loss, const Mat& outputs, const Targets& targets) {
  if (loss == LossKind::kCrossEntropy) {
    Mat r = softmax(outputs);
    for (Index j = 0; j < r.cols(); ++j) r(targets.classes[static_cast<std::size_t>(j)], j) -= 1.0;
    return r;
  }
  return outputs - targets.values;
}

}  // namespace

std::vector<Mat> layer_gradients(const BatchTrace& trace) {
  std::vector<Mat> grads;
  grads.reserve(trace.errors.size());
  for (std::size_t k = 0; k < trace.errors.size(); ++k) grads.push_back(trace.errors[k] * trace.inputs[k].transpose());
  return grads;
}

std::vector<Mat> backward(const Network& net, BatchTrace& trace, const Targets& targets) {
  check_targets(net, trace.outputs(), targets);
  const double inv_d = 1.0 / static_cast<double>(trace.batch_size());
  trace.errors = backpropagate(net, trace, inv_d * output_residual(net.loss_kind(), trace.outputs(), targets));
  return layer_gradients(trace);
}

LabelSample sample_labels(const Mat& outputs, LossKind loss, std::uint64_t seed) {
  Rng rng(seed, 0x5A3);
  LabelSample sample;
  sample.seed = seed;
  if (loss == LossKind::kCrossEntropy) {
    const Mat probs = softmax(outputs);
    std::vector<int> labels(static_cast<std::size_t>(outputs.cols()));
    for (Index j = 0; j < probs.cols(); ++j) {
      const double u = rng.uniform();
      double acc = 0.0;
      int chosen = static_cast<int>(probs.rows()) - 1;
      for (Index c = 0; c < probs.rows(); ++c) {
        acc += probs(c, j);
        if (u < acc) {
          chosen = static_cast<int>(c);
          break;
        }
      }
      labels[static_cast<std::size_t>(j)] = chosen;
    }
    sample.labels = Targets::from_classes(std::move(labels));
  } else {
    Mat values(outputs.rows(), outputs.cols());
    for (Index j = 0; j < values.cols(); ++j)
      for (Index i = 0; i < values.rows(); ++i) values(i, j) = outputs(i, j) + rng.normal();
    sample.labels = Targets::from_values(std::move(values));
  }
  return sample;
}

void backward_sampled(const Network& net, BatchTrace& trace, const LabelSample& sample) {
  check_targets(net, trace.outputs(), sample.labels);
  trace.sampled_errors = backpropagate(net, trace, output_residual(net.loss_kind(), trace.outputs(), sample.labels));
  trace.col_weights = Vec::Constant(trace.batch_size(), 1.0 / std::sqrt(static_cast<double>(trace.batch_size())));
}

double loss_from_outputs(LossKind loss, const Mat& outputs, const Targets& targets) {
  if (targets.size() != outputs.cols()) throw DimensionError("loss: target count does not match batch");
  const auto d = static_cast<double>(outputs.cols());
  double total = 0.0;
  if (loss == LossKind::kCrossEntropy) {
    for (Index j = 0; j < outputs.cols(); ++j) {
      const double shift = outputs.col(j).maxCoeff();
      const double lse = shift + std::log((outputs.col(j).array() - shift).exp().sum());
      total += lse - outputs(targets.classes[static_cast<std::size_t>(j)], j);
    }
  } else {
    total = 0.5 * (outputs - targets.values).squaredNorm();
  }
  return total / d;
}

double loss(const Network& net, const Mat& inputs, const Targets& targets) {
  return loss_from_outputs(net.loss_kind(), forward(net, inputs).outputs(), targets);
}

double accuracy(const Mat& outputs, const Targets& targets) {
  if (!targets.is_classification() || outputs.cols() == 0) return 0.0;
  Index correct = 0;
  for (Index j = 0; j < outputs.cols(); ++j) {
    Index arg = 0;
    outputs.col(j).maxCoeff(&arg);
    if (arg == targets.classes[static_cast<std::size_t>(j)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(outputs.cols());
}

}  // namespace curvlab
