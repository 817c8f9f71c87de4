#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "rime/numcore/ops.hpp"
#include "rime/numcore/rng.hpp"

namespace rime {

enum class Activation { kTanh, kRelu, kSoftplus };
enum class OutputHead { kLinear, kGaussian };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
    case Activation::kSoftplus: return "softplus";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  if (s == "softplus") return Activation::kSoftplus;
  throw ConfigError("unknown activation '" + s + "'");
}

/// Floor added to every variance produced by a gaussian head.
inline constexpr double kVarianceFloor = 1e-4;

struct MlpSpec {
  int input_dim = 1;
  std::vector<int> hidden_dims;
  int output_dim = 1;
  Activation activation = Activation::kTanh;
  OutputHead head = OutputHead::kLinear;

  /// Width of the final layer (2 x output_dim for a gaussian head).
  int raw_output_dim() const { return head == OutputHead::kGaussian ? 2 * output_dim : output_dim; }

  void validate() const {
    if (input_dim < 1 || output_dim < 1) throw ConfigError("MlpSpec: input and output dims must be >= 1");
    for (int h : hidden_dims) {
      if (h < 1) throw ConfigError("MlpSpec: hidden dims must be >= 1");
    }
  }
};

/// Mean and variance tensors emitted by a gaussian head.
struct GaussianTensors {
  Tensor mean;
  Tensor var;
};

inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::kTanh: return ops::tanh(x);
    case Activation::kRelu: return ops::relu(x);
    case Activation::kSoftplus: return ops::softplus(x);
  }
  return x;
}

/// Splits raw head output [mean | raw_var] and maps the second half to
/// softplus(raw) + kVarianceFloor.
inline GaussianTensors split_gaussian(const Tensor& raw, int dim) {
  if (raw.cols() != 2 * dim) throw ConfigError("split_gaussian: expected " + std::to_string(2 * dim) + " columns");
  Tensor mean = ops::slice_cols(raw, 0, dim);
  Tensor var = ops::add_scalar(ops::softplus(ops::slice_cols(raw, dim, dim)), kVarianceFloor);
  return {std::move(mean), std::move(var)};
}

/// Fully connected network: hidden layers use the spec's activation, the last
/// layer is affine.
class Mlp {
 public:
  Mlp() = default;

  /// Glorot-uniform weights, zero biases.
  Mlp(MlpSpec spec, Rng& rng) : spec_(std::move(spec)) {
    spec_.validate();
    int in = spec_.input_dim;
    std::vector<int> outs = spec_.hidden_dims;
    outs.push_back(spec_.raw_output_dim());
    for (int out : outs) {
      const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
      Matrix w(in, out);
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-limit, limit);
      weights_.push_back(Tensor::parameter(std::move(w)));
      biases_.push_back(Tensor::parameter(Matrix::Zero(1, out)));
      in = out;
    }
  }

  const MlpSpec& spec() const { return spec_; }

  Tensor forward(const Tensor& input) const {
    if (input.cols() != spec_.input_dim) {
      throw ConfigError("Mlp::forward: input has " + std::to_string(input.cols()) + " columns, expected " +
                        std::to_string(spec_.input_dim));
    }
    Tensor h = input;
    for (std::size_t layer = 0; layer < weights_.size(); ++layer) {
      h = ops::linear(h, weights_[layer], biases_[layer]);
      if (layer + 1 < weights_.size()) h = activate(h, spec_.activation);
    }
    return h;
  }

  GaussianTensors forward_gaussian(const Tensor& input) const {
    if (spec_.head != OutputHead::kGaussian) throw ConfigError("forward_gaussian on a linear-head MLP");
    return split_gaussian(forward(input), spec_.output_dim);
  }

  /// Parameters in layer order: w0, b0, w1, b1, ...
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      out.push_back(weights_[i]);
      out.push_back(biases_[i]);
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      out.emplace_back(prefix + ".w" + std::to_string(i), weights_[i]);
      out.emplace_back(prefix + ".b" + std::to_string(i), biases_[i]);
    }
    return out;
  }

  std::size_t layers() const { return weights_.size(); }
  Tensor& weight(std::size_t i) { return weights_.at(i); }
  Tensor& bias(std::size_t i) { return biases_.at(i); }
  const Tensor& weight(std::size_t i) const { return weights_.at(i); }
  const Tensor& bias(std::size_t i) const { return biases_.at(i); }

  void zero_parameters() {
    for (auto& w : weights_) w.mutable_value().setZero();
    for (auto& b : biases_) b.mutable_value().setZero();
  }

  /// Fresh parameter leaves with the same values (no aliasing with *this).
  Mlp clone() const {
    Mlp copy;
    copy.spec_ = spec_;
    for (const auto& w : weights_) copy.weights_.push_back(Tensor::parameter(w.value()));
    for (const auto& b : biases_) copy.biases_.push_back(Tensor::parameter(b.value()));
    return copy;
  }

 private:
  MlpSpec spec_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

}  // namespace rime
