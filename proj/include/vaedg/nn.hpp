#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vaedg/rng.hpp"
#include "vaedg/tensor.hpp"

namespace vaedg {

/// Which sub-network a trainable belongs to: the inference model (encoder),
/// the generative model (decoder) or the classifier head.
enum class ParamGroup { encoder, decoder, head };

const char* to_string(ParamGroup g);

template <typename T>
struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor<T> value;
};

/// Named trainables in registration order. Names are unique and shapes are
/// fixed once registered.
template <typename T>
class ParameterSet {
 public:
  std::size_t add(std::string name, ParamGroup group, std::vector<int> shape);

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t scalar_count() const;
  std::size_t scalar_count(ParamGroup g) const;

  /// Same names, groups and shapes, all values zero.
  ParameterSet zeros_like() const;
  void zero();
  bool same_layout(const ParameterSet& other) const;

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : params_) {
      const auto i = out.add(p.name, p.group, p.value.shape);
      out[i].value = p.value.template cast<U>();
    }
    return out;
  }

  bool operator==(const ParameterSet& other) const;

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Fills a parameter with U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
void init_uniform_fan_in(Tensor<T>& t, int fan_in, Rng& rng);

/// Fully connected layer, y = x W^T + b with W of shape [out, in].
template <typename T>
struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;
  int in = 0;
  int out = 0;

  static Linear create(ParameterSet<T>& params, const std::string& name, ParamGroup group, int in, int out);
  void init(ParameterSet<T>& params, Rng& rng) const;

  void forward(const ParameterSet<T>& params, const T* x, int batch, T* y) const;
  /// Accumulates weight/bias gradients into grads; writes dx when non-null.
  void backward(const ParameterSet<T>& params, ParameterSet<T>& grads, const T* x, const T* dy, int batch,
                T* dx) const;
};

/// Shared geometry for the strided convolutions; output side = (in + 2p - k)/s + 1.
struct ConvGeometry {
  int kernel = 4;
  int stride = 2;
  int pad = 1;
  int out_side(int in_side) const { return (in_side + 2 * pad - kernel) / stride + 1; }
  int transposed_out_side(int in_side) const { return (in_side - 1) * stride - 2 * pad + kernel; }
};

/// 2-D convolution over [B, Cin, H, W] with weight [Cout, Cin*k*k].
template <typename T>
struct Conv2d {
  std::size_t weight = 0;
  std::size_t bias = 0;
  int cin = 0;
  int cout = 0;
  ConvGeometry geom;

  static Conv2d create(ParameterSet<T>& params, const std::string& name, ParamGroup group, int cin, int cout,
                       ConvGeometry geom);
  void init(ParameterSet<T>& params, Rng& rng) const;

  /// cols receives the [Cin*k*k, B*Ho*Wo] patch matrix needed by backward.
  Tensor<T> forward(const ParameterSet<T>& params, const Tensor<T>& x, Tensor<T>& cols) const;
  /// Returns dx (shape in_shape) or an empty tensor when need_dx is false.
  Tensor<T> backward(const ParameterSet<T>& params, ParameterSet<T>& grads, const std::vector<int>& in_shape,
                     const Tensor<T>& cols, const Tensor<T>& dy, bool need_dx) const;
};

/// Transposed convolution (adjoint of Conv2d) with weight [Cin, Cout*k*k].
template <typename T>
struct ConvTranspose2d {
  std::size_t weight = 0;
  std::size_t bias = 0;
  int cin = 0;
  int cout = 0;
  ConvGeometry geom;

  static ConvTranspose2d create(ParameterSet<T>& params, const std::string& name, ParamGroup group, int cin,
                                int cout, ConvGeometry geom);
  void init(ParameterSet<T>& params, Rng& rng) const;

  /// x_mat receives the input rearranged as [Cin, B*H*W] for backward.
  Tensor<T> forward(const ParameterSet<T>& params, const Tensor<T>& x, Tensor<T>& x_mat) const;
  Tensor<T> backward(const ParameterSet<T>& params, ParameterSet<T>& grads, const std::vector<int>& in_shape,
                     const Tensor<T>& x_mat, const Tensor<T>& dy, bool need_dx) const;
};

template <typename T>
void relu_inplace(Tensor<T>& t);
/// dy *= (activation > 0), where activation is the ReLU output.
template <typename T>
void relu_backward_inplace(const Tensor<T>& activation, Tensor<T>& dy);
template <typename T>
void sigmoid_inplace(Tensor<T>& t);
/// dy *= s(1 - s), where s is the sigmoid output.
template <typename T>
void sigmoid_backward_inplace(const Tensor<T>& activation, Tensor<T>& dy);

}  // namespace vaedg
