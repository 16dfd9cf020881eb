#include "vaedg/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace vaedg {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

// Copies the k*k patches of one [C, H, W] image into columns
// [col_offset, col_offset + Ho*Wo) of a row-major [C*k*k, total_cols] matrix.
template <typename T>
void im2col(const T* img, int channels, int side, const ConvGeometry& g, int out_side, T* cols,
            std::size_t total_cols, std::size_t col_offset) {
  const int k = g.kernel;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + (std::size_t(c) * k * k + ky * k + kx) * total_cols + col_offset;
        for (int oy = 0; oy < out_side; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int ox = 0; ox < out_side; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            const bool inside = iy >= 0 && iy < side && ix >= 0 && ix < side;
            row[oy * out_side + ox] = inside ? img[(std::size_t(c) * side + iy) * side + ix] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds the columns back into a [C, H, W] image.
template <typename T>
void col2im(const T* cols, int channels, int side, const ConvGeometry& g, int out_side, T* img,
            std::size_t total_cols, std::size_t col_offset) {
  const int k = g.kernel;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + (std::size_t(c) * k * k + ky * k + kx) * total_cols + col_offset;
        for (int oy = 0; oy < out_side; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= side) continue;
          for (int ox = 0; ox < out_side; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= side) continue;
            img[(std::size_t(c) * side + iy) * side + ix] += row[oy * out_side + ox];
          }
        }
      }
    }
  }
}

// [B, C, S] <-> [C, B*S]
template <typename T>
void batch_to_channel_major(const T* src, int batch, int channels, int spatial, T* dst) {
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < channels; ++c)
      std::copy_n(src + (std::size_t(b) * channels + c) * spatial, spatial,
                  dst + std::size_t(c) * batch * spatial + std::size_t(b) * spatial);
}

template <typename T>
void channel_major_to_batch(const T* src, int batch, int channels, int spatial, T* dst) {
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < channels; ++c)
      std::copy_n(src + std::size_t(c) * batch * spatial + std::size_t(b) * spatial, spatial,
                  dst + (std::size_t(b) * channels + c) * spatial);
}

}  // namespace

const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::decoder: return "decoder";
    case ParamGroup::head: return "head";
  }
  return "unknown";
}

template <typename T>
std::size_t ParameterSet<T>::add(std::string name, ParamGroup group, std::vector<int> shape) {
  require(!index_.contains(name), "duplicate parameter name: " + name);
  index_.emplace(name, params_.size());
  params_.push_back(Parameter<T>{std::move(name), group, Tensor<T>(std::move(shape))});
  return params_.size() - 1;
}

template <typename T>
std::optional<std::size_t> ParameterSet<T>::find(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count(ParamGroup g) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.group == g) n += p.value.size();
  return n;
}

template <typename T>
ParameterSet<T> ParameterSet<T>::zeros_like() const {
  ParameterSet out;
  for (const auto& p : params_) out.add(p.name, p.group, p.value.shape);
  return out;
}

template <typename T>
void ParameterSet<T>::zero() {
  for (auto& p : params_) p.value.zero();
}

template <typename T>
bool ParameterSet<T>::same_layout(const ParameterSet& other) const {
  if (other.size() != size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    if (params_[i].name != other[i].name || params_[i].group != other[i].group ||
        params_[i].value.shape != other[i].value.shape)
      return false;
  }
  return true;
}

template <typename T>
bool ParameterSet<T>::operator==(const ParameterSet& other) const {
  if (!same_layout(other)) return false;
  for (std::size_t i = 0; i < size(); ++i)
    if (params_[i].value.data != other[i].value.data) return false;
  return true;
}

template <typename T>
void init_uniform_fan_in(Tensor<T>& t, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T> Linear<T>::create(ParameterSet<T>& params, const std::string& name, ParamGroup group, int in,
                            int out) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = params.add(name + ".weight", group, {out, in});
  l.bias = params.add(name + ".bias", group, {out});
  return l;
}

template <typename T>
void Linear<T>::init(ParameterSet<T>& params, Rng& rng) const {
  init_uniform_fan_in(params[weight].value, in, rng);
  init_uniform_fan_in(params[bias].value, in, rng);
}

template <typename T>
void Linear<T>::forward(const ParameterSet<T>& params, const T* x, int batch, T* y) const {
  CMapR<T> X(x, batch, in);
  CMapR<T> W(params[weight].value.ptr(), out, in);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(params[bias].value.ptr(), out);
  MapR<T> Y(y, batch, out);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += b;
}

template <typename T>
void Linear<T>::backward(const ParameterSet<T>& params, ParameterSet<T>& grads, const T* x, const T* dy,
                         int batch, T* dx) const {
  CMapR<T> X(x, batch, in);
  CMapR<T> dY(dy, batch, out);
  MapR<T> dW(grads[weight].value.ptr(), out, in);
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(grads[bias].value.ptr(), out);
  dW.noalias() += dY.transpose() * X;
  db += dY.colwise().sum();
  if (dx) {
    CMapR<T> W(params[weight].value.ptr(), out, in);
    MapR<T> dX(dx, batch, in);
    dX.noalias() = dY * W;
  }
}

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T> Conv2d<T>::create(ParameterSet<T>& params, const std::string& name, ParamGroup group, int cin,
                            int cout, ConvGeometry geom) {
  Conv2d c;
  c.cin = cin;
  c.cout = cout;
  c.geom = geom;
  c.weight = params.add(name + ".weight", group, {cout, cin * geom.kernel * geom.kernel});
  c.bias = params.add(name + ".bias", group, {cout});
  return c;
}

template <typename T>
void Conv2d<T>::init(ParameterSet<T>& params, Rng& rng) const {
  const int fan_in = cin * geom.kernel * geom.kernel;
  init_uniform_fan_in(params[weight].value, fan_in, rng);
  init_uniform_fan_in(params[bias].value, fan_in, rng);
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const ParameterSet<T>& params, const Tensor<T>& x, Tensor<T>& cols) const {
  require(x.shape.size() == 4 && x.dim(1) == cin && x.dim(2) == x.dim(3),
          "conv input must be [B, " + std::to_string(cin) + ", S, S], got " + shape_string(x.shape));
  const int batch = x.dim(0);
  const int side = x.dim(2);
  const int out_side = geom.out_side(side);
  const int spatial = out_side * out_side;
  const int k_rows = cin * geom.kernel * geom.kernel;
  const std::size_t n_cols = std::size_t(batch) * spatial;

  cols = Tensor<T>({k_rows, static_cast<int>(n_cols)});
  for (int b = 0; b < batch; ++b)
    im2col(x.ptr() + b * x.stride0(), cin, side, geom, out_side, cols.ptr(), n_cols, std::size_t(b) * spatial);

  Tensor<T> out_mat({cout, static_cast<int>(n_cols)});
  MapR<T> Y(out_mat.ptr(), cout, n_cols);
  Y.noalias() = CMapR<T>(params[weight].value.ptr(), cout, k_rows) * CMapR<T>(cols.ptr(), k_rows, n_cols);
  Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(params[bias].value.ptr(), cout);

  Tensor<T> y({batch, cout, out_side, out_side});
  channel_major_to_batch(out_mat.ptr(), batch, cout, spatial, y.ptr());
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const ParameterSet<T>& params, ParameterSet<T>& grads,
                              const std::vector<int>& in_shape, const Tensor<T>& cols, const Tensor<T>& dy,
                              bool need_dx) const {
  const int batch = dy.dim(0);
  const int out_side = dy.dim(2);
  const int spatial = out_side * out_side;
  const int k_rows = cin * geom.kernel * geom.kernel;
  const std::size_t n_cols = std::size_t(batch) * spatial;

  Tensor<T> dy_mat({cout, static_cast<int>(n_cols)});
  batch_to_channel_major(dy.ptr(), batch, cout, spatial, dy_mat.ptr());
  CMapR<T> dY(dy_mat.ptr(), cout, n_cols);

  MapR<T>(grads[weight].value.ptr(), cout, k_rows).noalias() += dY * CMapR<T>(cols.ptr(), k_rows, n_cols).transpose();
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(grads[bias].value.ptr(), cout) += dY.rowwise().sum();

  if (!need_dx) return {};
  Tensor<T> dcols({k_rows, static_cast<int>(n_cols)});
  MapR<T>(dcols.ptr(), k_rows, n_cols).noalias() =
      CMapR<T>(params[weight].value.ptr(), cout, k_rows).transpose() * dY;
  Tensor<T> dx(in_shape);
  const int side = in_shape[2];
  for (int b = 0; b < batch; ++b)
    col2im(dcols.ptr(), cin, side, geom, out_side, dx.ptr() + b * dx.stride0(), n_cols, std::size_t(b) * spatial);
  return dx;
}

// ---------------------------------------------------------------- ConvTranspose2d

template <typename T>
ConvTranspose2d<T> ConvTranspose2d<T>::create(ParameterSet<T>& params, const std::string& name,
                                              ParamGroup group, int cin, int cout, ConvGeometry geom) {
  ConvTranspose2d c;
  c.cin = cin;
  c.cout = cout;
  c.geom = geom;
  c.weight = params.add(name + ".weight", group, {cin, cout * geom.kernel * geom.kernel});
  c.bias = params.add(name + ".bias", group, {cout});
  return c;
}

template <typename T>
void ConvTranspose2d<T>::init(ParameterSet<T>& params, Rng& rng) const {
  // Each output pixel receives about cin * (k/s)^2 contributions.
  const int fan_in = std::max(1, cin * (geom.kernel / geom.stride) * (geom.kernel / geom.stride));
  init_uniform_fan_in(params[weight].value, fan_in, rng);
  init_uniform_fan_in(params[bias].value, fan_in, rng);
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::forward(const ParameterSet<T>& params, const Tensor<T>& x, Tensor<T>& x_mat) const {
  require(x.shape.size() == 4 && x.dim(1) == cin && x.dim(2) == x.dim(3),
          "transposed conv input must be [B, " + std::to_string(cin) + ", S, S], got " + shape_string(x.shape));
  const int batch = x.dim(0);
  const int side = x.dim(2);
  const int in_spatial = side * side;
  const int out_side = geom.transposed_out_side(side);
  const int k_rows = cout * geom.kernel * geom.kernel;
  const std::size_t n_cols = std::size_t(batch) * in_spatial;

  x_mat = Tensor<T>({cin, static_cast<int>(n_cols)});
  batch_to_channel_major(x.ptr(), batch, cin, in_spatial, x_mat.ptr());

  Tensor<T> cols({k_rows, static_cast<int>(n_cols)});
  MapR<T>(cols.ptr(), k_rows, n_cols).noalias() =
      CMapR<T>(params[weight].value.ptr(), cin, k_rows).transpose() * CMapR<T>(x_mat.ptr(), cin, n_cols);

  Tensor<T> y({batch, cout, out_side, out_side});
  for (int b = 0; b < batch; ++b)
    col2im(cols.ptr(), cout, out_side, geom, side, y.ptr() + b * y.stride0(), n_cols, std::size_t(b) * in_spatial);
  const std::size_t out_spatial = std::size_t(out_side) * out_side;
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < cout; ++c) {
      T* plane = y.ptr() + (std::size_t(b) * cout + c) * out_spatial;
      const T bc = params[bias].value[c];
      for (std::size_t i = 0; i < out_spatial; ++i) plane[i] += bc;
    }
  return y;
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::backward(const ParameterSet<T>& params, ParameterSet<T>& grads,
                                       const std::vector<int>& in_shape, const Tensor<T>& x_mat,
                                       const Tensor<T>& dy, bool need_dx) const {
  const int batch = dy.dim(0);
  const int out_side = dy.dim(2);
  const int side = in_shape[2];
  const int in_spatial = side * side;
  const int k_rows = cout * geom.kernel * geom.kernel;
  const std::size_t n_cols = std::size_t(batch) * in_spatial;

  Tensor<T> dcols({k_rows, static_cast<int>(n_cols)});
  for (int b = 0; b < batch; ++b)
    im2col(dy.ptr() + b * dy.stride0(), cout, out_side, geom, side, dcols.ptr(), n_cols, std::size_t(b) * in_spatial);
  CMapR<T> dC(dcols.ptr(), k_rows, n_cols);

  MapR<T>(grads[weight].value.ptr(), cin, k_rows).noalias() += CMapR<T>(x_mat.ptr(), cin, n_cols) * dC.transpose();
  const std::size_t out_spatial = std::size_t(out_side) * out_side;
  auto& db = grads[bias].value;
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < cout; ++c) {
      const T* plane = dy.ptr() + (std::size_t(b) * cout + c) * out_spatial;
      T acc = 0;
      for (std::size_t i = 0; i < out_spatial; ++i) acc += plane[i];
      db[c] += acc;
    }

  if (!need_dx) return {};
  Tensor<T> dx_mat({cin, static_cast<int>(n_cols)});
  MapR<T>(dx_mat.ptr(), cin, n_cols).noalias() = CMapR<T>(params[weight].value.ptr(), cin, k_rows) * dC;
  Tensor<T> dx(in_shape);
  channel_major_to_batch(dx_mat.ptr(), batch, cin, in_spatial, dx.ptr());
  return dx;
}

// ---------------------------------------------------------------- activations

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (auto& v : t.data) v = v > T(0) ? v : T(0);
}

template <typename T>
void relu_backward_inplace(const Tensor<T>& activation, Tensor<T>& dy) {
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (!(activation[i] > T(0))) dy[i] = T(0);
}

template <typename T>
void sigmoid_inplace(Tensor<T>& t) {
  for (auto& v : t.data) v = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
}

template <typename T>
void sigmoid_backward_inplace(const Tensor<T>& activation, Tensor<T>& dy) {
  for (std::size_t i = 0; i < dy.size(); ++i) dy[i] *= activation[i] * (T(1) - activation[i]);
}

#define VAEDG_INSTANTIATE_NN(T)                                          \
  template class ParameterSet<T>;                                        \
  template void init_uniform_fan_in<T>(Tensor<T>&, int, Rng&);           \
  template struct Linear<T>;                                             \
  template struct Conv2d<T>;                                             \
  template struct ConvTranspose2d<T>;                                    \
  template void relu_inplace<T>(Tensor<T>&);                             \
  template void relu_backward_inplace<T>(const Tensor<T>&, Tensor<T>&);  \
  template void sigmoid_inplace<T>(Tensor<T>&);                          \
  template void sigmoid_backward_inplace<T>(const Tensor<T>&, Tensor<T>&);

VAEDG_INSTANTIATE_NN(float)
VAEDG_INSTANTIATE_NN(double)

}  // namespace vaedg
