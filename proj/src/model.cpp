#include "vaedg/model.hpp"

#include <algorithm>
#include <cmath>

namespace vaedg {

const char* to_string(BackboneKind k) {
  return k == BackboneKind::small_cnn ? "small_cnn" : "external_residual_hook";
}

const char* to_string(LatentMode m) {
  switch (m) {
    case LatentMode::sampled: return "sampled";
    case LatentMode::fixed_mu: return "fixed_mu";
    case LatentMode::frozen_noise: return "frozen_noise";
  }
  return "unknown";
}

BackboneKind parse_backbone(const std::string& s) {
  if (s == "small_cnn") return BackboneKind::small_cnn;
  if (s == "external_residual_hook") return BackboneKind::external_residual_hook;
  throw InvalidInput("unknown backbone: " + s);
}

LatentMode parse_latent_mode(const std::string& s) {
  if (s == "sampled") return LatentMode::sampled;
  if (s == "fixed_mu") return LatentMode::fixed_mu;
  if (s == "frozen_noise") return LatentMode::frozen_noise;
  throw InvalidInput("unknown latent mode: " + s);
}

void ModelConfig::validate() const {
  require(latent_dim > 0, "latent_dim must be positive");
  require(image_side > 0 && channels > 0, "image side and channels must be positive");
  require(num_classes >= 2, "num_classes must be at least 2");
  require(head_hidden > 0, "head_hidden must be positive");
  require(!conv_channels.empty(), "conv_channels must not be empty");
  for (int c : conv_channels) require(c > 0, "conv channel counts must be positive");
  const int div = 1 << conv_channels.size();
  require(image_side % div == 0,
          "image_side " + std::to_string(image_side) + " must be divisible by 2^" +
              std::to_string(conv_channels.size()));
}

int ModelConfig::feature_side() const { return image_side >> conv_channels.size(); }

int ModelConfig::feature_dim() const { return conv_channels.back() * feature_side() * feature_side(); }

namespace {

// Stride-2 conv + ReLU blocks, flattened.
template <typename T>
class SmallCnnBackbone final : public Backbone<T> {
 public:
  SmallCnnBackbone(const ModelConfig& cfg, ParameterSet<T>& params) : feature_dim_(cfg.feature_dim()) {
    int cin = cfg.channels;
    for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
      convs_.push_back(Conv2d<T>::create(params, "encoder.conv" + std::to_string(i), ParamGroup::encoder, cin,
                                         cfg.conv_channels[i], ConvGeometry{}));
      cin = cfg.conv_channels[i];
    }
  }

  int feature_dim() const override { return feature_dim_; }

  void init(ParameterSet<T>& params, Rng& rng) const override {
    for (const auto& c : convs_) c.init(params, rng);
  }

  Tensor<T> forward(const ParameterSet<T>& params, const Tensor<T>& x, BackboneTape<T>* tape) const override {
    Tensor<T> h = x;
    for (const auto& conv : convs_) {
      Tensor<T> cols;
      std::vector<int> in_shape = h.shape;
      h = conv.forward(params, h, cols);
      relu_inplace(h);
      if (tape) {
        tape->shapes.push_back(std::move(in_shape));
        tape->saved.push_back(std::move(cols));
        tape->saved.push_back(h);
      }
    }
    h.shape = {x.dim(0), feature_dim_};
    return h;
  }

  void backward(const ParameterSet<T>& params, ParameterSet<T>& grads, const BackboneTape<T>& tape,
                const Tensor<T>& d_features) const override {
    Tensor<T> d = d_features;
    for (std::size_t i = convs_.size(); i-- > 0;) {
      const Tensor<T>& act = tape.saved[2 * i + 1];
      d.shape = act.shape;
      relu_backward_inplace(act, d);
      d = convs_[i].backward(params, grads, tape.shapes[i], tape.saved[2 * i], d, i > 0);
    }
  }

 private:
  int feature_dim_;
  std::vector<Conv2d<T>> convs_;
};

template <typename T>
BackboneFactory<T>& external_factory() {
  static BackboneFactory<T> factory;
  return factory;
}

}  // namespace

template <typename T>
void set_external_backbone_factory(BackboneFactory<T> factory) {
  external_factory<T>() = std::move(factory);
}

template <typename T>
VaeModel<T>::VaeModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  if (config_.backbone == BackboneKind::small_cnn) {
    backbone_ = std::make_unique<SmallCnnBackbone<T>>(config_, params_);
  } else {
    auto& factory = external_factory<T>();
    require(static_cast<bool>(factory), "backbone external_residual_hook selected but no factory is installed");
    backbone_ = factory(config_, params_);
    require(backbone_ != nullptr, "external backbone factory returned null");
  }
  const int features = backbone_->feature_dim();
  const int latent = config_.latent_dim;
  mu_head_ = Linear<T>::create(params_, "encoder.mu", ParamGroup::encoder, features, latent);
  logvar_head_ = Linear<T>::create(params_, "encoder.logvar", ParamGroup::encoder, features, latent);

  decoder_in_ = Linear<T>::create(params_, "decoder.fc", ParamGroup::decoder, latent, config_.feature_dim());
  const auto& ch = config_.conv_channels;
  for (std::size_t i = ch.size(); i-- > 0;) {
    const int cout = i == 0 ? config_.channels : ch[i - 1];
    decoder_convs_.push_back(ConvTranspose2d<T>::create(params_, "decoder.deconv" + std::to_string(ch.size() - 1 - i),
                                                        ParamGroup::decoder, ch[i], cout, ConvGeometry{}));
  }

  head_hidden_ = Linear<T>::create(params_, "head.fc", ParamGroup::head, latent, config_.head_hidden);
  head_out_ = Linear<T>::create(params_, "head.out", ParamGroup::head, config_.head_hidden, config_.num_classes);

  Rng rng(counter_seed(seed, 0x1417));
  backbone_->init(params_, rng);
  mu_head_.init(params_, rng);
  logvar_head_.init(params_, rng);
  decoder_in_.init(params_, rng);
  for (const auto& d : decoder_convs_) d.init(params_, rng);
  head_hidden_.init(params_, rng);
  head_out_.init(params_, rng);
}

template <typename T>
void VaeModel<T>::set_params(const ParameterSet<T>& params) {
  require(params_.same_layout(params), "parameter layout does not match the model");
  params_ = params;
}

template <typename T>
void VaeModel<T>::check_input(const Tensor<T>& x) const {
  require(x.shape.size() == 4 && x.dim(1) == config_.channels && x.dim(2) == config_.image_side &&
              x.dim(3) == config_.image_side,
          "input must be [B, " + std::to_string(config_.channels) + ", " + std::to_string(config_.image_side) + ", " +
              std::to_string(config_.image_side) + "], got " + shape_string(x.shape));
  require(x.dim(0) > 0, "input batch is empty");
}

template <typename T>
LatentPosterior<T> VaeModel<T>::posterior_from_features(const Tensor<T>& features, std::vector<T>* logvar_raw) const {
  const int batch = features.dim(0);
  LatentPosterior<T> post(batch, config_.latent_dim);
  mu_head_.forward(params_, features.ptr(), batch, post.mu.data());
  logvar_head_.forward(params_, features.ptr(), batch, post.logvar.data());
  if (logvar_raw) *logvar_raw = post.logvar;
  for (auto& v : post.logvar) v = std::clamp(v, static_cast<T>(kLogvarMin), static_cast<T>(kLogvarMax));
  return post;
}

template <typename T>
LatentPosterior<T> VaeModel<T>::encode(const Tensor<T>& x) const {
  check_input(x);
  return posterior_from_features(backbone_->forward(params_, x, nullptr), nullptr);
}

template <typename T>
Tensor<T> VaeModel<T>::reparameterize(const LatentPosterior<T>& posterior, std::span<const T> noise) {
  require(noise.size() == posterior.mu.size(), "noise length " + std::to_string(noise.size()) +
                                                   " does not match posterior size " +
                                                   std::to_string(posterior.mu.size()));
  Tensor<T> z({posterior.rows, posterior.dim});
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = posterior.mu[i] + static_cast<T>(std::exp(0.5 * static_cast<double>(posterior.logvar[i]))) * noise[i];
  return z;
}

template <typename T>
Tensor<T> VaeModel<T>::decode_impl(const Tensor<T>& z, ForwardTape<T>* tape) const {
  const int batch = z.dim(0);
  const int side = config_.feature_side();
  Tensor<T> h({batch, config_.feature_dim()});
  decoder_in_.forward(params_, z.ptr(), batch, h.ptr());
  relu_inplace(h);
  if (tape) tape->decoder_hidden = h;
  h.shape = {batch, config_.conv_channels.back(), side, side};
  for (std::size_t i = 0; i < decoder_convs_.size(); ++i) {
    Tensor<T> x_mat;
    if (tape) tape->decoder_inputs.push_back(h);
    h = decoder_convs_[i].forward(params_, h, x_mat);
    if (i + 1 < decoder_convs_.size())
      relu_inplace(h);
    else
      sigmoid_inplace(h);
    if (tape) tape->decoder_xmats.push_back(std::move(x_mat));
  }
  if (tape) tape->reconstruction = h;
  return h;
}

template <typename T>
Tensor<T> VaeModel<T>::decode(const Tensor<T>& z) const {
  require(z.shape.size() == 2 && z.dim(1) == config_.latent_dim,
          "latent must be [B, " + std::to_string(config_.latent_dim) + "], got " + shape_string(z.shape));
  return decode_impl(z, nullptr);
}

template <typename T>
Tensor<T> VaeModel<T>::classify_impl(const Tensor<T>& z, Tensor<T>* hidden) const {
  const int batch = z.dim(0);
  Tensor<T> h({batch, config_.head_hidden});
  head_hidden_.forward(params_, z.ptr(), batch, h.ptr());
  relu_inplace(h);
  Tensor<T> logits({batch, config_.num_classes});
  head_out_.forward(params_, h.ptr(), batch, logits.ptr());
  if (hidden) *hidden = std::move(h);
  return logits;
}

template <typename T>
Tensor<T> VaeModel<T>::classify(const Tensor<T>& z) const {
  require(z.shape.size() == 2 && z.dim(1) == config_.latent_dim,
          "latent must be [B, " + std::to_string(config_.latent_dim) + "], got " + shape_string(z.shape));
  return classify_impl(z, nullptr);
}

template <typename T>
ForwardOutputs<T> VaeModel<T>::forward(const Tensor<T>& x, const LatentSampling<T>& sampling, ForwardTape<T>* tape,
                                       bool run_decoder) const {
  check_input(x);
  ForwardOutputs<T> out;
  Tensor<T> features = backbone_->forward(params_, x, tape ? &tape->backbone : nullptr);
  out.posterior = posterior_from_features(features, tape ? &tape->logvar_raw : nullptr);

  std::vector<T> eps;
  switch (sampling.mode) {
    case LatentMode::fixed_mu:
      out.z = Tensor<T>({out.posterior.rows, out.posterior.dim});
      out.z.data.assign(out.posterior.mu.begin(), out.posterior.mu.end());
      break;
    case LatentMode::sampled:
      require(sampling.rng != nullptr, "sampled latent mode needs a random generator");
      eps.resize(out.posterior.mu.size());
      for (auto& e : eps) e = static_cast<T>(sampling.rng->normal());
      out.z = reparameterize(out.posterior, eps);
      break;
    case LatentMode::frozen_noise: {
      require(sampling.frozen_eps.size() == std::size_t(config_.latent_dim),
              "frozen noise must have latent_dim entries");
      eps.resize(out.posterior.mu.size());
      for (int r = 0; r < out.posterior.rows; ++r)
        std::copy(sampling.frozen_eps.begin(), sampling.frozen_eps.end(), eps.begin() + std::size_t(r) * config_.latent_dim);
      out.z = reparameterize(out.posterior, eps);
      break;
    }
  }

  if (tape) {
    tape->input_shape = x.shape;
    tape->features = std::move(features);
    tape->mode = sampling.mode;
    tape->eps = eps;
    tape->z = out.z;
    tape->decoded = run_decoder;
    tape->decoder_inputs.clear();
    tape->decoder_xmats.clear();
  }
  if (run_decoder) out.x_prime = decode_impl(out.z, tape);
  out.logits = classify_impl(out.z, tape ? &tape->head_hidden : nullptr);
  return out;
}

template <typename T>
void VaeModel<T>::backward(const ForwardTape<T>& tape, const OutputGrads<T>& grads, ParameterSet<T>& param_grads,
                           const Tensor<T>* d_head_hidden) const {
  require(param_grads.same_layout(params_), "gradient buffer layout does not match the model");
  const int batch = tape.z.dim(0);
  const int latent = config_.latent_dim;
  Tensor<T> dz({batch, latent});

  if (!grads.d_logits.data.empty()) {
    Tensor<T> dh({batch, config_.head_hidden});
    head_out_.backward(params_, param_grads, tape.head_hidden.ptr(), grads.d_logits.ptr(), batch, dh.ptr());
    if (d_head_hidden) {
      require(d_head_hidden->size() == dh.size(), "head hidden gradient has the wrong size");
      for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += (*d_head_hidden)[i];
    }
    relu_backward_inplace(tape.head_hidden, dh);
    Tensor<T> dz_head({batch, latent});
    head_hidden_.backward(params_, param_grads, tape.z.ptr(), dh.ptr(), batch, dz_head.ptr());
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += dz_head[i];
  }

  if (!grads.d_x_prime.data.empty()) {
    require(tape.decoded, "reconstruction gradient given but the decoder did not run");
    Tensor<T> d = grads.d_x_prime;
    for (std::size_t i = decoder_convs_.size(); i-- > 0;) {
      // Each layer's activated output is the next layer's input; the last is x'.
      if (i + 1 == decoder_convs_.size())
        sigmoid_backward_inplace(tape.reconstruction, d);
      else
        relu_backward_inplace(tape.decoder_inputs[i + 1], d);
      d = decoder_convs_[i].backward(params_, param_grads, tape.decoder_inputs[i].shape, tape.decoder_xmats[i], d, true);
    }
    d.shape = tape.decoder_hidden.shape;
    relu_backward_inplace(tape.decoder_hidden, d);
    Tensor<T> dz_dec({batch, latent});
    decoder_in_.backward(params_, param_grads, tape.z.ptr(), d.ptr(), batch, dz_dec.ptr());
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += dz_dec[i];
  }

  const std::size_t n = dz.size();
  std::vector<T> d_mu(n), d_logvar(n);
  for (std::size_t i = 0; i < n; ++i) {
    d_mu[i] = dz[i] + (grads.d_mu.empty() ? T(0) : grads.d_mu[i]);
    T dl = grads.d_logvar.empty() ? T(0) : grads.d_logvar[i];
    if (tape.mode != LatentMode::fixed_mu) {
      const double lv = std::clamp(static_cast<double>(tape.logvar_raw[i]), kLogvarMin, kLogvarMax);
      dl += static_cast<T>(static_cast<double>(dz[i]) * tape.eps[i] * 0.5 * std::exp(0.5 * lv));
    }
    const T raw = tape.logvar_raw[i];
    if (raw < static_cast<T>(kLogvarMin) || raw > static_cast<T>(kLogvarMax)) dl = T(0);
    d_logvar[i] = dl;
  }

  const int features = backbone_->feature_dim();
  Tensor<T> d_features({batch, features});
  Tensor<T> d_features_lv({batch, features});
  mu_head_.backward(params_, param_grads, tape.features.ptr(), d_mu.data(), batch, d_features.ptr());
  logvar_head_.backward(params_, param_grads, tape.features.ptr(), d_logvar.data(), batch, d_features_lv.ptr());
  for (std::size_t i = 0; i < d_features.size(); ++i) d_features[i] += d_features_lv[i];
  backbone_->backward(params_, param_grads, tape.backbone, d_features);
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const int batch = logits.dim(0);
  const int classes = logits.dim(1);
  std::vector<int> out(batch);
  for (int b = 0; b < batch; ++b) {
    const T* row = logits.ptr() + std::size_t(b) * classes;
    out[b] = static_cast<int>(std::max_element(row, row + classes) - row);
  }
  return out;
}

template <typename T>
std::vector<int> VaeModel<T>::predict(const Tensor<T>& x, int eval_batch) const {
  check_input(x);
  std::vector<int> out;
  out.reserve(x.dim(0));
  const std::size_t per = x.stride0();
  for (int start = 0; start < x.dim(0); start += eval_batch) {
    const int n = std::min(eval_batch, x.dim(0) - start);
    Tensor<T> chunk({n, x.dim(1), x.dim(2), x.dim(3)});
    std::copy_n(x.ptr() + start * per, n * per, chunk.ptr());
    const auto outputs = forward(chunk, LatentSampling<T>{LatentMode::fixed_mu, nullptr, {}}, nullptr, false);
    const auto pred = argmax_rows(outputs.logits);
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

template class VaeModel<float>;
template class VaeModel<double>;
template void set_external_backbone_factory<float>(BackboneFactory<float>);
template void set_external_backbone_factory<double>(BackboneFactory<double>);
template std::vector<int> argmax_rows<float>(const Tensor<float>&);
template std::vector<int> argmax_rows<double>(const Tensor<double>&);

}  // namespace vaedg
