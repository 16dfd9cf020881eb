#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vaedg/losses.hpp"
#include "vaedg/nn.hpp"
#include "vaedg/rng.hpp"

namespace vaedg {

enum class BackboneKind { small_cnn, external_residual_hook };

/// How the latent code fed to the decoder and classifier is produced.
/// sampled: z = mu + sigma * eps with fresh eps per example.
/// fixed_mu: z = mu (evaluation, and the fixed-latent ablation).
/// frozen_noise: z = mu + sigma * eps0 with one eps0 drawn per run.
enum class LatentMode { sampled, fixed_mu, frozen_noise };

const char* to_string(BackboneKind k);
const char* to_string(LatentMode m);
BackboneKind parse_backbone(const std::string& s);
LatentMode parse_latent_mode(const std::string& s);

/// Bounds applied to the encoder's log-variance before exponentiation.
inline constexpr double kLogvarMin = -30.0;
inline constexpr double kLogvarMax = 20.0;

struct ModelConfig {
  int latent_dim = 256;
  int image_side = 32;
  int channels = 3;
  int num_classes = 5;
  /// Output channels of each stride-2 conv block; the decoder mirrors them.
  std::vector<int> conv_channels{8, 16, 32};
  int head_hidden = 64;
  BackboneKind backbone = BackboneKind::small_cnn;
  LatentMode latent_mode = LatentMode::sampled;

  void validate() const;
  /// Side length of the feature map after the conv stack.
  int feature_side() const;
  int feature_dim() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct BackboneTape {
  std::vector<Tensor<T>> saved;
  std::vector<std::vector<int>> shapes;
};

/// Encoder trunk mapping an image batch [B, C, S, S] to features [B, F].
/// Implementations register their trainables in the encoder group.
template <typename T>
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual int feature_dim() const = 0;
  virtual void init(ParameterSet<T>& params, Rng& rng) const = 0;
  virtual Tensor<T> forward(const ParameterSet<T>& params, const Tensor<T>& x, BackboneTape<T>* tape) const = 0;
  virtual void backward(const ParameterSet<T>& params, ParameterSet<T>& grads, const BackboneTape<T>& tape,
                        const Tensor<T>& d_features) const = 0;
};

template <typename T>
using BackboneFactory = std::function<std::unique_ptr<Backbone<T>>(const ModelConfig&, ParameterSet<T>&)>;

/// Installs the factory used for BackboneKind::external_residual_hook, e.g. a
/// wrapper around a pretrained residual network. Pass an empty function to clear.
template <typename T>
void set_external_backbone_factory(BackboneFactory<T> factory);

/// Intermediate values retained by forward() for backward().
template <typename T>
struct ForwardTape {
  std::vector<int> input_shape;
  BackboneTape<T> backbone;
  Tensor<T> features;
  std::vector<T> logvar_raw;
  std::vector<T> eps;
  LatentMode mode = LatentMode::fixed_mu;
  Tensor<T> z;
  bool decoded = false;
  Tensor<T> decoder_hidden;
  std::vector<Tensor<T>> decoder_inputs;
  std::vector<Tensor<T>> decoder_xmats;
  Tensor<T> reconstruction;
  Tensor<T> head_hidden;
};

/// Noise configuration for one forward pass.
template <typename T>
struct LatentSampling {
  LatentMode mode = LatentMode::fixed_mu;
  Rng* rng = nullptr;              // required for sampled
  std::span<const T> frozen_eps;   // required for frozen_noise, length latent_dim
};

/// Encoder q(z|x), decoder p(x|z) and a classifier head on z.
template <typename T>
class VaeModel {
 public:
  VaeModel(const ModelConfig& config, std::uint64_t seed);
  VaeModel(const VaeModel&) = delete;
  VaeModel& operator=(const VaeModel&) = delete;
  VaeModel(VaeModel&&) noexcept = default;
  VaeModel& operator=(VaeModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  const ParameterSet<T>& params() const { return params_; }
  ParameterSet<T>& params() { return params_; }
  void set_params(const ParameterSet<T>& params);

  LatentPosterior<T> encode(const Tensor<T>& x) const;
  static Tensor<T> reparameterize(const LatentPosterior<T>& posterior, std::span<const T> noise);
  Tensor<T> decode(const Tensor<T>& z) const;
  Tensor<T> classify(const Tensor<T>& z) const;

  /// Full pipeline. With run_decoder false x_prime is left empty.
  ForwardOutputs<T> forward(const Tensor<T>& x, const LatentSampling<T>& sampling, ForwardTape<T>* tape = nullptr,
                            bool run_decoder = true) const;

  /// Accumulates parameter gradients of a loss given its gradients w.r.t. the
  /// forward outputs. Empty d_x_prime / d_logits skip the decoder / head.
  /// d_head_hidden, when given, is added at the input of the final head layer.
  void backward(const ForwardTape<T>& tape, const OutputGrads<T>& grads, ParameterSet<T>& param_grads,
                const Tensor<T>* d_head_hidden = nullptr) const;

  /// Argmax class per row using z = mu; evaluated in chunks of eval_batch.
  std::vector<int> predict(const Tensor<T>& x, int eval_batch = 128) const;

  /// Index of the classifier's final linear layer weight and bias.
  std::size_t head_out_weight() const { return head_out_.weight; }
  std::size_t head_out_bias() const { return head_out_.bias; }

 private:
  void check_input(const Tensor<T>& x) const;
  LatentPosterior<T> posterior_from_features(const Tensor<T>& features, std::vector<T>* logvar_raw) const;
  Tensor<T> decode_impl(const Tensor<T>& z, ForwardTape<T>* tape) const;
  Tensor<T> classify_impl(const Tensor<T>& z, Tensor<T>* hidden) const;

  ModelConfig config_;
  ParameterSet<T> params_;
  std::unique_ptr<Backbone<T>> backbone_;
  Linear<T> mu_head_;
  Linear<T> logvar_head_;
  Linear<T> decoder_in_;
  std::vector<ConvTranspose2d<T>> decoder_convs_;
  Linear<T> head_hidden_;
  Linear<T> head_out_;
};

/// Argmax over each row of a [B, C] logits matrix; ties go to the lowest class.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

}  // namespace vaedg
