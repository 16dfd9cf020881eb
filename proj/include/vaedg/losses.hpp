#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "vaedg/errors.hpp"
#include "vaedg/tensor.hpp"

namespace vaedg {

/// Diagonal Gaussian posterior q(z|x) for `rows` examples of latent size `dim`.
/// Entries are stored row-major; a single posterior has rows == 1.
template <typename T>
struct LatentPosterior {
  int rows = 0;
  int dim = 0;
  std::vector<T> mu;
  std::vector<T> logvar;

  LatentPosterior() = default;
  LatentPosterior(int r, int d) : rows(r), dim(d), mu(std::size_t(r) * d), logvar(std::size_t(r) * d) {}
  LatentPosterior(std::vector<T> m, std::vector<T> lv)
      : rows(1), dim(static_cast<int>(m.size())), mu(std::move(m)), logvar(std::move(lv)) {}

  void validate() const;
};

/// Decoder reconstruction, latent sample, posterior and class logits of one batch.
template <typename T>
struct ForwardOutputs {
  Tensor<T> x_prime;  // same shape as the input batch
  Tensor<T> z;        // [B, L]
  LatentPosterior<T> posterior;
  Tensor<T> logits;   // [B, C]
};

/// Weighted objective terms. All terms are batch means.
///
/// total = recon_weight*recon + beta*kl + alpha*cls + penalty_weight*penalty.
/// recon_weight is 1 and penalty_weight 0 except for the no-recon ablation
/// and the Fishr-regularized baselines.
struct LossBreakdown {
  double recon = 0.0;
  double kl = 0.0;
  double cls = 0.0;
  double penalty = 0.0;
  double recon_weight = 1.0;
  double beta = 0.0;
  double alpha = 0.0;
  double penalty_weight = 0.0;
  double total = 0.0;

  static LossBreakdown compose(double recon, double kl, double cls, double beta, double alpha,
                               double recon_weight = 1.0, double penalty = 0.0,
                               double penalty_weight = 0.0);
};

/// Gradients of the objective w.r.t. the forward outputs.
template <typename T>
struct OutputGrads {
  Tensor<T> d_x_prime;
  std::vector<T> d_mu;
  std::vector<T> d_logvar;
  Tensor<T> d_logits;
};

/// KL(q || N(0, I)) summed over latent dimensions, averaged over rows (nats).
template <typename T>
double gaussian_kl(const LatentPosterior<T>& posterior);

/// Adds scale * d(gaussian_kl)/d(mu, logvar) into the output spans.
template <typename T>
void gaussian_kl_grad(const LatentPosterior<T>& posterior, double scale, std::span<T> d_mu,
                      std::span<T> d_logvar);

/// Sum of squared differences per image, averaged over the leading (batch) dimension.
template <typename T>
double reconstruction_loss(const Tensor<T>& x, const Tensor<T>& x_prime);

template <typename T>
void reconstruction_loss_grad(const Tensor<T>& x, const Tensor<T>& x_prime, double scale,
                              Tensor<T>& d_x_prime);

/// Mean softmax cross-entropy over the batch (nats). logits is [B, C].
template <typename T>
double classification_loss(const Tensor<T>& logits, std::span<const int> labels);

template <typename T>
void classification_loss_grad(const Tensor<T>& logits, std::span<const int> labels, double scale,
                              Tensor<T>& d_logits);

/// Row-wise softmax probabilities, computed in double.
template <typename T>
std::vector<double> softmax_rows(const Tensor<T>& logits);

/// Classical VAE objective: reconstruction + KL, both with unit weight.
/// Its negation is the evidence lower bound.
template <typename T>
double vae_loss(const Tensor<T>& x, const ForwardOutputs<T>& outputs);

template <typename T>
LossBreakdown vae_dg_loss(const Tensor<T>& x, std::span<const int> labels,
                          const ForwardOutputs<T>& outputs, double beta, double alpha,
                          double recon_weight = 1.0);

/// Gradients of vae_dg_loss w.r.t. every forward output.
template <typename T>
OutputGrads<T> vae_dg_loss_grad(const Tensor<T>& x, std::span<const int> labels,
                                const ForwardOutputs<T>& outputs, double beta, double alpha,
                                double recon_weight = 1.0);

/// Scalar linear-Gaussian model z ~ N(0,1), x|z ~ N(weight*z + bias, noise_var).
/// Every quantity in the evidence decomposition has a closed form here, so
/// log p(x) - KL(q || p(z|x)) == ELBO(q) can be checked for any Gaussian q.
struct LinearGaussianModel {
  double weight = 1.0;
  double bias = 0.0;
  double noise_var = 1.0;

  double log_evidence(double x) const;
  /// Exact posterior p(z|x) as (mean, variance).
  std::pair<double, double> posterior(double x) const;
  /// E_q[log p(x|z)] - KL(q || p(z)) for q = N(q_mean, q_var).
  double elbo(double x, double q_mean, double q_var) const;
  double kl_to_posterior(double x, double q_mean, double q_var) const;
};

/// KL between two univariate normals, KL(N(m1,v1) || N(m2,v2)).
double normal_kl(double m1, double v1, double m2, double v2);

}  // namespace vaedg
