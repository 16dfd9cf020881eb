#include "vaedg/losses.hpp"

#include <algorithm>
#include <numbers>
#include <string>

namespace vaedg {

template <typename T>
void LatentPosterior<T>::validate() const {
  require(rows > 0 && dim > 0, "posterior must have rows > 0 and latent dimension > 0");
  require(mu.size() == std::size_t(rows) * dim && logvar.size() == mu.size(),
          "posterior mu and logvar must both have rows*dim entries");
  for (std::size_t i = 0; i < mu.size(); ++i) {
    require(std::isfinite(static_cast<double>(mu[i])) && std::isfinite(static_cast<double>(logvar[i])),
            "posterior has a non-finite entry at index " + std::to_string(i));
  }
}

LossBreakdown LossBreakdown::compose(double recon, double kl, double cls, double beta, double alpha,
                                     double recon_weight, double penalty, double penalty_weight) {
  LossBreakdown out;
  out.recon = recon;
  out.kl = kl;
  out.cls = cls;
  out.penalty = penalty;
  out.recon_weight = recon_weight;
  out.beta = beta;
  out.alpha = alpha;
  out.penalty_weight = penalty_weight;
  out.total = recon_weight * recon + beta * kl + alpha * cls + penalty_weight * penalty;
  return out;
}

template <typename T>
double gaussian_kl(const LatentPosterior<T>& posterior) {
  posterior.validate();
  double sum = 0.0;
  for (std::size_t i = 0; i < posterior.mu.size(); ++i) {
    const double m = posterior.mu[i];
    const double lv = posterior.logvar[i];
    // expm1(lv) - lv is the accurate form of exp(lv) - 1 - lv near lv = 0.
    sum += m * m + std::expm1(lv) - lv;
  }
  return std::max(0.0, 0.5 * sum / posterior.rows);
}

template <typename T>
void gaussian_kl_grad(const LatentPosterior<T>& posterior, double scale, std::span<T> d_mu,
                      std::span<T> d_logvar) {
  require(d_mu.size() == posterior.mu.size() && d_logvar.size() == posterior.logvar.size(),
          "gradient buffers do not match posterior size");
  const double s = scale / posterior.rows;
  for (std::size_t i = 0; i < posterior.mu.size(); ++i) {
    d_mu[i] += static_cast<T>(s * posterior.mu[i]);
    d_logvar[i] += static_cast<T>(0.5 * s * std::expm1(static_cast<double>(posterior.logvar[i])));
  }
}

template <typename T>
double reconstruction_loss(const Tensor<T>& x, const Tensor<T>& x_prime) {
  require(x.shape == x_prime.shape,
          "reconstruction shape mismatch: " + shape_string(x.shape) + " vs " + shape_string(x_prime.shape));
  require(x.batch() > 0, "reconstruction_loss needs a nonempty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x_prime[i]) - static_cast<double>(x[i]);
    sum += d * d;
  }
  return sum / x.batch();
}

template <typename T>
void reconstruction_loss_grad(const Tensor<T>& x, const Tensor<T>& x_prime, double scale,
                              Tensor<T>& d_x_prime) {
  require(x.shape == x_prime.shape && d_x_prime.shape == x.shape, "reconstruction gradient shape mismatch");
  const double s = 2.0 * scale / x.batch();
  for (std::size_t i = 0; i < x.size(); ++i) {
    d_x_prime[i] += static_cast<T>(s * (static_cast<double>(x_prime[i]) - static_cast<double>(x[i])));
  }
}

namespace {

template <typename T>
void check_logits(const Tensor<T>& logits, std::span<const int> labels) {
  require(logits.shape.size() == 2, "logits must be a [B, C] matrix");
  const int batch = logits.dim(0);
  const int classes = logits.dim(1);
  require(classes >= 2, "classification needs at least 2 classes");
  require(batch > 0, "classification needs a nonempty batch");
  require(labels.size() == std::size_t(batch), "label count does not match logits rows");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < classes,
            "label " + std::to_string(labels[i]) + " at row " + std::to_string(i) + " outside [0, " +
                std::to_string(classes) + ")");
  }
}

}  // namespace

template <typename T>
std::vector<double> softmax_rows(const Tensor<T>& logits) {
  const int batch = logits.dim(0);
  const int classes = logits.dim(1);
  std::vector<double> probs(logits.size());
  for (int b = 0; b < batch; ++b) {
    const T* row = logits.ptr() + std::size_t(b) * classes;
    double mx = row[0];
    for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double z = 0.0;
    for (int c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
    for (int c = 0; c < classes; ++c) probs[std::size_t(b) * classes + c] = std::exp(row[c] - mx) / z;
  }
  return probs;
}

template <typename T>
double classification_loss(const Tensor<T>& logits, std::span<const int> labels) {
  check_logits(logits, labels);
  const int batch = logits.dim(0);
  const int classes = logits.dim(1);
  double sum = 0.0;
  for (int b = 0; b < batch; ++b) {
    const T* row = logits.ptr() + std::size_t(b) * classes;
    double mx = row[0];
    for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double z = 0.0;
    for (int c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
    sum += mx + std::log(z) - static_cast<double>(row[labels[b]]);
  }
  return std::max(0.0, sum / batch);
}

template <typename T>
void classification_loss_grad(const Tensor<T>& logits, std::span<const int> labels, double scale,
                              Tensor<T>& d_logits) {
  check_logits(logits, labels);
  require(d_logits.shape == logits.shape, "logit gradient shape mismatch");
  const int batch = logits.dim(0);
  const int classes = logits.dim(1);
  const auto probs = softmax_rows(logits);
  const double s = scale / batch;
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < classes; ++c) {
      const std::size_t i = std::size_t(b) * classes + c;
      d_logits[i] += static_cast<T>(s * (probs[i] - (c == labels[b] ? 1.0 : 0.0)));
    }
  }
}

template <typename T>
double vae_loss(const Tensor<T>& x, const ForwardOutputs<T>& outputs) {
  return reconstruction_loss(x, outputs.x_prime) + gaussian_kl(outputs.posterior);
}

template <typename T>
LossBreakdown vae_dg_loss(const Tensor<T>& x, std::span<const int> labels, const ForwardOutputs<T>& outputs,
                          double beta, double alpha, double recon_weight) {
  require(beta >= 0.0 && alpha >= 0.0 && recon_weight >= 0.0, "loss weights must be nonnegative");
  return LossBreakdown::compose(reconstruction_loss(x, outputs.x_prime), gaussian_kl(outputs.posterior),
                                classification_loss(outputs.logits, labels), beta, alpha, recon_weight);
}

template <typename T>
OutputGrads<T> vae_dg_loss_grad(const Tensor<T>& x, std::span<const int> labels,
                                const ForwardOutputs<T>& outputs, double beta, double alpha,
                                double recon_weight) {
  OutputGrads<T> g;
  g.d_x_prime = Tensor<T>(outputs.x_prime.shape);
  g.d_mu.assign(outputs.posterior.mu.size(), T(0));
  g.d_logvar.assign(outputs.posterior.logvar.size(), T(0));
  g.d_logits = Tensor<T>(outputs.logits.shape);
  if (recon_weight != 0.0) reconstruction_loss_grad(x, outputs.x_prime, recon_weight, g.d_x_prime);
  if (beta != 0.0) gaussian_kl_grad(outputs.posterior, beta, std::span<T>(g.d_mu), std::span<T>(g.d_logvar));
  if (alpha != 0.0) classification_loss_grad(outputs.logits, labels, alpha, g.d_logits);
  return g;
}

double normal_kl(double m1, double v1, double m2, double v2) {
  return 0.5 * (std::log(v2 / v1) + (v1 + (m1 - m2) * (m1 - m2)) / v2 - 1.0);
}

double LinearGaussianModel::log_evidence(double x) const {
  const double var = weight * weight + noise_var;
  const double d = x - bias;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
}

std::pair<double, double> LinearGaussianModel::posterior(double x) const {
  const double precision = 1.0 + weight * weight / noise_var;
  const double var = 1.0 / precision;
  return {var * weight * (x - bias) / noise_var, var};
}

double LinearGaussianModel::elbo(double x, double q_mean, double q_var) const {
  // E_q[(x - w z - b)^2] = (x - w m - b)^2 + w^2 v
  const double r = x - weight * q_mean - bias;
  const double expected_sq = r * r + weight * weight * q_var;
  const double expected_loglik =
      -0.5 * (std::log(2.0 * std::numbers::pi * noise_var) + expected_sq / noise_var);
  return expected_loglik - normal_kl(q_mean, q_var, 0.0, 1.0);
}

double LinearGaussianModel::kl_to_posterior(double x, double q_mean, double q_var) const {
  const auto [pm, pv] = posterior(x);
  return normal_kl(q_mean, q_var, pm, pv);
}

#define VAEDG_INSTANTIATE_LOSSES(T)                                                                     \
  template struct LatentPosterior<T>;                                                                   \
  template double gaussian_kl<T>(const LatentPosterior<T>&);                                            \
  template void gaussian_kl_grad<T>(const LatentPosterior<T>&, double, std::span<T>, std::span<T>);    \
  template double reconstruction_loss<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template void reconstruction_loss_grad<T>(const Tensor<T>&, const Tensor<T>&, double, Tensor<T>&);   \
  template double classification_loss<T>(const Tensor<T>&, std::span<const int>);                      \
  template void classification_loss_grad<T>(const Tensor<T>&, std::span<const int>, double, Tensor<T>&); \
  template std::vector<double> softmax_rows<T>(const Tensor<T>&);                                       \
  template double vae_loss<T>(const Tensor<T>&, const ForwardOutputs<T>&);                              \
  template LossBreakdown vae_dg_loss<T>(const Tensor<T>&, std::span<const int>, const ForwardOutputs<T>&, \
                                        double, double, double);                                        \
  template OutputGrads<T> vae_dg_loss_grad<T>(const Tensor<T>&, std::span<const int>,                  \
                                              const ForwardOutputs<T>&, double, double, double);

VAEDG_INSTANTIATE_LOSSES(float)
VAEDG_INSTANTIATE_LOSSES(double)

}  // namespace vaedg
