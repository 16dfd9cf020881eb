#pragma once

#include <map>
#include <span>
#include <vector>

#include "vaedg/losses.hpp"
#include "vaedg/nn.hpp"

namespace vaedg {

/// ERM objective: mean cross-entropy of the pooled batch.
template <typename T>
double erm_step_loss(const Tensor<T>& logits, std::span<const int> labels) {
  return classification_loss(logits, labels);
}

/// Per-domain moving averages of the variance of per-sample gradients of the
/// classifier's output layer.
struct GradientVarianceState {
  double decay = 0.95;
  long updates = 0;
  /// Raw exponential moving averages, starting from zero.
  std::map<int, std::vector<double>> ema;
  /// ema / (1 - decay): the values the penalty compares. A unit change in the
  /// current batch variance moves these by one, independent of decay.
  std::map<int, std::vector<double>> variances;

  explicit GradientVarianceState(double decay_ = 0.95);
  /// Folds the current batch variance of one domain into its average and
  /// returns the updated entry of `variances`.
  const std::vector<double>& update(int domain, std::span<const double> current);
};

/// Mean over domains of the mean squared difference between each domain's
/// variance vector and the cross-domain mean vector.
double fishr_penalty(const std::vector<std::vector<double>>& per_domain);
double fishr_penalty(const GradientVarianceState& state);

/// d(fishr_penalty)/d(per_domain[d][k]).
std::vector<std::vector<double>> fishr_penalty_grad(const std::vector<std::vector<double>>& per_domain);

template <typename T>
struct FishrTerm {
  double penalty = 0.0;
  Tensor<T> d_logits;  // [B, C]
  Tensor<T> d_hidden;  // [B, H], w.r.t. the output layer's input
};

/// Computes per-sample gradients of the cross-entropy w.r.t. the output
/// layer (weights and bias) for logits = hidden W^T + b, their per-domain
/// variance, folds it into `state`, and returns the penalty with its
/// gradients w.r.t. logits and hidden (unscaled by any penalty weight).
template <typename T>
FishrTerm<T> fishr_term(GradientVarianceState& state, const Tensor<T>& logits, const Tensor<T>& hidden,
                        std::span<const int> labels, std::span<const int> domains);

/// Running parameter sum over a step window [start_step, end_step].
struct WeightAverageWindow {
  long start_step = 0;
  long end_step = 0;
  ParameterSet<double> sum;
  long count = 0;

  WeightAverageWindow() = default;
  WeightAverageWindow(long start, long end);
};

/// Window covering the final (1 - start_fraction) of training.
WeightAverageWindow swad_window(long total_steps, double start_fraction);

void swad_absorb(WeightAverageWindow& window, const ParameterSet<float>& checkpoint, long step);
/// Elementwise mean of the absorbed parameters.
ParameterSet<float> swad_finalize(const WeightAverageWindow& window);

}  // namespace vaedg
