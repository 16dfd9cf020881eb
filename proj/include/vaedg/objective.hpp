#pragma once

#include <span>

#include "vaedg/baselines.hpp"
#include "vaedg/config.hpp"
#include "vaedg/model.hpp"

namespace vaedg {

/// Per-run state the objectives carry between steps.
template <typename T>
struct ObjectiveState {
  GradientVarianceState fishr;
  /// Noise vector reused by LatentMode::frozen_noise.
  std::vector<T> frozen_eps;
};

/// Loss (and, when grads is non-null, accumulated parameter gradients) of one
/// training step for the configured algorithm:
///   vae_dg, vae_dg_swad: recon_weight*recon + beta*kl + alpha*cls
///   erm, swad:           cls on z = mu, decoder unused
///   fishr, drgen:        cls + w*penalty, w = fishr_lambda once step >= fishr_warmup
template <typename T>
LossBreakdown compute_objective(const ExperimentConfig& config, const VaeModel<T>& model, const Tensor<T>& images,
                                std::span<const int> labels, std::span<const int> domains, long step, Rng& rng,
                                ObjectiveState<T>& state, ParameterSet<T>* grads);

}  // namespace vaedg
