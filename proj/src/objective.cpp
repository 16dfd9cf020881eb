#include "vaedg/objective.hpp"

namespace vaedg {

template <typename T>
LossBreakdown compute_objective(const ExperimentConfig& config, const VaeModel<T>& model, const Tensor<T>& images,
                                std::span<const int> labels, std::span<const int> domains, long step, Rng& rng,
                                ObjectiveState<T>& state, ParameterSet<T>* grads) {
  ForwardTape<T> tape;
  ForwardTape<T>* tp = grads ? &tape : nullptr;

  if (uses_vae_objective(config.algorithm)) {
    LatentSampling<T> sampling{config.latent_mode, &rng, state.frozen_eps};
    const auto out = model.forward(images, sampling, tp, true);
    const auto loss = vae_dg_loss(images, labels, out, config.effective_beta(), config.alpha, config.recon_weight);
    if (grads) {
      const auto g = vae_dg_loss_grad(images, labels, out, config.effective_beta(), config.alpha, config.recon_weight);
      model.backward(tape, g, *grads);
    }
    return loss;
  }

  // Classifier-only baselines consume the deterministic encoder output.
  ForwardTape<T> local;
  const auto out = model.forward(images, LatentSampling<T>{LatentMode::fixed_mu, nullptr, {}}, &local, false);
  const double cls = erm_step_loss(out.logits, labels);
  OutputGrads<T> g;
  if (grads) {
    g.d_logits = Tensor<T>(out.logits.shape);
    classification_loss_grad(out.logits, labels, 1.0, g.d_logits);
  }

  if (!uses_fishr(config.algorithm)) {
    if (grads) model.backward(local, g, *grads);
    return LossBreakdown::compose(0.0, 0.0, cls, 0.0, 1.0, 0.0);
  }

  const double weight = step >= config.fishr_warmup ? config.fishr_lambda : 0.0;
  auto term = fishr_term(state.fishr, out.logits, local.head_hidden, labels, domains);
  if (grads) {
    const T w = static_cast<T>(weight);
    for (std::size_t i = 0; i < g.d_logits.size(); ++i) g.d_logits[i] += w * term.d_logits[i];
    for (auto& v : term.d_hidden.data) v *= w;
    model.backward(local, g, *grads, &term.d_hidden);
  }
  return LossBreakdown::compose(0.0, 0.0, cls, 0.0, 1.0, 0.0, term.penalty, weight);
}

template LossBreakdown compute_objective<float>(const ExperimentConfig&, const VaeModel<float>&, const Tensor<float>&,
                                                std::span<const int>, std::span<const int>, long, Rng&,
                                                ObjectiveState<float>&, ParameterSet<float>*);
template LossBreakdown compute_objective<double>(const ExperimentConfig&, const VaeModel<double>&,
                                                 const Tensor<double>&, std::span<const int>, std::span<const int>,
                                                 long, Rng&, ObjectiveState<double>&, ParameterSet<double>*);

}  // namespace vaedg
