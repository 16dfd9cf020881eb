#include "vaedg/baselines.hpp"

#include <set>

namespace vaedg {

GradientVarianceState::GradientVarianceState(double decay_) : decay(decay_) {
  require(decay > 0.0 && decay < 1.0, "moving-average decay must be in (0, 1)");
}

const std::vector<double>& GradientVarianceState::update(int domain, std::span<const double> current) {
  auto& avg = ema[domain];
  if (avg.empty()) avg.assign(current.size(), 0.0);
  require(avg.size() == current.size(), "variance vector length changed between updates");
  auto& out = variances[domain];
  out.resize(avg.size());
  for (std::size_t k = 0; k < avg.size(); ++k) {
    avg[k] = decay * avg[k] + (1.0 - decay) * current[k];
    out[k] = avg[k] / (1.0 - decay);
  }
  ++updates;
  return out;
}

double fishr_penalty(const std::vector<std::vector<double>>& per_domain) {
  require(per_domain.size() >= 2, "fishr penalty needs at least 2 domains");
  const std::size_t k = per_domain.front().size();
  require(k > 0, "fishr penalty needs nonempty variance vectors");
  for (const auto& v : per_domain) require(v.size() == k, "per-domain variance vectors differ in length");
  // Pairwise form of the spread around the mean: sum_d |v_d - m|^2 = (1/D) sum_{d<e} |v_d - v_e|^2.
  // It is exactly zero for identical domains, which the mean form is not.
  const std::size_t n = per_domain.size();
  double total = 0.0;
  for (std::size_t d = 0; d < n; ++d)
    for (std::size_t e = d + 1; e < n; ++e)
      for (std::size_t i = 0; i < k; ++i) {
        const double diff = per_domain[d][i] - per_domain[e][i];
        total += diff * diff;
      }
  const double domains = static_cast<double>(n);
  return total / (domains * domains * static_cast<double>(k));
}

double fishr_penalty(const GradientVarianceState& state) {
  std::vector<std::vector<double>> v;
  for (const auto& [domain, values] : state.variances) v.push_back(values);
  return fishr_penalty(v);
}

std::vector<std::vector<double>> fishr_penalty_grad(const std::vector<std::vector<double>>& per_domain) {
  require(per_domain.size() >= 2, "fishr penalty needs at least 2 domains");
  const std::size_t k = per_domain.front().size();
  for (const auto& v : per_domain) require(v.size() == k, "per-domain variance vectors differ in length");
  const std::size_t n = per_domain.size();
  const double scale = 2.0 / (static_cast<double>(n) * static_cast<double>(n) * static_cast<double>(k));
  std::vector<std::vector<double>> grad(n, std::vector<double>(k, 0.0));
  for (std::size_t d = 0; d < n; ++d)
    for (std::size_t e = 0; e < n; ++e)
      if (e != d)
        for (std::size_t i = 0; i < k; ++i) grad[d][i] += scale * (per_domain[d][i] - per_domain[e][i]);
  return grad;
}

template <typename T>
FishrTerm<T> fishr_term(GradientVarianceState& state, const Tensor<T>& logits, const Tensor<T>& hidden,
                        std::span<const int> labels, std::span<const int> domains) {
  const int batch = logits.dim(0);
  const int classes = logits.dim(1);
  const int width = hidden.dim(1);
  require(hidden.dim(0) == batch && labels.size() == std::size_t(batch) && domains.size() == std::size_t(batch),
          "fishr inputs disagree on batch size");
  // Per-sample output-layer gradient: g = [e (x) h, e] with e = softmax - onehot.
  const std::size_t k = std::size_t(classes) * width + classes;
  const auto probs = softmax_rows(logits);
  std::vector<double> err(probs);
  for (int b = 0; b < batch; ++b) err[std::size_t(b) * classes + labels[b]] -= 1.0;
  auto sample_grad = [&](int b, std::size_t idx) {
    if (idx < std::size_t(classes) * width) {
      const std::size_t c = idx / width, j = idx % width;
      return err[std::size_t(b) * classes + c] * static_cast<double>(hidden[std::size_t(b) * width + j]);
    }
    return err[std::size_t(b) * classes + (idx - std::size_t(classes) * width)];
  };

  std::map<int, std::vector<int>> members;
  for (int b = 0; b < batch; ++b) members[domains[b]].push_back(b);
  require(members.size() >= 2, "fishr penalty needs at least 2 domains in the batch");

  std::vector<int> order;
  std::vector<std::vector<double>> means, per_domain;
  for (const auto& [domain, rows] : members) {
    const double n = static_cast<double>(rows.size());
    std::vector<double> mean(k, 0.0), sq(k, 0.0);
    for (int b : rows)
      for (std::size_t i = 0; i < k; ++i) {
        const double g = sample_grad(b, i);
        mean[i] += g / n;
        sq[i] += g * g / n;
      }
    std::vector<double> var(k);
    for (std::size_t i = 0; i < k; ++i) var[i] = sq[i] - mean[i] * mean[i];
    order.push_back(domain);
    per_domain.push_back(state.update(domain, var));
    means.push_back(std::move(mean));
  }

  FishrTerm<T> out;
  out.penalty = fishr_penalty(per_domain);
  const auto d_var = fishr_penalty_grad(per_domain);
  out.d_logits = Tensor<T>(logits.shape);
  out.d_hidden = Tensor<T>(hidden.shape);

  for (std::size_t di = 0; di < order.size(); ++di) {
    const auto& rows = members.at(order[di]);
    const double n = static_cast<double>(rows.size());
    for (int b : rows) {
      // dP/dg_i = (2/n)(g_i - mean) * dP/dvar
      std::vector<double> d_err(classes, 0.0);
      for (std::size_t idx = 0; idx < k; ++idx) {
        const double dg = 2.0 / n * (sample_grad(b, idx) - means[di][idx]) * d_var[di][idx];
        if (dg == 0.0) continue;
        if (idx < std::size_t(classes) * width) {
          const std::size_t c = idx / width, j = idx % width;
          d_err[c] += dg * static_cast<double>(hidden[std::size_t(b) * width + j]);
          out.d_hidden[std::size_t(b) * width + j] += static_cast<T>(dg * err[std::size_t(b) * classes + c]);
        } else {
          d_err[idx - std::size_t(classes) * width] += dg;
        }
      }
      // e = softmax(logits) - onehot; d softmax_c / d logit_m = p_c (delta_cm - p_m).
      double dot = 0.0;
      for (int c = 0; c < classes; ++c) dot += d_err[c] * probs[std::size_t(b) * classes + c];
      for (int m = 0; m < classes; ++m) {
        const double p = probs[std::size_t(b) * classes + m];
        out.d_logits[std::size_t(b) * classes + m] += static_cast<T>(p * (d_err[m] - dot));
      }
    }
  }
  return out;
}

template FishrTerm<float> fishr_term<float>(GradientVarianceState&, const Tensor<float>&, const Tensor<float>&,
                                            std::span<const int>, std::span<const int>);
template FishrTerm<double> fishr_term<double>(GradientVarianceState&, const Tensor<double>&, const Tensor<double>&,
                                              std::span<const int>, std::span<const int>);

WeightAverageWindow::WeightAverageWindow(long start, long end) : start_step(start), end_step(end) {
  require(start <= end, "averaging window must have start <= end");
}

WeightAverageWindow swad_window(long total_steps, double start_fraction) {
  require(start_fraction >= 0.0 && start_fraction <= 1.0, "start fraction must be in [0, 1]");
  return WeightAverageWindow(static_cast<long>(std::llround(start_fraction * total_steps)), total_steps);
}

void swad_absorb(WeightAverageWindow& window, const ParameterSet<float>& checkpoint, long step) {
  require(step >= window.start_step && step <= window.end_step,
          "checkpoint step " + std::to_string(step) + " outside averaging window [" + std::to_string(window.start_step) +
              ", " + std::to_string(window.end_step) + "]");
  if (window.count == 0) {
    window.sum = checkpoint.cast<double>();
  } else {
    require(window.sum.same_layout(checkpoint.cast<double>()), "checkpoint layout differs from earlier ones");
    for (std::size_t i = 0; i < checkpoint.size(); ++i) {
      auto& acc = window.sum[i].value.data;
      const auto& v = checkpoint[i].value.data;
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += v[j];
    }
  }
  ++window.count;
}

ParameterSet<float> swad_finalize(const WeightAverageWindow& window) {
  require(window.count > 0, "cannot average an empty window");
  ParameterSet<float> out = window.sum.cast<float>();
  const double n = static_cast<double>(window.count);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& acc = window.sum[i].value.data;
    auto& dst = out[i].value.data;
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<float>(acc[j] / n);
  }
  return out;
}

}  // namespace vaedg
