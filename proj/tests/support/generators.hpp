#pragma once

// Seeded generators for property tests.

#include <cstdint>
#include <vector>

#include "vaedg/losses.hpp"
#include "vaedg/rng.hpp"
#include "vaedg/tensor.hpp"

namespace gen {

inline constexpr int kCases = 50;

inline vaedg::Tensor<double> uniform_tensor(vaedg::Rng& rng, std::vector<int> shape, double lo = 0.0, double hi = 1.0) {
  vaedg::Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline vaedg::LatentPosterior<double> posterior(vaedg::Rng& rng, int rows, int dim) {
  vaedg::LatentPosterior<double> p(rows, dim);
  for (auto& v : p.mu) v = rng.uniform(-3.0, 3.0);
  for (auto& v : p.logvar) v = rng.uniform(-4.0, 3.0);
  return p;
}

inline std::vector<int> labels(vaedg::Rng& rng, int n, int classes) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.below(classes));
  return y;
}

/// Random outputs for a batch of `b` images of `pixels` entries.
inline vaedg::ForwardOutputs<double> outputs(vaedg::Rng& rng, int b, int pixels, int latent, int classes) {
  vaedg::ForwardOutputs<double> o;
  o.x_prime = uniform_tensor(rng, {b, 1, 1, pixels});
  o.posterior = posterior(rng, b, latent);
  o.z = vaedg::Tensor<double>({b, latent});
  for (auto& v : o.z.data) v = rng.normal();
  o.logits = uniform_tensor(rng, {b, classes}, -5.0, 5.0);
  return o;
}

}  // namespace gen
