#include "vaedg/optimizer.hpp"

#include <cmath>

namespace vaedg {

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, const ParameterSet<float>& layout)
    : kind_(kind), lr_(learning_rate) {
  require(learning_rate > 0.0, "learning rate must be positive");
  if (kind_ == OptimizerKind::adam) {
    for (const auto& p : layout) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }
}

void Optimizer::step(ParameterSet<float>& params, const ParameterSet<float>& grads, const GroupMask& mask) {
  require(params.same_layout(grads), "gradient layout does not match parameters");
  std::array<double, 3> c1{}, c2{};
  for (int g = 0; g < 3; ++g) {
    if (!mask[g]) continue;
    ++t_[g];
    c1[g] = 1.0 - std::pow(kBeta1, static_cast<double>(t_[g]));
    c2[g] = 1.0 - std::pow(kBeta2, static_cast<double>(t_[g]));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const int g = static_cast<int>(params[i].group);
    if (!mask[g]) continue;
    auto& w = params[i].value.data;
    const auto& d = grads[i].value.data;
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t j = 0; j < w.size(); ++j) w[j] = static_cast<float>(w[j] - lr_ * d[j]);
      continue;
    }
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * d[j];
      v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * double(d[j]) * d[j];
      const double mh = m[j] / c1[g];
      const double vh = v[j] / c2[g];
      w[j] = static_cast<float>(w[j] - lr_ * mh / (std::sqrt(vh) + kEpsilon));
    }
  }
}

}  // namespace vaedg
