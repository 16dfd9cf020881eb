#pragma once

#include <array>
#include <vector>

#include "vaedg/config.hpp"
#include "vaedg/nn.hpp"

namespace vaedg {

/// Which parameter groups an update touches: {encoder, decoder, head}.
using GroupMask = std::array<bool, 3>;
inline constexpr GroupMask kAllGroups{true, true, true};

inline bool group_enabled(const GroupMask& mask, ParamGroup g) { return mask[static_cast<int>(g)]; }

/// Adam (moment decay 0.9 / 0.999, eps 1e-8) or plain SGD over a ParameterSet.
/// Adam keeps a separate step counter per group so bias correction stays
/// right when groups are updated on alternate steps.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, const ParameterSet<float>& layout);

  void step(ParameterSet<float>& params, const ParameterSet<float>& grads, const GroupMask& mask = kAllGroups);

  double learning_rate() const { return lr_; }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

 private:
  OptimizerKind kind_;
  double lr_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::array<long, 3> t_{0, 0, 0};
};

}  // namespace vaedg
