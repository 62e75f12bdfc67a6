#pragma once

#include <functional>
#include <span>
#include <vector>

#include "vqr/autodiff.hpp"

namespace vqr::ad {

// Builds a scalar loss from leaf nodes holding the supplied inputs.
using LossBuilder = std::function<NodeId(Graph&, std::span<const NodeId>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_entry = 0;
  std::size_t entries_checked = 0;
};

// Compares backward() against central differences for every entry of every
// input. Relative error is |analytic - numeric| / max(1, |numeric|).
GradCheckResult grad_check_detailed(const LossBuilder& f, const std::vector<Tensor>& inputs,
                                    float step);

double grad_check(const LossBuilder& f, const std::vector<Tensor>& inputs, float step);

}  // namespace vqr::ad
