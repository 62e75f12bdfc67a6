#include "vqr/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vqr::ad {

namespace {

float evaluate(const LossBuilder& f, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<NodeId> ids;
  ids.reserve(inputs.size());
  for (const auto& t : inputs) ids.push_back(g.leaf(t, false));
  const NodeId out = f(g, ids);
  if (g.value(out).size() != 1) {
    throw ShapeError("grad_check: loss builder returned shape " + shape_str(g.shape(out)));
  }
  return g.value(out)[0];
}

}  // namespace

GradCheckResult grad_check_detailed(const LossBuilder& f, const std::vector<Tensor>& inputs,
                                    float step) {
  if (!(step > 0.0f)) throw std::invalid_argument("grad_check: step must be positive");

  Graph g;
  std::vector<NodeId> ids;
  for (const auto& t : inputs) ids.push_back(g.leaf(t, true));
  const NodeId loss = f(g, ids);
  if (g.value(loss).size() != 1) {
    throw ShapeError("grad_check: loss builder returned shape " + shape_str(g.shape(loss)));
  }
  const Gradients grads = g.backward(loss);

  GradCheckResult result;
  auto probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::vector<float> zeros(inputs[k].size(), 0.0f);
    const auto& analytic = grads.has(ids[k]) ? grads.at(ids[k]) : zeros;
    for (std::size_t j = 0; j < inputs[k].size(); ++j) {
      const float original = inputs[k].values[j];
      probe[k].values[j] = original + step;
      const double up = evaluate(f, probe);
      probe[k].values[j] = original - step;
      const double down = evaluate(f, probe);
      probe[k].values[j] = original;
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::abs(analytic[j] - numeric) / std::max(1.0, std::abs(numeric));
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = k;
        result.worst_entry = j;
      }
      ++result.entries_checked;
    }
  }
  return result;
}

double grad_check(const LossBuilder& f, const std::vector<Tensor>& inputs, float step) {
  return grad_check_detailed(f, inputs, step).max_rel_error;
}

}  // namespace vqr::ad
