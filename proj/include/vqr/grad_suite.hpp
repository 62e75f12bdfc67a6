#pragma once

// Randomized gradient-check instances: one family per differentiable
// operation plus full forward/loss passes of tiny models of each family.

#include <functional>
#include <string>
#include <vector>

#include "vqr/grad_check.hpp"
#include "vqr/rng.hpp"

namespace vqr::grad_suite {

struct Instance {
  ad::LossBuilder loss;
  std::vector<ad::Tensor> inputs;
};

struct Case {
  std::string name;
  std::function<Instance(Rng&)> make;
};

std::vector<Case> op_cases();
std::vector<Case> block_cases();

struct CaseResult {
  std::string name;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
};

// Runs `instances` random draws of each case.
std::vector<CaseResult> run(const std::vector<Case>& cases, std::size_t instances, std::uint64_t seed,
                            float step = 1e-3f);

}  // namespace vqr::grad_suite
