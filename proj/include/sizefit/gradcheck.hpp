#pragma once

// Central-difference gradient checks for every tensor op, loss and the two
// networks. Runs in 64-bit regardless of the process-wide GEMM precision.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "sizefit/rng.hpp"
#include "sizefit/tensor.hpp"

namespace sizefit::gradcheck {

using tensor::Tape;
using tensor::Tensor;
using tensor::Var;

struct Options {
  int instances_per_case = 4;
  std::uint64_t seed = 1;
  double step = 1e-5;
  int max_coords = 24;  // coordinates probed per input tensor
};

/// Relative error |a - n| / max(|a|, |n|, kErrorFloor).
inline constexpr double kErrorFloor = 1e-3;
double relative_error(double analytic, double numeric);

struct Probe {
  double max_rel_error = 0.0;
  int coords = 0;
  int kinks = 0;  // coordinates skipped because one-sided slopes disagree
};

using Function = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Checks d/d(inputs) of sum(w * f(inputs)) for a random weighting w.
/// probed lists the input indices to perturb (all when empty).
Probe check(const Function& f, const std::vector<Tensor>& inputs, Rng& rng, const Options& opt = {},
            const std::vector<std::size_t>& probed = {});

struct CaseResult {
  std::string name;
  int instances = 0;
  int coords = 0;
  int kinks = 0;
  double max_rel_error = 0.0;
};

struct Report {
  std::vector<CaseResult> cases;
  int instances = 0;
  double max_rel_error = 0.0;
  double seconds = 0.0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

Report run_suite(const Options& opt = {});
nlohmann::json to_json(const Report& r);

}  // namespace sizefit::gradcheck
