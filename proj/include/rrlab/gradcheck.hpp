#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "rrlab/tape.hpp"

namespace rrlab {

/// Builds a scalar from leaves recorded on `tape` (one per input tensor).
using GraphFn = std::function<ad::Var<double>(ad::Tape<double>& tape, const std::vector<ad::Var<double>>& inputs)>;

struct GradcheckCase {
  std::string name;
  std::string group;  ///< "primitive" or "loss"
  double tolerance = 1e-4;
  GraphFn graph;
  std::vector<Tensor<double>> inputs;
  std::size_t per_tensor = 0;  ///< coordinates probed per input tensor; 0 = all
};

struct GradcheckResult {
  std::string name;
  std::string group;
  double max_rel_error = 0.0;  ///< max |analytic - numeric| / max |numeric|
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};

/// Central differences with step h against one reverse pass.
GradcheckResult check_gradient(const GradcheckCase& c, double h = 1e-6, std::uint64_t seed = 0);

/// Every differentiable primitive, each wrapped as sum(w * f(x)) with a fixed
/// random w; inputs keep away from kinks and ties.
std::vector<GradcheckCase> primitive_cases(std::uint64_t seed = 1);
/// CE, VAT, ROIreg, ENT, ROIaug and their sum, differentiated end to end
/// through a float64 Conv-Tiny with respect to its parameters.
std::vector<GradcheckCase> loss_cases(std::uint64_t seed = 1, std::size_t per_tensor = 24);
/// A scale primitive whose backward is off by 10%; must fail.
GradcheckCase corrupted_case();

std::vector<GradcheckResult> run_gradcheck(const std::vector<GradcheckCase>& cases, std::uint64_t seed = 0);
void print_gradcheck_report(std::ostream& os, const std::vector<GradcheckResult>& results);

}  // namespace rrlab
