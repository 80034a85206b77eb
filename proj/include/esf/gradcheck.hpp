#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "esf/autodiff.hpp"
#include "esf/tensor.hpp"

namespace esf {

struct GradCheckOptions {
  double step = 1e-5;             // central difference half-width
  double tolerance = 1e-4;        // on the relative error below
  double denominator_floor = 1e-3;
  std::size_t entries_per_input = 16;  // sampled coordinates per input tensor
  int refinements = 2;  // retries at step/10, step/100 for entries above tolerance
};

/// Relative error |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor);

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  std::size_t entries = 0;
  std::size_t refined = 0;  // entries that needed a smaller step
  std::string worst;  // "<input>[<flat index>]" of the largest error
  bool passed = false;
};

/// Returns the scalar loss at `inputs`; when `grads` is non-null it is filled
/// with one analytic gradient per input.
using Objective =
    std::function<double(const std::vector<Tensor<double>>& inputs, std::vector<Tensor<double>>* grads)>;

/// Builds the output of an expression from leaf variables on a fresh tape.
using Expression = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Objective sum(expression(inputs) * R) for a fixed random R drawn from `seed`.
Objective projected_objective(Expression expression, std::uint64_t seed);

/// Compares analytic gradients against central differences on sampled
/// coordinates of every input.
GradCheckResult check_gradient(const std::string& name, const Objective& objective,
                               const std::vector<Tensor<double>>& inputs,
                               const std::vector<std::string>& input_names, std::mt19937_64& rng,
                               const GradCheckOptions& options = {});

/// Every differentiable primitive, including wavelet and spectral ops.
std::vector<GradCheckResult> gradcheck_ops(std::uint64_t seed, const GradCheckOptions& options = {});

/// Stem, spatial block, frequency block and the full network at base scale 32.
std::vector<GradCheckResult> gradcheck_blocks(std::uint64_t seed, const GradCheckOptions& options = {});

std::vector<GradCheckResult> gradcheck_all(std::uint64_t seed, const GradCheckOptions& options = {});

}  // namespace esf
