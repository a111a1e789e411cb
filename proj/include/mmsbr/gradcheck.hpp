#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mmsbr/params.hpp"

namespace mmsbr {

/// Builds a scalar loss on the tape owned by `bound`. Must be deterministic.
using LossBuilder = std::function<diff::Var(const BoundParams& bound)>;

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // values at worst_index
  double numeric = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  double tolerance = 0.0;
  std::vector<GradCheckEntry> entries;

  bool pass() const;
  /// Name of the first failing parameter, empty when all pass.
  std::string first_failure() const;
};

/// |a - n| / max(1e-8, |a| + |n|)
double relative_error(double analytic, double numeric);

struct LossAndGrads {
  double loss = 0.0;
  ParamStore grads;
};

LossAndGrads analytic_gradients(const ParamStore& params, const LossBuilder& build);
double evaluate_loss(const ParamStore& params, const LossBuilder& build);

/// Central differences with step h against the supplied analytic gradients.
GradCheckReport compare_gradients(const ParamStore& params, const LossBuilder& build,
                                  const ParamStore& analytic, double h, double tolerance);

GradCheckReport finite_diff_check(const ParamStore& params, const LossBuilder& build, double h = 1e-5,
                                  double tolerance = 1e-3);

}  // namespace mmsbr
