#include "mmsbr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mmsbr {

bool GradCheckReport::pass() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.pass; });
}

std::string GradCheckReport::first_failure() const {
  for (const auto& e : entries)
    if (!e.pass) return e.name;
  return {};
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

LossAndGrads analytic_gradients(const ParamStore& params, const LossBuilder& build) {
  diff::Tape tape;
  BoundParams bound(tape, params, true);
  diff::Var loss = build(bound);
  tape.backward(loss);
  return {loss.value().item(), bound.grads()};
}

double evaluate_loss(const ParamStore& params, const LossBuilder& build) {
  diff::Tape tape;
  BoundParams bound(tape, params, false);
  return build(bound).value().item();
}

GradCheckReport compare_gradients(const ParamStore& params, const LossBuilder& build,
                                  const ParamStore& analytic, double h, double tolerance) {
  GradCheckReport report;
  report.tolerance = tolerance;
  ParamStore probe = params;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    GradCheckEntry entry;
    entry.name = probe[p].name;
    const Tensor& grad = analytic.at(entry.name);
    Tensor& value = probe[p].value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      value[i] = orig + h;
      const double up = evaluate_loss(probe, build);
      value[i] = orig - h;
      const double down = evaluate_loss(probe, build);
      value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(grad[i], numeric);
      if (err > entry.max_rel_error || i == 0) {
        entry.max_rel_error = std::max(entry.max_rel_error, err);
        if (err >= entry.max_rel_error) {
          entry.worst_index = i;
          entry.analytic = grad[i];
          entry.numeric = numeric;
        }
      }
    }
    entry.pass = entry.max_rel_error <= tolerance;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

GradCheckReport finite_diff_check(const ParamStore& params, const LossBuilder& build, double h,
                                  double tolerance) {
  const LossAndGrads lg = analytic_gradients(params, build);
  return compare_gradients(params, build, lg.grads, h, tolerance);
}

}  // namespace mmsbr
