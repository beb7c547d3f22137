#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "refine/numerics/tape.hpp"

namespace refine::nx {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Builds a scalar on `tape` from the tracked parameter vector.
template <typename T>
using ScalarFn = std::function<Var<T>(Tape<T>&, Var<T>)>;

template <typename T>
T evaluate_scalar(const ScalarFn<T>& f, const Array<T>& params) {
  Tape<T> tape;
  auto out = f(tape, tape.constant(params));
  const T v = out.value().item();
  if (!std::isfinite(v)) throw NonFiniteError("finite_diff_check: objective is not finite");
  return v;
}

// Compares the tape gradient of `f` with central differences at `step`.
// Relative error per coordinate is |analytic - numeric| / (|numeric| + 1e-8).
template <typename T>
GradCheckResult finite_diff_check_detailed(const ScalarFn<T>& f, const Array<T>& params, double step) {
  if (!(step > 0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  Array<T> analytic;
  {
    Tape<T> tape;
    auto p = tape.leaf(params);
    auto out = f(tape, p);
    if (!std::isfinite(out.value().item())) throw NonFiniteError("finite_diff_check: objective is not finite");
    analytic = tape.backward(out)[p];
  }
  GradCheckResult res;
  Array<T> probe = params;
  auto probe_data = probe.mutable_data();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T orig = probe_data[i];
    probe_data[i] = static_cast<T>(orig + step);
    const double up = evaluate_scalar(f, probe);
    probe_data[i] = static_cast<T>(orig - step);
    const double down = evaluate_scalar(f, probe);
    probe_data[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double rel = std::abs(static_cast<double>(analytic[i]) - numeric) / (std::abs(numeric) + 1e-8);
    if (rel > res.max_rel_error || i == 0) {
      res.max_rel_error = std::max(res.max_rel_error, rel);
      if (rel >= res.max_rel_error) {
        res.worst_index = i;
        res.analytic_at_worst = analytic[i];
        res.numeric_at_worst = numeric;
      }
    }
  }
  return res;
}

template <typename T>
double finite_diff_check(const ScalarFn<T>& f, const Array<T>& params, double step) {
  return finite_diff_check_detailed(f, params, step).max_rel_error;
}

}  // namespace refine::nx
