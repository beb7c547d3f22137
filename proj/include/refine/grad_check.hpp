#pragma once

#include <cstdint>

#include "refine/model.hpp"
#include "refine/numerics/gradcheck.hpp"

namespace refine {

struct ToyGradCheck {
  nx::GradCheckResult ntp;       // next-token loss alone
  nx::GradCheckResult combined;  // NTP plus the clipped-surrogate term
  double seconds = 0;

  bool passed(double tolerance = 1e-2) const {
    return ntp.max_rel_error < tolerance && combined.max_rel_error < tolerance;
  }
};

// Finite-difference check in float64 on a 2-layer model (d_model 16, d_fast 8)
// over an 8-token sequence with byte vocabulary.
ToyGradCheck toy_grad_check(std::uint64_t seed = 0, UpdateMode mode = UpdateMode::per_token_delta);

}  // namespace refine
