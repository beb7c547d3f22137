#include "refine/fastweight.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace refine {

namespace {

void require_finite(std::span<const float> xs, const char* what) {
  for (float x : xs) {
    if (!std::isfinite(x)) throw nx::NonFiniteError(std::string(what) + ": non-finite input");
  }
}

void require_dim(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw nx::ShapeError(std::string(what) + ": expected length " + std::to_string(want) + ", got " +
                         std::to_string(got));
  }
}

}  // namespace

FastWeightState delta_rule_step(const FastWeightState& state, std::span<const float> key,
                                std::span<const float> value, float eta) {
  const std::size_t n = state.dim();
  require_dim(key.size(), n, "delta_rule_step key");
  require_dim(value.size(), n, "delta_rule_step value");
  require_finite(key, "delta_rule_step");
  require_finite(value, "delta_rule_step");
  if (!std::isfinite(eta)) throw nx::NonFiniteError("delta_rule_step: non-finite eta");
  std::vector<float> w(state.w.data().begin(), state.w.data().end());
  kernels::chunk_update(w.data(), n, key.data(), value.data(), 1, eta);
  return FastWeightState{nx::Array<float>(state.w.shape(), std::move(w)), state.position + 1};
}

FastWeightState chunked_update_step(const FastWeightState& state, const std::vector<std::vector<float>>& keys,
                                    const std::vector<std::vector<float>>& values, float eta) {
  if (keys.empty()) throw std::invalid_argument("chunked_update_step: empty chunk");
  if (keys.size() != values.size()) {
    throw std::invalid_argument("chunked_update_step: " + std::to_string(keys.size()) + " keys but " +
                                std::to_string(values.size()) + " values");
  }
  const std::size_t n = state.dim();
  std::vector<float> kflat, vflat;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    require_dim(keys[i].size(), n, "chunked_update_step key");
    require_dim(values[i].size(), n, "chunked_update_step value");
    require_finite(keys[i], "chunked_update_step");
    require_finite(values[i], "chunked_update_step");
    kflat.insert(kflat.end(), keys[i].begin(), keys[i].end());
    vflat.insert(vflat.end(), values[i].begin(), values[i].end());
  }
  std::vector<float> w(state.w.data().begin(), state.w.data().end());
  kernels::chunk_update(w.data(), n, kflat.data(), vflat.data(), keys.size(), eta);
  return FastWeightState{nx::Array<float>(state.w.shape(), std::move(w)), state.position + keys.size()};
}

std::vector<float> apply(const FastWeightState& state, std::span<const float> query) {
  const std::size_t n = state.dim();
  require_dim(query.size(), n, "apply query");
  std::vector<float> y(n);
  kernels::apply(state.w.data().data(), n, query.data(), y.data());
  return y;
}

}  // namespace refine
