#include "refine/selector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace refine {

const char* to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::entropy_weighted: return "entropy_weighted";
    case SelectionStrategy::uniform: return "uniform";
    case SelectionStrategy::argmax_entropy: return "argmax_entropy";
    case SelectionStrategy::argmin_entropy: return "argmin_entropy";
  }
  return "?";
}

SelectionStrategy selection_strategy_from_string(const std::string& s) {
  if (s == "entropy_weighted") return SelectionStrategy::entropy_weighted;
  if (s == "uniform") return SelectionStrategy::uniform;
  if (s == "argmax_entropy" || s == "argmax") return SelectionStrategy::argmax_entropy;
  if (s == "argmin_entropy" || s == "argmin") return SelectionStrategy::argmin_entropy;
  throw std::invalid_argument("unknown selection strategy '" + s +
                              "' (expected entropy_weighted, uniform, argmax or argmin)");
}

void SelectionConfig::validate() const {
  if (chunks < 1) throw std::invalid_argument("chunks must satisfy c ≥ 1, got " + std::to_string(chunks));
  if (!(tau > 0) || !std::isfinite(tau)) throw std::invalid_argument("tau must be a finite value > 0");
  if (pool_kernel < 0) throw std::invalid_argument("pool_kernel must be ≥ 1 (or 0 for the rollout length)");
}

double row_entropy(const float* logits, std::size_t n) {
  double mx = logits[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max<double>(mx, logits[j]);
  double z = 0, s = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = logits[j] - mx;
    const double e = std::exp(d);
    z += e;
    s += e * d;
  }
  // H = log z - E[d]
  const double h = std::log(z) - s / z;
  return std::clamp(h, 0.0, std::log(static_cast<double>(n)));
}

EntropyProfile token_entropy(const nx::Array<float>& logits) {
  if (logits.rank() != 2) throw nx::ShapeError("token_entropy: expected T x V logits, got " + nx::shape_str(logits.shape()));
  EntropyProfile p;
  const std::size_t rows = logits.shape()[0], v = logits.shape()[1];
  p.raw.resize(rows);
  for (std::size_t t = 0; t < rows; ++t) p.raw[t] = row_entropy(logits.data().data() + t * v, v);
  return p;
}

EntropyProfile smooth_entropy(EntropyProfile profile, int kernel) {
  if (kernel < 1) throw std::invalid_argument("smooth_entropy: kernel must be ≥ 1");
  const std::size_t n = profile.raw.size();
  const std::size_t half = static_cast<std::size_t>(kernel / 2);
  profile.smoothed.assign(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t lo = t >= half ? t - half : 0;
    const std::size_t hi = std::min(n, t + half + 1);
    double s = 0;
    for (std::size_t i = lo; i < hi; ++i) s += profile.raw[i];
    profile.smoothed[t] = s / static_cast<double>(hi - lo);
  }
  profile.kernel = kernel;
  return profile;
}

std::vector<Chunk> partition_chunks(std::size_t length, int chunks, int rollout_len) {
  if (chunks < 1) throw std::invalid_argument("chunks must satisfy c ≥ 1");
  if (rollout_len < 1) throw std::invalid_argument("rollout length must satisfy k ≥ 1");
  const auto c = static_cast<std::size_t>(chunks);
  const auto k = static_cast<std::size_t>(rollout_len);
  if (length < c * (k + 1)) {
    throw std::invalid_argument("sequence of length " + std::to_string(length) + " is too short for c=" +
                                std::to_string(c) + " chunks with k=" + std::to_string(k) +
                                " rollout tokens (need ≥ c·(k+1)); reduce c or k");
  }
  const std::size_t base = length / c;
  const std::size_t last_candidate = length - k;  // positions t < length - k have k tokens after them
  std::vector<Chunk> out(c);
  for (std::size_t i = 0; i < c; ++i) {
    out[i].begin = i * base;
    out[i].end = i + 1 == c ? length : (i + 1) * base;
    out[i].candidate_end = std::min(out[i].end, last_candidate);
    if (out[i].candidate_end <= out[i].begin) {
      throw std::invalid_argument("chunk " + std::to_string(i) + " has no position with " + std::to_string(k) +
                                  " tokens after it; reduce c or k");
    }
  }
  return out;
}

std::vector<double> candidate_probabilities(const std::vector<double>& entropies, const Chunk& chunk,
                                            const SelectionConfig& config) {
  const std::size_t n = chunk.candidate_end - chunk.begin;
  std::vector<double> p(n, 0.0);
  auto h = [&](std::size_t i) { return entropies[chunk.begin + i]; };
  switch (config.strategy) {
    case SelectionStrategy::entropy_weighted: {
      double mx = h(0);
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, h(i));
      double z = 0;
      for (std::size_t i = 0; i < n; ++i) z += (p[i] = std::exp((h(i) - mx) / config.tau));
      for (auto& x : p) x /= z;
      break;
    }
    case SelectionStrategy::uniform:
      std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(n));
      break;
    case SelectionStrategy::argmax_entropy:
    case SelectionStrategy::argmin_entropy: {
      const bool want_max = config.strategy == SelectionStrategy::argmax_entropy;
      std::size_t best = 0;
      for (std::size_t i = 1; i < n; ++i) {
        if (want_max ? h(i) > h(best) : h(i) < h(best)) best = i;
      }
      p[best] = 1.0;
      break;
    }
  }
  return p;
}

SelectedPositions sample_positions(const EntropyProfile& profile, const SelectionConfig& config, int rollout_len,
                                   Rng& rng) {
  config.validate();
  const EntropyProfile* src = &profile;
  EntropyProfile smoothed;
  if (profile.smoothed.size() != profile.raw.size()) {
    smoothed = smooth_entropy(profile, config.pool_kernel > 0 ? config.pool_kernel : rollout_len);
    src = &smoothed;
  }
  const auto chunks = partition_chunks(profile.size(), config.chunks, rollout_len);
  SelectedPositions out;
  for (const auto& chunk : chunks) {
    const auto p = candidate_probabilities(src->smoothed, chunk, config);
    std::size_t pick = 0;
    if (config.strategy == SelectionStrategy::entropy_weighted || config.strategy == SelectionStrategy::uniform) {
      // Inverse CDF; falls back to the last candidate on rounding shortfall.
      const double u = rng.uniform();
      double acc = 0;
      pick = p.size() - 1;
      for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    }
    out.positions.push_back(chunk.begin + pick);
    out.probabilities.push_back(p[pick]);
  }
  return out;
}

SelectedPositions sample_positions(const EntropyProfile& profile, const SelectionConfig& config, int rollout_len,
                                   std::uint64_t seed) {
  Rng rng(seed);
  return sample_positions(profile, config, rollout_len, rng);
}

}  // namespace refine
