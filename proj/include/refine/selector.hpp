#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refine/numerics/array.hpp"
#include "refine/rng.hpp"

namespace refine {

struct EntropyProfile {
  std::vector<double> raw;       // H[t]: entropy of the next-token distribution at row t, in nats
  std::vector<double> smoothed;  // empty until smooth_entropy runs
  int kernel = 1;

  std::size_t size() const { return raw.size(); }
};

enum class SelectionStrategy { entropy_weighted, uniform, argmax_entropy, argmin_entropy };

const char* to_string(SelectionStrategy s);
// Accepts the canonical names plus the short forms "argmax" / "argmin".
SelectionStrategy selection_strategy_from_string(const std::string& s);

struct SelectionConfig {
  int chunks = 8;     // c
  double tau = 1.0;   // softmax temperature over entropies
  SelectionStrategy strategy = SelectionStrategy::entropy_weighted;
  int pool_kernel = 0;  // 0 means "same as the rollout length"

  void validate() const;
};

struct SelectedPositions {
  std::vector<std::size_t> positions;  // one per chunk, increasing
  std::vector<double> probabilities;   // probability the chosen position had within its chunk
};

// Row-wise entropy of softmax(logits) with 64-bit accumulation.
EntropyProfile token_entropy(const nx::Array<float>& logits);
double row_entropy(const float* logits, std::size_t n);

// Fills `smoothed` with a truncated moving average of width 2*floor(kernel/2)+1.
EntropyProfile smooth_entropy(EntropyProfile profile, int kernel);

struct Chunk {
  std::size_t begin = 0;
  std::size_t end = 0;             // exclusive
  std::size_t candidate_end = 0;   // exclusive bound of positions with k tokens left
};

// Equal-length contiguous chunks with the remainder in the last one.
std::vector<Chunk> partition_chunks(std::size_t length, int chunks, int rollout_len);

// Selection probabilities over one chunk's candidates under `strategy`.
std::vector<double> candidate_probabilities(const std::vector<double>& entropies, const Chunk& chunk,
                                            const SelectionConfig& config);

// One rollout position per chunk. Uses the smoothed entropies (smoothing with
// the configured kernel first if the profile has none yet).
SelectedPositions sample_positions(const EntropyProfile& profile, const SelectionConfig& config, int rollout_len,
                                   Rng& rng);
SelectedPositions sample_positions(const EntropyProfile& profile, const SelectionConfig& config, int rollout_len,
                                   std::uint64_t seed);

}  // namespace refine
