#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "refine/model.hpp"
#include "refine/selector.hpp"

namespace refine {

struct RolloutConfig {
  int k = 5;                  // tokens per rollout
  int n = 1;                  // rollouts per selected position
  double temperature = 1.0;   // 0 means greedy

  void validate() const;
  DecodeSpec decode(std::uint64_t seed) const;
};

struct RolloutRecord {
  std::size_t seq_id = 0;
  std::size_t position = 0;       // t: the rollout continues x_{<=t}
  std::vector<int> tokens;        // generated x_{t+1..t+k}
  std::vector<float> logprobs;    // under the generating policy
  nx::Array<float> h_pred;        // k x d_model
  nx::Array<float> h_gt;          // k x d_model, teacher-forced rows t+1..t+k
  std::vector<int> gt_tokens;     // x_{t+1..t+k}
  double reward = 0.0;
  double advantage = 0.0;
};

// Decoder state for continuing after each selected position. Per-token mode
// reuses the states captured in `full` (which must have been run with
// capture_states); chunked mode re-reads each prefix from scratch.
std::vector<PrefixState> build_prefix_states(const ModelParams& params, std::span<const int> ids,
                                             const ForwardOutput& full, const std::vector<std::size_t>& positions);

// n continuations of k tokens from one prefix; rollout i samples with
// Rng::derive(seed, {i}).
std::vector<RolloutRecord> rollout(const ModelParams& params, const PrefixState& prefix, const RolloutConfig& config,
                                   std::uint64_t seed);

// Rows t+1..t+k of the teacher-forced pass.
nx::Array<float> extract_gt_hidden(const ForwardOutput& full, std::size_t t, std::size_t k);

// Everything above for one sequence: prefix states at `positions`, n rollouts
// each (seeded per position and rollout index), paired with ground truth.
std::vector<RolloutRecord> rollouts_for_sequence(const ModelParams& params, std::span<const int> ids,
                                                 const ForwardOutput& full, const std::vector<std::size_t>& positions,
                                                 const RolloutConfig& config, std::size_t seq_id, std::uint64_t seed);

// One JSON object per record: {seq_id, t, tokens, logprobs, reward, advantage, step}.
void write_rollouts(std::ostream& out, const std::vector<RolloutRecord>& records, std::int64_t step);

}  // namespace refine
