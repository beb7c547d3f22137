#include "refine/rollout.hpp"

#include <stdexcept>

#include "json.hpp"
#include "refine/rng.hpp"

namespace refine {

void RolloutConfig::validate() const {
  if (k < 1) throw std::invalid_argument("rollout length must satisfy k ≥ 1, got " + std::to_string(k));
  if (n < 1) throw std::invalid_argument("rollouts per position must satisfy n ≥ 1, got " + std::to_string(n));
  if (!(temperature >= 0)) throw std::invalid_argument("rollout temperature must be ≥ 0");
}

DecodeSpec RolloutConfig::decode(std::uint64_t seed) const {
  return temperature > 0 ? DecodeSpec::sample(temperature, seed) : DecodeSpec::greedy();
}

std::vector<PrefixState> build_prefix_states(const ModelParams& params, std::span<const int> ids,
                                             const ForwardOutput& full, const std::vector<std::size_t>& positions) {
  const auto& cfg = params.config;
  const bool cached = cfg.update_mode == UpdateMode::per_token_delta;
  if (cached && !full.states) throw std::invalid_argument("build_prefix_states: forward pass did not capture states");
  std::vector<PrefixState> out;
  out.reserve(positions.size());
  for (auto t : positions) {
    if (t >= ids.size()) {
      throw std::out_of_range("build_prefix_states: position " + std::to_string(t) + " outside sequence of length " +
                              std::to_string(ids.size()));
    }
    PrefixState p;
    p.pending_token = ids[t];
    p.position = t;
    if (cached) {
      p.state = DecodeState::empty(cfg);
      for (std::size_t l = 0; l < p.state.layers.size(); ++l) p.state.layers[l].fast = (*full.states)[l][t];
      p.state.position = t;
    } else {
      p.state = consume(params, ids.first(t));
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<RolloutRecord> rollout(const ModelParams& params, const PrefixState& prefix, const RolloutConfig& config,
                                   std::uint64_t seed) {
  config.validate();
  std::vector<RolloutRecord> out;
  for (int i = 0; i < config.n; ++i) {
    auto g = generate(params, prefix, config.k, config.decode(Rng::derive(seed, {static_cast<std::uint64_t>(i)})));
    RolloutRecord r;
    r.position = prefix.position;
    r.tokens = std::move(g.tokens);
    r.logprobs = std::move(g.logprobs);
    r.h_pred = std::move(g.hidden);
    out.push_back(std::move(r));
  }
  return out;
}

nx::Array<float> extract_gt_hidden(const ForwardOutput& full, std::size_t t, std::size_t k) {
  const std::size_t len = full.length();
  if (k < 1 || t + k + 1 > len) {
    throw std::out_of_range("extract_gt_hidden: rows " + std::to_string(t + 1) + ".." + std::to_string(t + k) +
                            " outside sequence of length " + std::to_string(len));
  }
  const std::size_t d = full.hidden.cols();
  const auto rows = full.hidden.data().subspan((t + 1) * d, k * d);
  return nx::Array<float>::unchecked({k, d}, std::vector<float>(rows.begin(), rows.end()));
}

std::vector<RolloutRecord> rollouts_for_sequence(const ModelParams& params, std::span<const int> ids,
                                                 const ForwardOutput& full, const std::vector<std::size_t>& positions,
                                                 const RolloutConfig& config, std::size_t seq_id, std::uint64_t seed) {
  config.validate();
  const auto prefixes = build_prefix_states(params, ids, full, positions);
  const auto k = static_cast<std::size_t>(config.k);
  std::vector<RolloutRecord> out;
  for (const auto& prefix : prefixes) {
    const std::size_t t = prefix.position;
    auto gt = extract_gt_hidden(full, t, k);
    std::vector<int> gt_tokens(ids.begin() + static_cast<long>(t + 1), ids.begin() + static_cast<long>(t + 1 + k));
    for (auto& r : rollout(params, prefix, config, Rng::derive(seed, {t}))) {
      r.seq_id = seq_id;
      r.h_gt = gt;
      r.gt_tokens = gt_tokens;
      out.push_back(std::move(r));
    }
  }
  return out;
}

void write_rollouts(std::ostream& out, const std::vector<RolloutRecord>& records, std::int64_t step) {
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["seq_id"] = r.seq_id;
    j["t"] = r.position;
    j["tokens"] = r.tokens;
    j["logprobs"] = r.logprobs;
    j["reward"] = r.reward;
    j["advantage"] = r.advantage;
    j["step"] = step;
    out << j.dump() << "\n";
  }
}

}  // namespace refine
