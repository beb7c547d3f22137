#pragma once

// Template definitions for trainer.hpp.

namespace refine {

template <typename T>
nx::Var<T> ntp_loss_tape(const ModelConfig& cfg, std::span<const nx::Var<T>> p, std::span<const int> ids,
                         std::span<const std::uint8_t> mask) {
  if (ids.size() < 2) throw std::invalid_argument("ntp_loss: sequence needs at least 2 tokens");
  const std::size_t targets = ids.size() - 1;
  if (!mask.empty() && mask.size() != targets) {
    throw std::invalid_argument("ntp_loss: mask has " + std::to_string(mask.size()) + " entries for " +
                                std::to_string(targets) + " targets");
  }
  std::vector<int> rows, tgt;
  for (std::size_t t = 0; t < targets; ++t) {
    if (mask.empty() || mask[t]) {
      rows.push_back(static_cast<int>(t));
      tgt.push_back(ids[t + 1]);
    }
  }
  if (rows.empty()) throw std::invalid_argument("ntp_loss: every target is masked");
  // Only rows up to the last kept target are needed.
  const auto needed = static_cast<std::size_t>(rows.back()) + 1;
  auto out = forward_tape<T>(cfg, p, ids.first(needed));
  auto lp = nx::log_softmax_rows(out.logits);
  nx::Var<T> picked;
  if (rows.size() == needed) {
    picked = nx::pick(lp, std::span<const int>(tgt));
  } else {
    std::vector<nx::Var<T>> parts;
    for (int r : rows) parts.push_back(nx::slice_rows(lp, static_cast<std::size_t>(r), static_cast<std::size_t>(r) + 1));
    picked = nx::pick(nx::concat_rows(parts), std::span<const int>(tgt));
  }
  return nx::scale(nx::mean(picked), T{-1});
}

template <typename T>
nx::Var<T> record_logprobs_tape(const ModelConfig& cfg, std::span<const nx::Var<T>> p, std::span<const int> ids,
                                const RolloutRecord& record, double temperature) {
  const std::size_t t = record.position, k = record.tokens.size();
  if (k == 0 || t >= ids.size()) throw std::invalid_argument("record_logprobs: malformed rollout record");
  std::vector<int> seq(ids.begin(), ids.begin() + static_cast<long>(t + 1));
  seq.insert(seq.end(), record.tokens.begin(), record.tokens.end());
  // The last generated token is never read, so it is not fed.
  seq.pop_back();
  auto out = forward_tape<T>(cfg, p, seq);
  auto logits = nx::slice_rows(out.logits, t, t + k);
  if (temperature != 1.0) logits = nx::scale(logits, static_cast<T>(static_cast<float>(1.0 / temperature)));
  return nx::pick(nx::log_softmax_rows(logits), std::span<const int>(record.tokens));
}

template <typename T>
nx::Var<T> surrogate_sum_tape(const ModelConfig& cfg, std::span<const nx::Var<T>> p, const TrainUnit& unit,
                              double clip_ratio) {
  std::vector<nx::Var<T>> parts;
  for (const auto& r : unit.records) {
    auto lp = record_logprobs_tape<T>(cfg, p, unit.ids, r, unit.score_temperature);
    std::vector<T> old(r.logprobs.begin(), r.logprobs.end());
    std::vector<T> adv(r.tokens.size(), static_cast<T>(r.advantage));
    parts.push_back(nx::sum(nx::clipped_surrogate(lp, std::span<const T>(old), std::span<const T>(adv), clip_ratio)));
  }
  if (parts.empty()) throw std::invalid_argument("surrogate: unit has no rollout records");
  auto total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) total = nx::add(total, parts[i]);
  return total;
}

}  // namespace refine
