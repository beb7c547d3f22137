#include "refine/grad_check.hpp"

#include <chrono>

#include "refine/data.hpp"
#include "refine/reward.hpp"
#include "refine/trainer.hpp"

namespace refine {

ToyGradCheck toy_grad_check(std::uint64_t seed, UpdateMode mode) {
  const auto start = std::chrono::steady_clock::now();
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.d_fast = 8;
  cfg.n_layers = 2;
  cfg.update_mode = mode;
  cfg.chunk_size = 4;
  cfg.max_seq_len = 16;
  const auto pf = init_params(cfg, seed);

  TrainUnit unit;
  Rng rng(Rng::derive(seed, {1}));
  for (int i = 0; i < 8; ++i) unit.ids.push_back(static_cast<int>(rng.below(kVocabSize)));
  const auto full = forward_sequence(pf, unit.ids, mode == UpdateMode::per_token_delta);
  RolloutConfig rc;
  rc.k = 3;
  rc.n = 2;
  unit.records = rollouts_for_sequence(pf, unit.ids, full, {2}, rc, 0, Rng::derive(seed, {2}));
  for (auto& r : unit.records) score(RewardKind::hybrid, r);
  standardize_advantages(unit.records);
  // Pushes one token onto the clipped branch so both branches are exercised.
  unit.records[0].logprobs[1] -= 0.5f;
  const std::size_t n_tok = rollout_token_count({unit});

  const auto p = pf.cast<double>();
  nx::ScalarFn<double> ntp = [&](nx::Tape<double>&, nx::Var<double> flat) {
    return ntp_loss_tape<double>(cfg, unflatten(flat, p), unit.ids, {});
  };
  nx::ScalarFn<double> combined = [&](nx::Tape<double>&, nx::Var<double> flat) {
    auto vars = unflatten(flat, p);
    auto sft = ntp_loss_tape<double>(cfg, vars, unit.ids, {});
    auto sur = surrogate_sum_tape<double>(cfg, vars, unit, 0.2);
    return nx::add(sft, nx::scale(sur, -0.2 / static_cast<double>(n_tok)));
  };
  ToyGradCheck res;
  const auto flat = p.flatten();
  res.ntp = nx::finite_diff_check_detailed(ntp, flat, 1e-3);
  res.combined = nx::finite_diff_check_detailed(combined, flat, 1e-3);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace refine
