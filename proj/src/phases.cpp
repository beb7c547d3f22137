#include "refine/phases.hpp"

#include <spdlog/spdlog.h>

#include <stdexcept>

#include "refine/checkpoint.hpp"
#include "refine/eval.hpp"

namespace refine {

namespace {

// Tags of the independent random streams.
constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kUnitStream = 2;
constexpr std::uint64_t kSelectStream = 3;
constexpr std::uint64_t kRolloutStream = 4;
constexpr std::uint64_t kInnerStream = 5;
constexpr std::uint64_t kTttStream = 6;

template <typename E, std::size_t N>
E parse_enum(const std::string& s, const char* what, const std::pair<const char*, E> (&table)[N]) {
  std::string names;
  for (const auto& [name, value] : table) {
    if (s == name) return value;
    names += names.empty() ? name : std::string("|") + name;
  }
  throw std::invalid_argument(std::string(what) + " must be one of " + names + ", got '" + s + "'");
}

constexpr std::pair<const char*, Phase> kPhases[] = {{"mid", Phase::mid}, {"post", Phase::post}, {"ttt", Phase::ttt}};
constexpr std::pair<const char*, Preset> kPresets[] = {{"desk", Preset::desk}, {"full", Preset::full}};
constexpr std::pair<const char*, PostMode> kPostModes[] = {
    {"sft", PostMode::sft}, {"nested_sft", PostMode::nested_sft}, {"nested_refine", PostMode::nested_refine}};

void emit(const RunOutputs& out, std::vector<StepMetrics>& all, StepMetrics m) {
  if (out.metrics) {
    write_metrics_line(*out.metrics, m);
    out.metrics->flush();
  }
  all.push_back(std::move(m));
}

void maybe_checkpoint(const RunOutputs& out, const ModelParams& params, long step) {
  if (out.checkpoint_dir.empty()) return;
  std::filesystem::create_directories(out.checkpoint_dir);
  save_checkpoint(params, out.checkpoint_dir / ("step_" + std::to_string(step) + ".ckpt"));
}

bool eval_due(const PhaseConfig& cfg, long step) {
  return step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
}

}  // namespace

const char* to_string(Phase p) {
  for (const auto& [name, value] : kPhases)
    if (value == p) return name;
  return "?";
}
const char* to_string(Preset p) {
  for (const auto& [name, value] : kPresets)
    if (value == p) return name;
  return "?";
}
const char* to_string(PostMode m) {
  for (const auto& [name, value] : kPostModes)
    if (value == m) return name;
  return "?";
}
Phase phase_from_string(const std::string& s) { return parse_enum(s, "phase", kPhases); }
Preset preset_from_string(const std::string& s) { return parse_enum(s, "preset", kPresets); }
PostMode post_mode_from_string(const std::string& s) { return parse_enum(s, "post mode", kPostModes); }

PhaseConfig PhaseConfig::defaults(Phase phase, Preset preset) {
  PhaseConfig c;
  c.phase = phase;
  c.selection.chunks = 8;
  c.rollout.k = 5;
  c.rollout.n = 1;
  c.trainer.lambda_sft = 1.0;
  c.trainer.lr = 1e-6;
  switch (phase) {
    case Phase::mid:
      c.reward = RewardKind::cosine;
      c.trainer.lambda_rl = 0.2;
      c.batch_size = 128;
      c.trainer.mini_batch = 32;
      break;
    case Phase::post:
      c.reward = RewardKind::hybrid;
      c.trainer.lambda_rl = 0.2;
      c.batch_size = 64;
      c.trainer.mini_batch = 16;
      break;
    case Phase::ttt:
      c.reward = RewardKind::binary;
      c.trainer.lambda_rl = 0.4;
      c.batch_size = 8;
      c.trainer.mini_batch = 4;
      break;
  }
  if (preset == Preset::desk) {
    // Same rewards, lambdas and (c, k, n); a batch a single core can afford and
    // a learning rate large enough to move a small model within a few hundred steps.
    switch (phase) {
      case Phase::mid:
        c.batch_size = 8;
        c.trainer.mini_batch = 4;
        c.trainer.lr = 3e-3;
        break;
      case Phase::post:
        c.batch_size = 8;
        c.trainer.mini_batch = 4;
        c.trainer.lr = 1e-3;
        break;
      case Phase::ttt:
        c.trainer.lr = 1e-3;
        break;
    }
  }
  return c;
}

void PhaseConfig::validate() const {
  selection.validate();
  rollout.validate();
  trainer.validate();
  if (steps < 0) throw std::invalid_argument("steps must be ≥ 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be ≥ 1");
  if (eval_every < 0) throw std::invalid_argument("eval_every must be ≥ 0");
  if (ttt_steps < 0) throw std::invalid_argument("ttt steps must be ≥ 0");
}

std::uint64_t data_order_seed(std::uint64_t seed) { return Rng::derive(seed, {kDataStream}); }

BatchSampler::BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
  if (n == 0) throw std::invalid_argument("BatchSampler: empty corpus");
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_.resize(n_);
  for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
  Rng rng(Rng::derive(seed_, {epoch_}));
  shuffle(order_.begin(), order_.end(), rng);
  pos_ = 0;
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch) {
  std::vector<std::size_t> out;
  out.reserve(batch);
  while (out.size() < batch) {
    if (pos_ == n_) {
      ++epoch_;
      spdlog::info("corpus of {} sequences exhausted, reshuffling for epoch {}", n_, epoch_);
      reshuffle();
    }
    out.push_back(order_[pos_++]);
  }
  return out;
}

TrainUnit prepare_unit(const ModelParams& policy, std::vector<int> ids, const PhaseConfig& cfg, std::uint64_t seed,
                       std::size_t seq_id) {
  TrainUnit unit;
  unit.ids = std::move(ids);
  unit.score_temperature = cfg.rollout.decode(0).scoring_temperature();
  if (!(cfg.trainer.lambda_rl > 0)) return unit;
  const auto need = static_cast<std::size_t>(cfg.selection.chunks) * static_cast<std::size_t>(cfg.rollout.k + 1);
  if (unit.ids.size() < need) {
    spdlog::debug("sequence {} has {} tokens, fewer than c*(k+1) = {}; no rollouts", seq_id, unit.ids.size(), need);
    return unit;
  }
  const bool capture = policy.config.update_mode == UpdateMode::per_token_delta;
  const auto full = forward_sequence(policy, unit.ids, capture);
  Rng rng(Rng::derive(seed, {kSelectStream}));
  const auto selected = sample_positions(token_entropy(full.logits), cfg.selection, cfg.rollout.k, rng);
  unit.records = rollouts_for_sequence(policy, unit.ids, full, selected.positions, cfg.rollout, seq_id,
                                       Rng::derive(seed, {kRolloutStream}));
  std::size_t zero_rows = 0;
  for (auto& r : unit.records) score(cfg.reward, r, &zero_rows);
  if (zero_rows > 0) spdlog::warn("sequence {}: {} zero-norm hidden rows scored as 0", seq_id, zero_rows);
  standardize_advantages(unit.records, cfg.trainer.std_guard);
  return unit;
}

std::vector<StepMetrics> mid_train(ModelParams& params, const std::vector<TokenSequence>& corpus,
                                   const std::vector<TokenSequence>& validation, const PhaseConfig& cfg,
                                   const RunOutputs& out) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("mid_train: empty corpus");
  std::vector<StepMetrics> all;
  if (cfg.steps == 0) return all;
  BatchSampler sampler(corpus.size(), data_order_seed(cfg.seed));
  AdamW optimizer(params);
  for (long step = 1; step <= cfg.steps; ++step) {
    const auto idx = sampler.next(static_cast<std::size_t>(cfg.batch_size));
    std::vector<TrainUnit> units;
    units.reserve(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto seed = Rng::derive(cfg.seed, {kUnitStream, static_cast<std::uint64_t>(step), j});
      units.push_back(prepare_unit(params, corpus[idx[j]].ids, cfg, seed, idx[j]));
    }
    auto m = combined_step(params, optimizer, units, cfg.trainer);
    m.step = step;
    m.phase = "mid";
    if (out.rollouts)
      for (const auto& u : units) write_rollouts(*out.rollouts, u.records, step);
    if (eval_due(cfg, step)) {
      if (!validation.empty()) {
        const auto ev = eval_ntp(params, validation);
        m.val_loss = ev.loss;
        m.val_accuracy = ev.accuracy;
      }
      maybe_checkpoint(out, params, step);
    }
    emit(out, all, std::move(m));
  }
  return all;
}

TokenSequence task_sequence(const TaskSample& task) {
  TokenSequence s;
  s.ids = encode(task.prompt);
  s.prompt_len = s.ids.size();
  const auto answer = encode(task.answer);
  s.ids.insert(s.ids.end(), answer.begin(), answer.end());
  return s;
}

std::vector<StepMetrics> post_train_nested(ModelParams& params, const std::vector<TokenSequence>& samples,
                                           const PhaseConfig& cfg, const RunOutputs& out) {
  cfg.validate();
  if (samples.empty()) throw std::invalid_argument("post_train_nested: no samples");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (!s.prompt_len) throw std::invalid_argument("post_train_nested: sample " + std::to_string(i) + " has no prompt/response split");
    if (*s.prompt_len >= s.ids.size()) {
      throw std::invalid_argument("post_train_nested: sample " + std::to_string(i) + " has an empty response span");
    }
  }
  std::vector<StepMetrics> all;
  if (cfg.steps == 0) return all;
  BatchSampler sampler(samples.size(), data_order_seed(cfg.seed));
  AdamW inner_opt(params), outer_opt(params);
  for (long step = 1; step <= cfg.steps; ++step) {
    const auto idx = sampler.next(static_cast<std::size_t>(cfg.batch_size));

    StepMetrics inner;
    ModelParams before;
    bool inner_ran = false;
    if (cfg.post_mode != PostMode::sft) {
      std::vector<TrainUnit> units;
      for (std::size_t j = 0; j < idx.size(); ++j) {
        const auto& s = samples[idx[j]];
        const auto plen = *s.prompt_len;
        if (plen < 2) continue;
        std::vector<int> prompt(s.ids.begin(), s.ids.begin() + static_cast<long>(plen));
        if (cfg.post_mode == PostMode::nested_refine) {
          const auto seed = Rng::derive(cfg.seed, {kInnerStream, static_cast<std::uint64_t>(step), j});
          units.push_back(prepare_unit(params, std::move(prompt), cfg, seed, idx[j]));
        } else {
          TrainUnit u;
          u.ids = std::move(prompt);
          units.push_back(std::move(u));
        }
      }
      if (!units.empty()) {
        if (!cfg.inner_persist) before = params;
        inner = combined_step(params, inner_opt, units, cfg.trainer);
        inner_ran = true;
        if (out.rollouts)
          for (const auto& u : units) write_rollouts(*out.rollouts, u.records, step);
      }
    }

    std::vector<TrainUnit> outer_units;
    for (auto i : idx) {
      const auto& s = samples[i];
      TrainUnit u;
      u.ids = s.ids;
      if (cfg.post_mode != PostMode::sft) {
        // Target t predicts ids[t + 1]; keep it when that token is in the response.
        u.loss_mask.resize(s.ids.size() - 1);
        for (std::size_t t = 0; t + 1 < s.ids.size(); ++t) u.loss_mask[t] = t + 1 >= *s.prompt_len ? 1 : 0;
      }
      outer_units.push_back(std::move(u));
    }
    ModelParams adapted;
    if (inner_ran && !cfg.inner_persist) adapted = params;
    auto m = combined_step(params, outer_opt, outer_units, cfg.trainer);
    if (inner_ran && !cfg.inner_persist) {
      // Keep the outer update but undo the inner one.
      for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        auto w = params.tensors[i].mutable_data();
        const auto a = adapted.tensors[i].data();
        const auto b = before.tensors[i].data();
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= a[j] - b[j];
      }
    }
    m.step = step;
    m.phase = "post";
    m.loss_rl = inner.loss_rl;
    m.reward_mean = inner.reward_mean;
    m.reward_std = inner.reward_std;
    m.updates += inner.updates;
    if (eval_due(cfg, step)) maybe_checkpoint(out, params, step);
    emit(out, all, std::move(m));
  }
  return all;
}

double mean_prompt_logprob(const ModelParams& params, const std::vector<int>& prompt) {
  return -ntp_loss(params, prompt);
}

TttResult ttt_adapt(const ModelParams& base, const std::vector<int>& prompt, const PhaseConfig& cfg, int gen_len,
                    std::uint64_t seed) {
  cfg.validate();
  if (prompt.empty()) throw std::invalid_argument("ttt_adapt: empty prompt");
  TttResult res;
  res.adapted = base;
  const auto need = static_cast<std::size_t>(cfg.selection.chunks) * static_cast<std::size_t>(cfg.rollout.k + 1);
  if (cfg.ttt_steps > 0 && prompt.size() < need) {
    spdlog::info("prompt of {} tokens is shorter than c*(k+1) = {}; answering without adaptation", prompt.size(), need);
  } else if (cfg.ttt_steps > 0) {
    AdamW optimizer(res.adapted);
    for (int s = 0; s < cfg.ttt_steps; ++s) {
      // The batch is the one prompt, each copy with its own rollout draws.
      std::vector<TrainUnit> units;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const auto useed = Rng::derive(seed, {kTttStream, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(b)});
        units.push_back(prepare_unit(res.adapted, prompt, cfg, useed, 0));
      }
      auto m = combined_step(res.adapted, optimizer, units, cfg.trainer);
      m.step = s + 1;
      m.phase = "ttt";
      res.metrics.push_back(std::move(m));
    }
    res.adapted_applied = true;
  }
  if (gen_len > 0) res.response = greedy_continue(res.adapted, prompt, gen_len);
  return res;
}

}  // namespace refine
