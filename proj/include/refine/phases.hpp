#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "refine/data.hpp"
#include "refine/reward.hpp"
#include "refine/selector.hpp"
#include "refine/trainer.hpp"

namespace refine {

enum class Phase { mid, post, ttt };
// full: the reference per-phase settings. desk: same structure with a batch
// and learning rate that make progress on one CPU core.
enum class Preset { desk, full };
enum class PostMode { sft, nested_sft, nested_refine };

const char* to_string(Phase p);
const char* to_string(Preset p);
const char* to_string(PostMode m);
Phase phase_from_string(const std::string& s);
Preset preset_from_string(const std::string& s);
PostMode post_mode_from_string(const std::string& s);

struct PhaseConfig {
  Phase phase = Phase::mid;
  SelectionConfig selection;
  RolloutConfig rollout;
  RewardKind reward = RewardKind::cosine;
  TrainerConfig trainer;
  int steps = 200;
  int batch_size = 128;
  int eval_every = 50;
  std::uint64_t seed = 0;
  PostMode post_mode = PostMode::nested_refine;
  bool inner_persist = true;  // keep nested inner updates (false rolls them back after each outer update)
  int ttt_steps = 1;

  static PhaseConfig defaults(Phase phase, Preset preset = Preset::full);
  void validate() const;
};

struct RunOutputs {
  std::ostream* metrics = nullptr;    // one JSON line per step
  std::ostream* rollouts = nullptr;   // optional rollout dump
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
};

// Sequences of one epoch in seeded shuffled order; reshuffles on wrap.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t batch);
  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle();
  std::size_t n_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

// Seed of the data-order stream, separate from rollout sampling.
std::uint64_t data_order_seed(std::uint64_t seed);

// Entropy selection, rollouts, rewards and advantages for one sequence,
// generated by `policy`. Sequences too short for c*(k+1) get no rollouts.
TrainUnit prepare_unit(const ModelParams& policy, std::vector<int> ids, const PhaseConfig& cfg, std::uint64_t seed,
                       std::size_t seq_id);

std::vector<StepMetrics> mid_train(ModelParams& params, const std::vector<TokenSequence>& corpus,
                                   const std::vector<TokenSequence>& validation, const PhaseConfig& cfg,
                                   const RunOutputs& out = {});

// Samples must carry prompt_len (the prompt/response split).
std::vector<StepMetrics> post_train_nested(ModelParams& params, const std::vector<TokenSequence>& samples,
                                           const PhaseConfig& cfg, const RunOutputs& out = {});

TokenSequence task_sequence(const TaskSample& task);

struct TttResult {
  ModelParams adapted;
  std::vector<int> response;
  bool adapted_applied = false;
  std::vector<StepMetrics> metrics;
};

// Adapts a copy of `base` on the prompt alone, then greedily decodes gen_len tokens.
TttResult ttt_adapt(const ModelParams& base, const std::vector<int>& prompt, const PhaseConfig& cfg, int gen_len,
                    std::uint64_t seed);

// Mean log-probability of the prompt's own next tokens.
double mean_prompt_logprob(const ModelParams& params, const std::vector<int>& prompt);

}  // namespace refine
