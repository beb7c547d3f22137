#pragma once

#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "refine/model.hpp"
#include "refine/rollout.hpp"

namespace refine {

struct TrainerConfig {
  double lambda_sft = 1.0;
  double lambda_rl = 0.2;
  double clip_ratio = 0.2;       // PPO clip epsilon
  double grad_clip_norm = 0.2;   // global-norm clip; <= 0 disables
  double lr = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  int mini_batch = 32;           // sequences per optimizer update
  double std_guard = 1e-6;

  void validate() const;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Frozen parameters that generated a rollout batch.
struct PolicySnapshot {
  ModelParams params;
};

// One training sequence with its scored rollouts.
struct TrainUnit {
  std::vector<int> ids;
  // Per next-token target (length ids.size() - 1); 1 keeps the target. Empty keeps all.
  std::vector<std::uint8_t> loss_mask;
  std::vector<RolloutRecord> records;
  double score_temperature = 1.0;  // temperature the rollout logprobs were taken at
};

// (R - mean) / (std_pop + guard); a group whose rewards are all equal gets zeros.
void standardize_advantages(std::vector<RolloutRecord>& group, double std_guard = 1e-6);

// Mean cross-entropy over kept next-token targets.
template <typename T>
nx::Var<T> ntp_loss_tape(const ModelConfig& cfg, std::span<const nx::Var<T>> p, std::span<const int> ids,
                         std::span<const std::uint8_t> mask);

// Log-probabilities of a record's generated tokens, re-scored by a full forward
// of x_{<=t} followed by the generated tokens.
template <typename T>
nx::Var<T> record_logprobs_tape(const ModelConfig& cfg, std::span<const nx::Var<T>> p, std::span<const int> ids,
                                const RolloutRecord& record, double temperature);

// Sum over the unit's rollout tokens of the clipped surrogate objective.
template <typename T>
nx::Var<T> surrogate_sum_tape(const ModelConfig& cfg, std::span<const nx::Var<T>> p, const TrainUnit& unit,
                              double clip_ratio);

std::size_t rollout_token_count(const std::vector<TrainUnit>& units);

double ntp_loss(const ModelParams& params, std::span<const int> ids, std::span<const std::uint8_t> mask = {});
// -mean over all rollout tokens of min(r A, clip(r) A).
double grpo_loss(const ModelParams& params, const std::vector<TrainUnit>& units, double clip_ratio);

// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const ModelParams& like);

  void step(ModelParams& params, const std::vector<std::vector<double>>& grads, const TrainerConfig& cfg);
  long steps() const { return t_; }

 private:
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

// Gradients of lambda_sft * mean_u NTP(u) + lambda_rl * GRPO over `units`,
// summed unit by unit in order into `grads` (shaped like params).
struct LossParts {
  double ntp = 0;
  double rl = 0;
};
LossParts accumulate_gradients(const ModelParams& params, const std::vector<TrainUnit>& units,
                               const TrainerConfig& cfg, std::vector<std::vector<double>>& grads);

std::vector<std::vector<double>> zero_gradients(const ModelParams& params);
double global_norm(const std::vector<std::vector<double>>& grads);
// Scales in place so the global norm is at most max_norm; returns the pre-clip norm.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

struct StepMetrics {
  long step = 0;
  std::string phase;
  double loss_ntp = 0;
  double loss_rl = 0;
  double reward_mean = 0;
  double reward_std = 0;
  double grad_norm = 0;
  double lr = 0;
  std::size_t updates = 0;
  std::optional<double> val_loss;
  std::optional<double> val_accuracy;
};

// Consumes the batch in ceil(B / mini_batch) mini-batch updates. Each update
// re-scores rollouts against the stored generating logprobs.
StepMetrics combined_step(ModelParams& params, AdamW& optimizer, const std::vector<TrainUnit>& batch,
                          const TrainerConfig& cfg);

void write_metrics_line(std::ostream& out, const StepMetrics& m);

}  // namespace refine

#include "refine/trainer_impl.hpp"
