#include "refine/trainer.hpp"

#include <cmath>

#include "json.hpp"

namespace refine {

void TrainerConfig::validate() const {
  if (!(lambda_sft >= 0) || !(lambda_rl >= 0)) throw std::invalid_argument("lambda_sft and lambda_rl must be ≥ 0");
  if (!(clip_ratio > 0 && clip_ratio < 1)) throw std::invalid_argument("clip_ratio must lie in (0, 1)");
  if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be a finite value ≥ 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw std::invalid_argument("adam_eps must be > 0");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight_decay must be ≥ 0");
  if (mini_batch < 1) throw std::invalid_argument("mini_batch must be ≥ 1");
  if (!(std_guard >= 0)) throw std::invalid_argument("std_guard must be ≥ 0");
}

void standardize_advantages(std::vector<RolloutRecord>& group, double std_guard) {
  if (group.empty()) return;
  double lo = group[0].reward, hi = group[0].reward, mean = 0;
  for (const auto& r : group) {
    lo = std::min(lo, r.reward);
    hi = std::max(hi, r.reward);
    mean += r.reward;
  }
  mean /= static_cast<double>(group.size());
  if (lo == hi) {
    for (auto& r : group) r.advantage = 0.0;
    return;
  }
  double var = 0;
  for (const auto& r : group) var += (r.reward - mean) * (r.reward - mean);
  const double sd = std::sqrt(var / static_cast<double>(group.size()));
  for (auto& r : group) r.advantage = (r.reward - mean) / (sd + std_guard);
}

std::size_t rollout_token_count(const std::vector<TrainUnit>& units) {
  std::size_t n = 0;
  for (const auto& u : units)
    for (const auto& r : u.records) n += r.tokens.size();
  return n;
}

double ntp_loss(const ModelParams& params, std::span<const int> ids, std::span<const std::uint8_t> mask) {
  nx::Tape<float> tape;
  auto vars = bind(tape, params, false);
  return ntp_loss_tape<float>(params.config, vars, ids, mask).value().item();
}

double grpo_loss(const ModelParams& params, const std::vector<TrainUnit>& units, double clip_ratio) {
  const std::size_t n = rollout_token_count(units);
  if (n == 0) throw std::invalid_argument("grpo_loss: no rollout tokens");
  double total = 0;
  for (const auto& u : units) {
    if (u.records.empty()) continue;
    nx::Tape<float> tape;
    auto vars = bind(tape, params, false);
    total += surrogate_sum_tape<float>(params.config, vars, u, clip_ratio).value().item();
  }
  return -total / static_cast<double>(n);
}

AdamW::AdamW(const ModelParams& like) {
  for (const auto& t : like.tensors) {
    m_.emplace_back(t.size(), 0.0f);
    v_.emplace_back(t.size(), 0.0f);
  }
}

void AdamW::step(ModelParams& params, const std::vector<std::vector<double>>& grads, const TrainerConfig& cfg) {
  if (m_.size() != params.tensors.size()) *this = AdamW(params);
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto w = params.tensors[i].mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<float>(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj);
      v[j] = static_cast<float>(cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj);
      const double mhat = m[j] / bc1, vhat = v[j] / bc2;
      double x = w[j];
      x -= cfg.lr * cfg.weight_decay * x;
      x -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      w[j] = static_cast<float>(x);
    }
  }
}

std::vector<std::vector<double>> zero_gradients(const ModelParams& params) {
  std::vector<std::vector<double>> g;
  for (const auto& t : params.tensors) g.emplace_back(t.size(), 0.0);
  return g;
}

double global_norm(const std::vector<std::vector<double>>& grads) {
  double s = 0;
  for (const auto& g : grads)
    for (double x : g) s += x * x;
  return std::sqrt(s);
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads)
      for (auto& x : g) x *= f;
  }
  return norm;
}

LossParts accumulate_gradients(const ModelParams& params, const std::vector<TrainUnit>& units,
                               const TrainerConfig& cfg, std::vector<std::vector<double>>& grads) {
  const bool use_sft = cfg.lambda_sft > 0;
  const bool use_rl = cfg.lambda_rl > 0;
  const std::size_t n_tokens = use_rl ? rollout_token_count(units) : 0;
  const auto n_units = static_cast<float>(units.size());
  LossParts parts;
  for (const auto& u : units) {
    const bool rl_here = use_rl && !u.records.empty();
    if (!use_sft && !rl_here) continue;
    nx::Tape<float> tape;
    auto vars = bind(tape, params, true);
    nx::Var<float> loss;
    bool have = false;
    if (use_sft) {
      auto ntp = ntp_loss_tape<float>(params.config, vars, u.ids, u.loss_mask);
      parts.ntp += ntp.value().item() / static_cast<double>(units.size());
      loss = nx::scale(ntp, static_cast<float>(cfg.lambda_sft) / n_units);
      have = true;
    }
    if (rl_here) {
      auto sur = surrogate_sum_tape<float>(params.config, vars, u, cfg.clip_ratio);
      parts.rl += -static_cast<double>(sur.value().item()) / static_cast<double>(n_tokens);
      auto rl = nx::scale(sur, static_cast<float>(-cfg.lambda_rl / static_cast<double>(n_tokens)));
      loss = have ? nx::add(loss, rl) : rl;
    }
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) {
      throw TrainingError("non-finite loss on a sequence of " + std::to_string(u.ids.size()) + " tokens (ntp part " +
                          std::to_string(parts.ntp) + ", rl part " + std::to_string(parts.rl) + ")");
    }
    auto g = tape.backward(loss);
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const auto& gi = g[vars[i]];
      auto& acc = grads[i];
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += gi[j];
    }
  }
  return parts;
}

StepMetrics combined_step(ModelParams& params, AdamW& optimizer, const std::vector<TrainUnit>& batch,
                          const TrainerConfig& cfg) {
  cfg.validate();
  StepMetrics m;
  m.lr = cfg.lr;
  std::vector<double> rewards;
  for (const auto& u : batch)
    for (const auto& r : u.records) rewards.push_back(r.reward);
  if (!rewards.empty()) {
    for (double r : rewards) m.reward_mean += r;
    m.reward_mean /= static_cast<double>(rewards.size());
    for (double r : rewards) m.reward_std += (r - m.reward_mean) * (r - m.reward_mean);
    m.reward_std = std::sqrt(m.reward_std / static_cast<double>(rewards.size()));
  }
  if (batch.empty()) return m;
  const auto mb = static_cast<std::size_t>(cfg.mini_batch);
  for (std::size_t start = 0; start < batch.size(); start += mb) {
    const std::size_t end = std::min(batch.size(), start + mb);
    const std::vector<TrainUnit> units(batch.begin() + static_cast<long>(start), batch.begin() + static_cast<long>(end));
    auto grads = zero_gradients(params);
    const auto parts = accumulate_gradients(params, units, cfg, grads);
    m.loss_ntp += parts.ntp;
    m.loss_rl += parts.rl;
    m.grad_norm += clip_global_norm(grads, cfg.grad_clip_norm);
    optimizer.step(params, grads, cfg);
    ++m.updates;
  }
  const auto u = static_cast<double>(m.updates);
  m.loss_ntp /= u;
  m.loss_rl /= u;
  m.grad_norm /= u;
  return m;
}

void write_metrics_line(std::ostream& out, const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["phase"] = m.phase;
  j["loss_ntp"] = m.loss_ntp;
  j["loss_rl"] = m.loss_rl;
  j["reward_mean"] = m.reward_mean;
  j["reward_std"] = m.reward_std;
  j["grad_norm"] = m.grad_norm;
  j["lr"] = m.lr;
  if (m.val_loss) j["val_loss"] = *m.val_loss;
  if (m.val_accuracy) j["val_accuracy"] = *m.val_accuracy;
  out << j.dump() << "\n";
}

}  // namespace refine
