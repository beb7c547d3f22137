#include "refine/reward.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "refine/rollout.hpp"

namespace refine {

const char* to_string(RewardKind kind) {
  switch (kind) {
    case RewardKind::cosine: return "cosine";
    case RewardKind::binary: return "binary";
    case RewardKind::hybrid: return "hybrid";
  }
  return "?";
}

RewardKind reward_kind_from_string(const std::string& s) {
  if (s == "cosine") return RewardKind::cosine;
  if (s == "binary") return RewardKind::binary;
  if (s == "hybrid") return RewardKind::hybrid;
  throw std::invalid_argument("unknown reward kind '" + s + "' (expected cosine, binary or hybrid)");
}

double reward_cosine(const nx::Array<float>& h_pred, const nx::Array<float>& h_gt, std::size_t* zero_rows) {
  if (h_pred.shape() != h_gt.shape() || h_pred.rank() != 2) {
    throw nx::ShapeError("reward_cosine: shapes " + nx::shape_str(h_pred.shape()) + " and " +
                         nx::shape_str(h_gt.shape()) + " differ");
  }
  const std::size_t k = h_pred.rows(), d = h_pred.cols();
  double total = 0;
  for (std::size_t j = 0; j < k; ++j) {
    double dot = 0, np = 0, ng = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const double a = h_pred.at(j, i), b = h_gt.at(j, i);
      dot += a * b;
      np += a * a;
      ng += b * b;
    }
    if (np == 0 || ng == 0) {
      if (zero_rows) ++*zero_rows;
      continue;
    }
    total += std::clamp(dot / (std::sqrt(np) * std::sqrt(ng)), -1.0, 1.0);
  }
  return total / static_cast<double>(k);
}

double reward_binary(const std::vector<int>& pred, const std::vector<int>& gt) {
  if (pred.size() != gt.size() || pred.empty()) {
    throw std::invalid_argument("reward_binary: lengths " + std::to_string(pred.size()) + " and " +
                                std::to_string(gt.size()) + " must match and be non-zero");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == gt[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double reward_hybrid(const nx::Array<float>& h_pred, const nx::Array<float>& h_gt, const std::vector<int>& pred,
                     const std::vector<int>& gt, std::size_t* zero_rows) {
  return reward_cosine(h_pred, h_gt, zero_rows) + reward_binary(pred, gt);
}

double score(RewardKind kind, RolloutRecord& r, std::size_t* zero_rows) {
  switch (kind) {
    case RewardKind::cosine: r.reward = reward_cosine(r.h_pred, r.h_gt, zero_rows); break;
    case RewardKind::binary: r.reward = reward_binary(r.tokens, r.gt_tokens); break;
    case RewardKind::hybrid: r.reward = reward_hybrid(r.h_pred, r.h_gt, r.tokens, r.gt_tokens, zero_rows); break;
  }
  return r.reward;
}

}  // namespace refine
