#pragma once

#include <string>
#include <vector>

#include "refine/numerics/array.hpp"

namespace refine {

enum class RewardKind { cosine, binary, hybrid };

const char* to_string(RewardKind kind);
RewardKind reward_kind_from_string(const std::string& s);

// Mean row cosine similarity. A row pair with a zero-norm side scores 0 and is
// counted in `zero_rows` when given.
double reward_cosine(const nx::Array<float>& h_pred, const nx::Array<float>& h_gt, std::size_t* zero_rows = nullptr);

// Fraction of positions where the tokens agree.
double reward_binary(const std::vector<int>& pred, const std::vector<int>& gt);

double reward_hybrid(const nx::Array<float>& h_pred, const nx::Array<float>& h_gt, const std::vector<int>& pred,
                     const std::vector<int>& gt, std::size_t* zero_rows = nullptr);

struct RolloutRecord;
// Scores one record in place and returns the reward.
double score(RewardKind kind, RolloutRecord& record, std::size_t* zero_rows = nullptr);

}  // namespace refine
