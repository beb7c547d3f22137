#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "refine/data.hpp"
#include "refine/model.hpp"

namespace refine {

struct NtpEval {
  double accuracy = 0;
  double loss = 0;
  std::size_t positions = 0;
};

NtpEval eval_ntp(const ModelParams& params, const std::vector<TokenSequence>& sequences);

// Fraction of `values` that occur verbatim in `decoded`.
double task_recall(const std::string& decoded, const std::vector<std::string>& values);

struct RecallEval {
  double recall = 0;
  std::vector<double> per_task;
};

// gen_len 0 picks the longest queried value plus 16 tokens per task.
RecallEval eval_niah_recall(const ModelParams& params, const std::vector<TaskSample>& tasks, int gen_len = 0);

// Fraction of tasks whose greedy continuation starts with the reference answer.
double eval_copy_exact(const ModelParams& params, const std::vector<TaskSample>& tasks);

struct EvalReport {
  std::string task;
  std::string metric;
  double value = 0;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  std::string config_digest;
};

void write_report_line(std::ostream& out, const EvalReport& r);
// FNV-1a of the text, as 16 hex digits.
std::string digest(const std::string& text);

struct DiagnosticsPaths {
  std::filesystem::path reward_series;
  std::filesystem::path entropy_profile;
};

// reward_series.csv (step,reward_mean,reward_std) from a metrics JSONL file and
// entropy_profile.csv (position,token,entropy,smoothed) for `sample`.
DiagnosticsPaths dump_diagnostics(const std::filesystem::path& metrics_jsonl, const ModelParams& params,
                                  const std::vector<int>& sample, int kernel, const std::filesystem::path& out_dir);

}  // namespace refine
