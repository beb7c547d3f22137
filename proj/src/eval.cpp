#include "refine/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "refine/selector.hpp"

namespace refine {

NtpEval eval_ntp(const ModelParams& params, const std::vector<TokenSequence>& sequences) {
  NtpEval ev;
  std::size_t hits = 0;
  double nll = 0;
  for (const auto& s : sequences) {
    if (s.ids.size() < 2) continue;
    const auto out = forward_sequence(params, s.ids, false);
    const std::size_t vocab = out.logits.shape()[1];
    const float* logits = out.logits.data().data();
    for (std::size_t t = 0; t + 1 < s.ids.size(); ++t) {
      const float* row = logits + t * vocab;
      std::size_t best = 0;
      for (std::size_t v = 1; v < vocab; ++v)
        if (row[v] > row[best]) best = v;
      if (static_cast<int>(best) == s.ids[t + 1]) ++hits;
      nll -= out.next_token_logprobs[t];
      ++ev.positions;
    }
  }
  if (ev.positions == 0) throw std::invalid_argument("eval_ntp: no sequence with at least 2 tokens");
  ev.accuracy = static_cast<double>(hits) / static_cast<double>(ev.positions);
  ev.loss = nll / static_cast<double>(ev.positions);
  return ev;
}

double task_recall(const std::string& decoded, const std::vector<std::string>& values) {
  if (values.empty()) return 0.0;
  std::size_t found = 0;
  for (const auto& v : values)
    if (decoded.find(v) != std::string::npos) ++found;
  return static_cast<double>(found) / static_cast<double>(values.size());
}

RecallEval eval_niah_recall(const ModelParams& params, const std::vector<TaskSample>& tasks, int gen_len) {
  RecallEval ev;
  for (const auto& task : tasks) {
    int len = gen_len;
    if (len <= 0) {
      std::size_t longest = 0;
      for (const auto& v : task.meta.values) longest = std::max(longest, v.size());
      len = static_cast<int>(longest) + 16;
    }
    const auto decoded = decode(greedy_continue(params, encode(task.prompt), len));
    ev.per_task.push_back(task_recall(decoded, task.meta.values));
  }
  if (!ev.per_task.empty()) {
    for (double r : ev.per_task) ev.recall += r;
    ev.recall /= static_cast<double>(ev.per_task.size());
  }
  return ev;
}

double eval_copy_exact(const ModelParams& params, const std::vector<TaskSample>& tasks) {
  if (tasks.empty()) return 0.0;
  std::size_t exact = 0;
  for (const auto& task : tasks) {
    const auto answer = encode(task.answer);
    const auto decoded = decode(greedy_continue(params, encode(task.prompt), static_cast<int>(answer.size())));
    if (decoded.starts_with(task.answer)) ++exact;
  }
  return static_cast<double>(exact) / static_cast<double>(tasks.size());
}

void write_report_line(std::ostream& out, const EvalReport& r) {
  if (r.samples == 0) throw std::invalid_argument("eval report '" + r.metric + "' has no samples");
  if (!std::isfinite(r.value)) throw std::invalid_argument("eval report '" + r.metric + "' has a non-finite value");
  nlohmann::ordered_json j;
  j["task"] = r.task;
  j["metric"] = r.metric;
  j["value"] = r.value;
  j["samples"] = r.samples;
  j["seed"] = r.seed;
  j["config_digest"] = r.config_digest;
  out << j.dump() << "\n";
}

std::string digest(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

DiagnosticsPaths dump_diagnostics(const std::filesystem::path& metrics_jsonl, const ModelParams& params,
                                  const std::vector<int>& sample, int kernel, const std::filesystem::path& out_dir) {
  std::ifstream in(metrics_jsonl);
  if (!in) throw std::runtime_error("dump_diagnostics: cannot open metrics file " + metrics_jsonl.string());
  if (sample.empty()) throw std::invalid_argument("dump_diagnostics: empty entropy sample");
  std::filesystem::create_directories(out_dir);
  DiagnosticsPaths paths{out_dir / "reward_series.csv", out_dir / "entropy_profile.csv"};

  std::ofstream rs(paths.reward_series);
  if (!rs) throw std::runtime_error("dump_diagnostics: cannot write " + paths.reward_series.string());
  rs.precision(17);
  rs << "step,reward_mean,reward_std\n";
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      rs << j.at("step").get<long>() << ',' << j.at("reward_mean").get<double>() << ','
         << j.at("reward_std").get<double>() << '\n';
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(metrics_jsonl.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }

  const auto full = forward_sequence(params, sample, false);
  const auto profile = smooth_entropy(token_entropy(full.logits), kernel);
  std::ofstream es(paths.entropy_profile);
  if (!es) throw std::runtime_error("dump_diagnostics: cannot write " + paths.entropy_profile.string());
  es.precision(17);
  es << "position,token,entropy,smoothed\n";
  for (std::size_t t = 0; t < profile.size(); ++t)
    es << t << ',' << sample[t] << ',' << profile.raw[t] << ',' << profile.smoothed[t] << '\n';
  return paths;
}

}  // namespace refine
