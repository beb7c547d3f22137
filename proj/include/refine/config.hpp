#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "refine/model.hpp"
#include "refine/phases.hpp"

namespace refine {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using KeyValues = std::map<std::string, std::string>;

struct DataConfig {
  std::string train;           // corpus text file, one document per line; empty: synthetic
  std::string valid;           // held-out corpus file; empty: synthetic
  std::string tasks;           // task JSONL; empty: synthetic
  int seq_len = 256;           // training window length
  int stride = 0;              // window stride; 0 means seq_len
  int synthetic_n = 200;       // synthetic training documents
  int valid_n = 20;            // synthetic held-out documents
  std::string task = "copy";   // synthetic task kind: copy | niah
  int task_n = 20;
};

struct RunConfig {
  ModelConfig model;
  Preset preset = Preset::full;
  PhaseConfig phase;
  DataConfig data;
  std::string out = "runs/latest";
  std::string init;            // checkpoint to start from; empty: fresh init from the seed
  bool dump_rollouts = false;
  int ttt_gen_len = 0;         // 0: answer length (copy) or longest value + 16 (niah)
  int eval_gen_len = 0;
  std::uint64_t seed = 0;
};

// Flat "key = value" text; '#' starts a comment. Duplicate keys are rejected
// so that resolution never depends on line order.
KeyValues parse_key_values(const std::string& text, const std::string& source = "config");
KeyValues read_config_file(const std::filesystem::path& path);

// Flags override file values; the seed falls back to env_seed, then 0.
// Defaults for unset keys come from the phase and preset.
RunConfig resolve_config(const KeyValues& file, const KeyValues& flags, Phase default_phase,
                         const std::optional<std::string>& env_seed = std::nullopt);

// Every key with its resolved value, sorted by key; parses back to the same config.
std::string to_text(const RunConfig& cfg);

std::vector<std::string> config_keys();

}  // namespace refine
