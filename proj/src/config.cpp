#include "refine/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace refine {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& expected, const std::string& got) {
  throw ConfigError("key '" + key + "': expected " + expected + ", got '" + got + "'");
}

long parse_long(const std::string& key, const std::string& v, long min, const std::string& form) {
  long x = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, x);
  if (ec != std::errc() || ptr != end) bad(key, "an integer with " + form, v);
  if (x < min) bad(key, form, v);
  return x;
}

double parse_double(const std::string& key, const std::string& v, const std::function<bool(double)>& ok,
                    const std::string& form) {
  double x = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, x);
  if (ec != std::errc() || ptr != end) bad(key, "a number with " + form, v);
  if (!ok(x)) bad(key, form, v);
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, "true or false", v);
}

std::string fmt_double(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

template <typename F>
auto as_enum(const std::string& key, const std::string& v, const std::string& form, F parse) {
  try {
    return parse(v);
  } catch (const std::invalid_argument&) {
    bad(key, form, v);
  }
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

Field int_field(const char* key, long min, const char* form, std::function<int&(RunConfig&)> ref) {
  return {[=](RunConfig& c, const std::string& v) { ref(c) = static_cast<int>(parse_long(key, v, min, form)); },
          [=](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

Field real_field(const char* key, std::function<bool(double)> ok, const char* form,
                 std::function<double&(RunConfig&)> ref) {
  return {[=](RunConfig& c, const std::string& v) { ref(c) = parse_double(key, v, ok, form); },
          [=](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); }};
}

Field text_field(std::function<std::string&(RunConfig&)> ref) {
  return {[=](RunConfig& c, const std::string& v) { ref(c) = v; },
          [=](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); }};
}

bool positive(double x) { return x > 0 && std::isfinite(x); }
bool non_negative(double x) { return x >= 0 && std::isfinite(x); }
bool unit_open(double x) { return x >= 0 && x < 1; }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["model.vocab_size"] = int_field("model.vocab_size", 1, "vocab_size ≥ 1", [](RunConfig& c) -> int& { return c.model.vocab_size; });
    t["model.d_model"] = int_field("model.d_model", 1, "d_model ≥ 1", [](RunConfig& c) -> int& { return c.model.d_model; });
    t["model.n_layers"] = int_field("model.n_layers", 1, "n_layers ≥ 1", [](RunConfig& c) -> int& { return c.model.n_layers; });
    t["model.d_fast"] = int_field("model.d_fast", 1, "d_fast ≥ 1", [](RunConfig& c) -> int& { return c.model.d_fast; });
    t["model.eta"] = real_field("model.eta", positive, "eta > 0", [](RunConfig& c) -> double& { return c.model.eta; });
    t["model.update_mode"] = {
        [](RunConfig& c, const std::string& v) {
          c.model.update_mode = as_enum("model.update_mode", v, "per_token_delta or chunked", update_mode_from_string);
        },
        [](const RunConfig& c) { return std::string(to_string(c.model.update_mode)); }};
    t["model.chunk_size"] = int_field("model.chunk_size", 1, "chunk_size ≥ 1", [](RunConfig& c) -> int& { return c.model.chunk_size; });
    t["model.max_seq_len"] = int_field("model.max_seq_len", 2, "max_seq_len ≥ 2", [](RunConfig& c) -> int& { return c.model.max_seq_len; });

    t["phase.name"] = {[](RunConfig& c, const std::string& v) {
                         c.phase.phase = as_enum("phase.name", v, "mid, post or ttt", phase_from_string);
                       },
                       [](const RunConfig& c) { return std::string(to_string(c.phase.phase)); }};
    t["phase.preset"] = {[](RunConfig& c, const std::string& v) {
                           c.preset = as_enum("phase.preset", v, "desk or full", preset_from_string);
                         },
                         [](const RunConfig& c) { return std::string(to_string(c.preset)); }};
    t["phase.c"] = int_field("phase.c", 1, "c ≥ 1", [](RunConfig& c) -> int& { return c.phase.selection.chunks; });
    t["phase.k"] = int_field("phase.k", 1, "k ≥ 1", [](RunConfig& c) -> int& { return c.phase.rollout.k; });
    t["phase.n"] = int_field("phase.n", 1, "n ≥ 1", [](RunConfig& c) -> int& { return c.phase.rollout.n; });
    t["phase.tau"] = real_field("phase.tau", positive, "tau > 0", [](RunConfig& c) -> double& { return c.phase.selection.tau; });
    t["phase.strategy"] = {
        [](RunConfig& c, const std::string& v) {
          c.phase.selection.strategy =
              as_enum("phase.strategy", v, "entropy_weighted, uniform, argmax or argmin", selection_strategy_from_string);
        },
        [](const RunConfig& c) { return std::string(to_string(c.phase.selection.strategy)); }};
    t["phase.pool_kernel"] = int_field("phase.pool_kernel", 0, "pool_kernel ≥ 0 (0 means k)", [](RunConfig& c) -> int& { return c.phase.selection.pool_kernel; });
    t["phase.temperature"] = real_field("phase.temperature", non_negative, "temperature ≥ 0 (0 means greedy)", [](RunConfig& c) -> double& { return c.phase.rollout.temperature; });
    t["phase.reward"] = {
        [](RunConfig& c, const std::string& v) {
          c.phase.reward = as_enum("phase.reward", v, "cosine, binary or hybrid", reward_kind_from_string);
        },
        [](const RunConfig& c) { return std::string(to_string(c.phase.reward)); }};
    t["phase.steps"] = int_field("phase.steps", 0, "steps ≥ 0", [](RunConfig& c) -> int& { return c.phase.steps; });
    t["phase.batch_size"] = int_field("phase.batch_size", 1, "batch_size ≥ 1", [](RunConfig& c) -> int& { return c.phase.batch_size; });
    t["phase.eval_every"] = int_field("phase.eval_every", 0, "eval_every ≥ 0", [](RunConfig& c) -> int& { return c.phase.eval_every; });

    t["trainer.lambda_sft"] = real_field("trainer.lambda_sft", non_negative, "lambda_sft ≥ 0", [](RunConfig& c) -> double& { return c.phase.trainer.lambda_sft; });
    t["trainer.lambda_rl"] = real_field("trainer.lambda_rl", non_negative, "lambda_rl ≥ 0", [](RunConfig& c) -> double& { return c.phase.trainer.lambda_rl; });
    t["trainer.clip_ratio"] = real_field("trainer.clip_ratio", [](double x) { return x > 0 && x < 1; }, "0 < clip_ratio < 1", [](RunConfig& c) -> double& { return c.phase.trainer.clip_ratio; });
    t["trainer.grad_clip_norm"] = real_field("trainer.grad_clip_norm", non_negative, "grad_clip_norm ≥ 0 (0 disables)", [](RunConfig& c) -> double& { return c.phase.trainer.grad_clip_norm; });
    t["trainer.lr"] = real_field("trainer.lr", non_negative, "lr ≥ 0", [](RunConfig& c) -> double& { return c.phase.trainer.lr; });
    t["trainer.beta1"] = real_field("trainer.beta1", unit_open, "0 ≤ beta1 < 1", [](RunConfig& c) -> double& { return c.phase.trainer.beta1; });
    t["trainer.beta2"] = real_field("trainer.beta2", unit_open, "0 ≤ beta2 < 1", [](RunConfig& c) -> double& { return c.phase.trainer.beta2; });
    t["trainer.adam_eps"] = real_field("trainer.adam_eps", positive, "adam_eps > 0", [](RunConfig& c) -> double& { return c.phase.trainer.adam_eps; });
    t["trainer.weight_decay"] = real_field("trainer.weight_decay", non_negative, "weight_decay ≥ 0", [](RunConfig& c) -> double& { return c.phase.trainer.weight_decay; });
    t["trainer.mini_batch"] = int_field("trainer.mini_batch", 1, "mini_batch ≥ 1", [](RunConfig& c) -> int& { return c.phase.trainer.mini_batch; });
    t["trainer.std_guard"] = real_field("trainer.std_guard", non_negative, "std_guard ≥ 0", [](RunConfig& c) -> double& { return c.phase.trainer.std_guard; });

    t["post.mode"] = {[](RunConfig& c, const std::string& v) {
                        c.phase.post_mode = as_enum("post.mode", v, "sft, nested_sft or nested_refine", post_mode_from_string);
                      },
                      [](const RunConfig& c) { return std::string(to_string(c.phase.post_mode)); }};
    t["post.inner_persist"] = {[](RunConfig& c, const std::string& v) { c.phase.inner_persist = parse_bool("post.inner_persist", v); },
                               [](const RunConfig& c) { return std::string(c.phase.inner_persist ? "true" : "false"); }};
    t["ttt.steps"] = int_field("ttt.steps", 0, "steps ≥ 0", [](RunConfig& c) -> int& { return c.phase.ttt_steps; });
    t["ttt.gen_len"] = int_field("ttt.gen_len", 0, "gen_len ≥ 0 (0 picks from the task)", [](RunConfig& c) -> int& { return c.ttt_gen_len; });
    t["eval.gen_len"] = int_field("eval.gen_len", 0, "gen_len ≥ 0 (0 picks from the task)", [](RunConfig& c) -> int& { return c.eval_gen_len; });

    t["data.train"] = text_field([](RunConfig& c) -> std::string& { return c.data.train; });
    t["data.valid"] = text_field([](RunConfig& c) -> std::string& { return c.data.valid; });
    t["data.tasks"] = text_field([](RunConfig& c) -> std::string& { return c.data.tasks; });
    t["data.seq_len"] = int_field("data.seq_len", 2, "seq_len ≥ 2", [](RunConfig& c) -> int& { return c.data.seq_len; });
    t["data.stride"] = int_field("data.stride", 0, "stride ≥ 0 (0 means seq_len)", [](RunConfig& c) -> int& { return c.data.stride; });
    t["data.synthetic_n"] = int_field("data.synthetic_n", 1, "synthetic_n ≥ 1", [](RunConfig& c) -> int& { return c.data.synthetic_n; });
    t["data.valid_n"] = int_field("data.valid_n", 0, "valid_n ≥ 0", [](RunConfig& c) -> int& { return c.data.valid_n; });
    t["data.task"] = {[](RunConfig& c, const std::string& v) {
                        if (v != "copy" && v != "niah") bad("data.task", "copy or niah", v);
                        c.data.task = v;
                      },
                      [](const RunConfig& c) { return c.data.task; }};
    t["data.task_n"] = int_field("data.task_n", 1, "task_n ≥ 1", [](RunConfig& c) -> int& { return c.data.task_n; });

    t["run.out"] = text_field([](RunConfig& c) -> std::string& { return c.out; });
    t["run.init"] = text_field([](RunConfig& c) -> std::string& { return c.init; });
    t["run.dump_rollouts"] = {[](RunConfig& c, const std::string& v) { c.dump_rollouts = parse_bool("run.dump_rollouts", v); },
                              [](const RunConfig& c) { return std::string(c.dump_rollouts ? "true" : "false"); }};
    t["run.seed"] = {[](RunConfig& c, const std::string& v) {
                       std::uint64_t x = 0;
                       const auto* end = v.data() + v.size();
                       const auto [ptr, ec] = std::from_chars(v.data(), end, x);
                       if (ec != std::errc() || ptr != end) bad("run.seed", "an unsigned integer", v);
                       c.seed = x;
                     },
                     [](const RunConfig& c) { return std::to_string(c.seed); }};
    return t;
  }();
  return table;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : fields()) keys.push_back(k);
  return keys;
}

KeyValues parse_key_values(const std::string& text, const std::string& source) {
  KeyValues out;
  std::map<std::string, std::size_t> first_line;
  std::istringstream in(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": missing key before '='");
    if (auto it = first_line.find(key); it != first_line.end()) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": key '" + key + "' already set on line " +
                        std::to_string(it->second));
    }
    first_line[key] = lineno;
    out[key] = value;
  }
  return out;
}

KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path.string());
}

RunConfig resolve_config(const KeyValues& file, const KeyValues& flags, Phase default_phase,
                         const std::optional<std::string>& env_seed) {
  KeyValues merged = file;
  for (const auto& [k, v] : flags) merged[k] = v;
  for (const auto& [k, v] : merged) {
    if (!fields().contains(k)) throw ConfigError("unknown key '" + k + "'");
  }
  if (!merged.contains("run.seed") && env_seed && !env_seed->empty()) merged["run.seed"] = *env_seed;

  // Phase and preset pick the defaults every other key is applied on top of.
  RunConfig cfg;
  cfg.phase.phase = default_phase;
  if (auto it = merged.find("phase.name"); it != merged.end()) fields().at("phase.name").set(cfg, it->second);
  if (auto it = merged.find("phase.preset"); it != merged.end()) fields().at("phase.preset").set(cfg, it->second);
  cfg.phase = PhaseConfig::defaults(cfg.phase.phase, cfg.preset);
  for (const auto& [k, v] : merged) fields().at(k).set(cfg, v);
  cfg.phase.seed = cfg.seed;

  try {
    cfg.model.validate();
    cfg.phase.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  if (cfg.data.seq_len > cfg.model.max_seq_len) {
    throw ConfigError("key 'data.seq_len': expected seq_len ≤ model.max_seq_len (" +
                      std::to_string(cfg.model.max_seq_len) + "), got '" + std::to_string(cfg.data.seq_len) + "'");
  }
  return cfg;
}

std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace refine
