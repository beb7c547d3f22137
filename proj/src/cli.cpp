#include "refine/cli.hpp"

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>

#include "json.hpp"
#include "refine/checkpoint.hpp"
#include "refine/eval.hpp"
#include "refine/grad_check.hpp"
#include "refine/phases.hpp"

namespace refine {

namespace {

namespace fs = std::filesystem;

constexpr std::uint64_t kTaskStream = 11;
constexpr std::uint64_t kTttSeedStream = 12;

// Options shared by every run-style subcommand.
struct RunFlags {
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::string> sweeps;
  std::map<std::string, std::string> aliased;  // config key -> value
};

void add_run_flags(CLI::App* cmd, RunFlags& f, bool sweepable) {
  cmd->add_option("--config", f.config, "flat key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", f.sets, "override one config key, key=value (repeatable)");
  const std::pair<const char*, const char*> aliases[] = {
      {"--seed", "run.seed"},         {"--out", "run.out"},         {"--init", "run.init"},
      {"--steps", "phase.steps"},     {"--preset", "phase.preset"}, {"--lambda-rl", "trainer.lambda_rl"},
      {"--lr", "trainer.lr"},         {"--train", "data.train"},    {"--valid", "data.valid"},
      {"--tasks", "data.tasks"},
  };
  for (const auto& [flag, key] : aliases) {
    const std::string k = key;
    cmd->add_option_function<std::string>(flag, [&f, k](const std::string& v) { f.aliased[k] = v; },
                                          std::string("same as --set ") + key + "=...");
  }
  if (sweepable) cmd->add_option("--sweep", f.sweeps, "axis=v1,v2,... (repeatable; axes k, c, strategy, reward or any key)");
}

KeyValues flag_values(const RunFlags& f) {
  KeyValues kv;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv[s.substr(0, eq)] = s.substr(eq + 1);
  }
  for (const auto& [k, v] : f.aliased) kv[k] = v;
  return kv;
}

std::optional<std::string> env_seed() {
  if (const char* s = std::getenv("REFINE_SEED")) return std::string(s);
  return std::nullopt;
}

RunConfig resolve(const RunFlags& f, Phase phase, const KeyValues& extra = {}) {
  const KeyValues file = f.config.empty() ? KeyValues{} : read_config_file(f.config);
  auto flags = flag_values(f);
  for (const auto& [k, v] : extra) flags[k] = v;
  return resolve_config(file, flags, phase, env_seed());
}

fs::path prepare_out_dir(const RunConfig& cfg) {
  const fs::path dir = cfg.out;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
  std::ofstream(dir / "resolved.cfg") << to_text(cfg);
  return dir;
}

ModelParams initial_params(const RunConfig& cfg) {
  if (cfg.init.empty()) return init_params(cfg.model, cfg.seed);
  auto p = load_checkpoint(cfg.init);
  if (!(p.config == cfg.model)) spdlog::info("using the model configuration stored in {}", cfg.init);
  return p;
}

void run_mid(const RunConfig& cfg, std::ostream& out) {
  const auto dir = prepare_out_dir(cfg);
  const auto data = load_training_data(cfg);
  auto params = initial_params(cfg);
  std::ofstream metrics(dir / "metrics.jsonl");
  std::optional<std::ofstream> rollouts;
  if (cfg.dump_rollouts) rollouts.emplace(dir / "rollouts.jsonl");
  const auto m = mid_train(params, data.train, data.valid, cfg.phase,
                           {&metrics, rollouts ? &*rollouts : nullptr, dir / "checkpoints"});
  save_checkpoint(params, dir / "final.ckpt");
  out << "mid-train: " << m.size() << " steps on " << data.train.size() << " sequences -> " << dir.string() << "\n";
  if (!m.empty() && m.back().val_loss) out << "final val_loss " << *m.back().val_loss << "\n";
}

void run_post(const RunConfig& cfg, std::ostream& out) {
  const auto dir = prepare_out_dir(cfg);
  std::vector<TokenSequence> samples;
  for (const auto& t : load_task_data(cfg)) samples.push_back(task_sequence(t));
  auto params = initial_params(cfg);
  std::ofstream metrics(dir / "metrics.jsonl");
  std::optional<std::ofstream> rollouts;
  if (cfg.dump_rollouts) rollouts.emplace(dir / "rollouts.jsonl");
  const auto m = post_train_nested(params, samples, cfg.phase, {&metrics, rollouts ? &*rollouts : nullptr, dir / "checkpoints"});
  save_checkpoint(params, dir / "final.ckpt");
  out << "post-train (" << to_string(cfg.phase.post_mode) << "): " << m.size() << " steps on " << samples.size()
      << " samples -> " << dir.string() << "\n";
}

int answer_len(const TaskSample& t, int configured) {
  if (configured > 0) return configured;
  if (t.meta.task == "niah") {
    std::size_t longest = 0;
    for (const auto& v : t.meta.values) longest = std::max(longest, v.size());
    return static_cast<int>(longest) + 16;
  }
  return static_cast<int>(encode(t.answer).size());
}

double task_score(const TaskSample& t, const std::string& decoded) {
  if (t.meta.task == "niah") return task_recall(decoded, t.meta.values);
  return decoded.starts_with(t.answer) ? 1.0 : 0.0;
}

const char* task_metric(const std::vector<TaskSample>& tasks) {
  return !tasks.empty() && tasks[0].meta.task == "niah" ? "recall" : "exact_match";
}

void run_ttt(const RunConfig& cfg, std::ostream& out) {
  const auto dir = prepare_out_dir(cfg);
  const auto tasks = load_task_data(cfg);
  const auto base = initial_params(cfg);
  const auto cfg_digest = digest(to_text(cfg));
  std::ofstream per_task(dir / "ttt.jsonl");
  double base_score = 0, ttt_score = 0;
  std::size_t gained = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto prompt = encode(tasks[i].prompt);
    const int len = answer_len(tasks[i], cfg.ttt_gen_len);
    const auto res = ttt_adapt(base, prompt, cfg.phase, len, Rng::derive(cfg.seed, {kTttSeedStream, i}));
    const double before = mean_prompt_logprob(base, prompt);
    const double after = mean_prompt_logprob(res.adapted, prompt);
    const double s_base = task_score(tasks[i], decode(greedy_continue(base, prompt, len)));
    const double s_ttt = task_score(tasks[i], decode(res.response));
    base_score += s_base;
    ttt_score += s_ttt;
    gained += after > before;
    nlohmann::ordered_json j;
    j["task_index"] = i;
    j["task"] = tasks[i].meta.task;
    j["adapted"] = res.adapted_applied;
    j["logprob_before"] = before;
    j["logprob_after"] = after;
    j["score_base"] = s_base;
    j["score_ttt"] = s_ttt;
    per_task << j.dump() << "\n";
  }
  const auto n = tasks.size();
  const std::string task = tasks.empty() ? "none" : tasks[0].meta.task;
  std::ofstream report(dir / "eval_report.jsonl");
  const EvalReport reports[] = {
      {task, std::string("base_") + task_metric(tasks), base_score / double(n), n, cfg.seed, cfg_digest},
      {task, std::string("ttt_") + task_metric(tasks), ttt_score / double(n), n, cfg.seed, cfg_digest},
      {task, "prompt_logprob_gain_fraction", double(gained) / double(n), n, cfg.seed, cfg_digest},
  };
  for (const auto& r : reports) {
    write_report_line(report, r);
    write_report_line(out, r);
  }
}

void run_eval(const RunConfig& cfg, std::ostream& out) {
  const auto dir = prepare_out_dir(cfg);
  const auto params = initial_params(cfg);
  const auto cfg_digest = digest(to_text(cfg));
  std::ofstream report(dir / "eval_report.jsonl");
  auto emit = [&](const EvalReport& r) {
    write_report_line(report, r);
    write_report_line(out, r);
  };
  const auto data = load_training_data(cfg);
  if (!data.valid.empty()) {
    const auto ev = eval_ntp(params, data.valid);
    emit({"ntp", "loss", ev.loss, ev.positions, cfg.seed, cfg_digest});
    emit({"ntp", "accuracy", ev.accuracy, ev.positions, cfg.seed, cfg_digest});
  }
  const auto tasks = load_task_data(cfg);
  std::vector<TaskSample> niah, copy;
  for (const auto& t : tasks) (t.meta.task == "niah" ? niah : copy).push_back(t);
  if (!niah.empty()) emit({"niah", "recall", eval_niah_recall(params, niah, cfg.eval_gen_len).recall, niah.size(), cfg.seed, cfg_digest});
  if (!copy.empty()) emit({"copy", "exact_match", eval_copy_exact(params, copy), copy.size(), cfg.seed, cfg_digest});
}

void run_diagnostics(const fs::path& run_dir, std::size_t sample_index, std::ostream& out) {
  const auto cfg = resolve_config(read_config_file(run_dir / "resolved.cfg"), {}, Phase::mid);
  const auto params = load_checkpoint(run_dir / "final.ckpt");
  const auto data = load_training_data(cfg);
  const auto& pool = data.valid.empty() ? data.train : data.valid;
  if (sample_index >= pool.size()) {
    throw std::invalid_argument("--sample " + std::to_string(sample_index) + " is out of range (" +
                                std::to_string(pool.size()) + " sequences)");
  }
  const int kernel = cfg.phase.selection.pool_kernel > 0 ? cfg.phase.selection.pool_kernel : cfg.phase.rollout.k;
  const auto paths = dump_diagnostics(run_dir / "metrics.jsonl", params, pool[sample_index].ids, kernel,
                                      run_dir / "diagnostics");
  out << "wrote " << paths.reward_series.string() << " and " << paths.entropy_profile.string() << "\n";
}

struct GenFlags {
  std::string task;
  std::size_t n = 10;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t length = 256;
  std::size_t needles = 2;
  std::size_t queries = 1;
  std::size_t key_len = 4;
  std::size_t payload_len = 16;
  std::size_t distractors = 2;
};

void run_gen(const GenFlags& g, std::ostream& out) {
  const fs::path path = g.out.empty() ? fs::path(g.task + ".jsonl") : fs::path(g.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (g.task == "corpus") {
    write_corpus(path, gen_corpus(g.n, g.length, g.seed));
    out << "wrote " << g.n << " documents to " << path.string() << "\n";
    return;
  }
  std::vector<TaskSample> tasks;
  for (std::size_t i = 0; i < g.n; ++i) {
    const auto s = Rng::derive(g.seed, {kTaskStream, i});
    tasks.push_back(g.task == "niah" ? gen_niah(g.length, g.needles, g.queries, s)
                                     : gen_copy_task(g.key_len, g.payload_len, g.distractors, s));
  }
  write_tasks(path, tasks);
  out << "wrote " << g.n << " " << g.task << " tasks to " << path.string() << "\n";
}

int run_grad_check(std::uint64_t seed, std::ostream& out) {
  bool ok = true;
  for (auto mode : {UpdateMode::per_token_delta, UpdateMode::chunked}) {
    const auto r = toy_grad_check(seed, mode);
    out << to_string(mode) << ": ntp max_rel_error " << r.ntp.max_rel_error << ", combined max_rel_error "
        << r.combined.max_rel_error << " (" << r.seconds << " s)\n";
    ok = ok && r.passed(1e-2);
  }
  out << (ok ? "grad-check passed" : "grad-check FAILED") << " (tolerance 1e-2)\n";
  return ok ? 0 : 1;
}

}  // namespace

std::string usage() {
  return "usage: refine <command> [options]\n"
         "commands:\n"
         "  mid-train         next-token training with entropy-selected rollouts\n"
         "  post-train        sft / nested_sft / nested_refine on prompt-response tasks\n"
         "  ttt-eval          adapt on each prompt, answer, and report against the base model\n"
         "  eval              held-out next-token loss/accuracy and task metrics\n"
         "  gen-data          write synthetic niah / copy tasks or a corpus\n"
         "  grad-check        finite-difference check of the training gradients\n"
         "  dump-diagnostics  reward series and entropy profile CSVs for a finished run\n"
         "run 'refine <command> --help' for options\n";
}

Corpus load_training_data(const RunConfig& cfg) {
  const auto len = static_cast<std::size_t>(cfg.data.seq_len);
  const auto stride = cfg.data.stride > 0 ? static_cast<std::size_t>(cfg.data.stride) : len;
  Corpus c;
  const bool synthetic = cfg.data.train.empty() || cfg.data.valid.empty();
  std::vector<std::string> texts;
  if (synthetic) {
    texts = gen_corpus(static_cast<std::size_t>(cfg.data.synthetic_n + cfg.data.valid_n), len, cfg.seed);
  }
  auto to_seq = [&](const std::string& text) {
    auto ids = encode(text);
    ids.resize(std::min(ids.size(), len));
    return TokenSequence{std::move(ids), std::nullopt};
  };
  const auto n_train = static_cast<std::size_t>(cfg.data.synthetic_n);
  if (!cfg.data.train.empty()) {
    c.train = load_corpus(cfg.data.train, len, stride);
  } else {
    for (std::size_t i = 0; i < n_train; ++i) c.train.push_back(to_seq(texts[i]));
  }
  if (!cfg.data.valid.empty()) {
    c.valid = load_corpus(cfg.data.valid, len, stride);
  } else {
    for (std::size_t i = n_train; i < texts.size(); ++i) c.valid.push_back(to_seq(texts[i]));
  }
  if (c.train.empty()) throw std::invalid_argument("training corpus is empty");
  return c;
}

std::vector<TaskSample> load_task_data(const RunConfig& cfg) {
  if (!cfg.data.tasks.empty()) {
    auto tasks = read_tasks(cfg.data.tasks);
    if (tasks.empty()) throw std::invalid_argument("no tasks in " + cfg.data.tasks);
    return tasks;
  }
  std::vector<TaskSample> tasks;
  for (int i = 0; i < cfg.data.task_n; ++i) {
    const auto s = Rng::derive(cfg.seed, {kTaskStream, static_cast<std::uint64_t>(i)});
    tasks.push_back(cfg.data.task == "niah" ? gen_niah(std::max<std::size_t>(256, static_cast<std::size_t>(cfg.data.seq_len) / 2), 2, 1, s)
                                            : gen_copy_task(4, 16, 2, s));
  }
  return tasks;
}

std::vector<SweepCell> expand_sweep(const std::vector<std::string>& specs) {
  static const std::map<std::string, std::string> short_axes = {
      {"k", "phase.k"}, {"c", "phase.c"}, {"strategy", "phase.strategy"}, {"reward", "phase.reward"}};
  std::vector<SweepCell> cells{{"", {}}};
  for (const auto& spec : specs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
      throw ConfigError("--sweep expects axis=v1,v2,..., got '" + spec + "'");
    }
    const auto axis = spec.substr(0, eq);
    const auto it = short_axes.find(axis);
    const auto key = it != short_axes.end() ? it->second : axis;
    std::vector<std::string> values;
    std::stringstream ss(spec.substr(eq + 1));
    for (std::string v; std::getline(ss, v, ',');) {
      if (v.empty()) throw ConfigError("--sweep '" + spec + "' has an empty value");
      values.push_back(v);
    }
    std::vector<SweepCell> next;
    for (const auto& cell : cells) {
      for (const auto& v : values) {
        SweepCell c = cell;
        if (c.assignments.contains(key)) throw ConfigError("--sweep sets '" + key + "' twice");
        c.assignments[key] = v;
        c.name += (c.name.empty() ? "" : "_") + axis + "=" + v;
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }
  return cells;
}

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.size() < 2) {
    err << usage();
    return 2;
  }
  CLI::App app{"training, evaluation and diagnostics for fast-weight language models", "refine"};
  app.require_subcommand(1);

  RunFlags mid_f, post_f, ttt_f, eval_f;
  auto* mid = app.add_subcommand("mid-train", "next-token training with entropy-selected rollouts");
  add_run_flags(mid, mid_f, true);
  auto* post = app.add_subcommand("post-train", "sft / nested_sft / nested_refine on prompt-response tasks");
  add_run_flags(post, post_f, true);
  auto* ttt = app.add_subcommand("ttt-eval", "adapt on each prompt, answer, and compare with the base model");
  add_run_flags(ttt, ttt_f, false);
  auto* ev = app.add_subcommand("eval", "held-out next-token loss/accuracy and task metrics");
  add_run_flags(ev, eval_f, false);

  GenFlags gen_f;
  auto* gen = app.add_subcommand("gen-data", "write synthetic tasks or a corpus as JSONL");
  gen->add_option("--task", gen_f.task, "niah, copy or corpus")->required()->check(CLI::IsMember({"niah", "copy", "corpus"}));
  gen->add_option("--n", gen_f.n, "number of tasks or documents")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_f.seed, "generator seed");
  gen->add_option("--out", gen_f.out, "output path (default <task>.jsonl)");
  gen->add_option("--length", gen_f.length, "niah prompt length or corpus document length, in bytes");
  gen->add_option("--needles", gen_f.needles, "niah needles per prompt");
  gen->add_option("--queries", gen_f.queries, "niah needles queried per prompt");
  gen->add_option("--key-len", gen_f.key_len, "copy task key length");
  gen->add_option("--payload-len", gen_f.payload_len, "copy task payload length");
  gen->add_option("--distractors", gen_f.distractors, "copy task distractor lines");

  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of the training gradients (float64)");
  gc->add_option("--seed", gc_seed, "model and sequence seed");

  std::string diag_run;
  std::size_t diag_sample = 0;
  auto* diag = app.add_subcommand("dump-diagnostics", "reward series and entropy profile CSVs for a finished run");
  diag->add_option("--run", diag_run, "run directory with resolved.cfg, metrics.jsonl and final.ckpt")->required();
  diag->add_option("--sample", diag_sample, "index of the held-out sequence to profile");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << usage();
    return 2;
  }

  try {
    auto run_grid = [&](const RunFlags& f, Phase phase, void (*body)(const RunConfig&, std::ostream&)) {
      if (f.sweeps.empty()) {
        body(resolve(f, phase), out);
        return;
      }
      const auto root = resolve(f, phase);
      const fs::path root_dir = root.out;
      fs::create_directories(root_dir);
      std::ofstream index(root_dir / "sweep.tsv");
      index << "cell\tdir\n";
      for (const auto& cell : expand_sweep(f.sweeps)) {
        auto extra = cell.assignments;
        extra["run.out"] = (root_dir / cell.name).string();
        const auto cfg = resolve(f, phase, extra);
        out << "[" << cell.name << "] ";
        body(cfg, out);
        index << cell.name << "\t" << extra["run.out"] << "\n";
      }
    };
    if (mid->parsed()) run_grid(mid_f, Phase::mid, run_mid);
    else if (post->parsed()) run_grid(post_f, Phase::post, run_post);
    else if (ttt->parsed()) run_ttt(resolve(ttt_f, Phase::ttt), out);
    else if (ev->parsed()) run_eval(resolve(eval_f, Phase::mid), out);
    else if (gen->parsed()) run_gen(gen_f, out);
    else if (gc->parsed()) return run_grad_check(gc_seed, out);
    else if (diag->parsed()) run_diagnostics(diag_run, diag_sample, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace refine
