#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "refine/cli.hpp"

using namespace refine;

namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("refine_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "refine");
  std::ostringstream out, err;
  const int rc = run_command(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return rc;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::vector<std::string> kTinyRun = {
    "--preset", "desk", "--set", "data.seq_len=80", "--set", "data.synthetic_n=6", "--set", "data.valid_n=2",
    "--set", "model.d_model=16", "--set", "model.d_fast=8", "--set", "model.n_layers=1", "--set",
    "phase.batch_size=2", "--set", "trainer.mini_batch=2", "--set", "phase.c=2", "--steps", "2"};

std::vector<std::string> tiny(std::string cmd, const fs::path& out) {
  std::vector<std::string> a{std::move(cmd)};
  a.insert(a.end(), kTinyRun.begin(), kTinyRun.end());
  a.push_back("--out");
  a.push_back(out.string());
  return a;
}

}  // namespace

TEST_CASE("key-value parsing handles comments and rejects malformed lines") {
  const auto kv = parse_key_values("# header\nphase.k = 3  # trailing\n\n  model.d_model=8\n");
  CHECK(kv.size() == 2);
  CHECK(kv.at("phase.k") == "3");
  CHECK(kv.at("model.d_model") == "8");
  CHECK_THROWS_WITH_AS(parse_key_values("phase.k 3"), doctest::Contains("expected 'key = value'"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_key_values("phase.k=3\nphase.k=4"), doctest::Contains("already set on line 1"), ConfigError);
}

TEST_CASE("an empty config resolves to the published mid-training defaults") {
  const auto cfg = resolve_config({}, {}, Phase::mid);
  CHECK(cfg.phase.selection.chunks == 8);
  CHECK(cfg.phase.rollout.k == 5);
  CHECK(cfg.phase.rollout.n == 1);
  CHECK(cfg.phase.trainer.lambda_rl == 0.2);
  CHECK(cfg.phase.reward == RewardKind::cosine);
  CHECK(cfg.phase.batch_size == 128);
  CHECK(cfg.seed == 0);

  const auto ttt = resolve_config({{"phase.name", "ttt"}}, {}, Phase::mid);
  CHECK(ttt.phase.reward == RewardKind::binary);
  CHECK(ttt.phase.trainer.lambda_rl == 0.4);
  CHECK(ttt.phase.batch_size == 8);
}

TEST_CASE("flags override the file and the seed falls back to the environment") {
  const KeyValues file{{"trainer.lambda_rl", "0.1"}, {"run.seed", "5"}};
  CHECK(resolve_config(file, {{"trainer.lambda_rl", "0.4"}}, Phase::mid).phase.trainer.lambda_rl == 0.4);
  CHECK(resolve_config(file, {}, Phase::mid).phase.trainer.lambda_rl == 0.1);

  CHECK(resolve_config(file, {{"run.seed", "9"}}, Phase::mid, "3").seed == 9);
  CHECK(resolve_config(file, {}, Phase::mid, "3").seed == 5);
  CHECK(resolve_config({}, {}, Phase::mid, "3").seed == 3);
  CHECK(resolve_config({}, {}, Phase::mid).seed == 0);
  CHECK(resolve_config({}, {}, Phase::mid, "3").phase.seed == 3);
}

TEST_CASE("validation names the key and the expected form") {
  CHECK_THROWS_WITH_AS(resolve_config({{"phase.c", "-1"}}, {}, Phase::mid), doctest::Contains("c ≥ 1"), ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({{"phase.c", "-1"}}, {}, Phase::mid), doctest::Contains("phase.c"), ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({{"phase.kk", "1"}}, {}, Phase::mid), doctest::Contains("unknown key 'phase.kk'"), ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({{"trainer.lr", "fast"}}, {}, Phase::mid), doctest::Contains("trainer.lr"), ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({{"phase.reward", "dense"}}, {}, Phase::mid), doctest::Contains("cosine, binary or hybrid"), ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({{"post.inner_persist", "maybe"}}, {}, Phase::mid), doctest::Contains("true or false"), ConfigError);
  CHECK_THROWS_AS(resolve_config({{"data.seq_len", "600"}}, {}, Phase::mid), ConfigError);
}

TEST_CASE("resolution is independent of line order and round-trips through text") {
  const std::string a = "phase.k = 3\nphase.preset = desk\ntrainer.lr = 0.01\nphase.name = post\n";
  const std::string b = "phase.name = post\ntrainer.lr = 0.01\nphase.preset = desk\nphase.k = 3\n";
  const auto ca = resolve_config(parse_key_values(a), {}, Phase::mid);
  const auto cb = resolve_config(parse_key_values(b), {}, Phase::mid);
  CHECK(to_text(ca) == to_text(cb));
  CHECK(ca.phase.rollout.k == 3);
  CHECK(ca.phase.trainer.lr == 0.01);
  CHECK(ca.phase.reward == RewardKind::hybrid);

  const auto again = resolve_config(parse_key_values(to_text(ca)), {}, Phase::mid);
  CHECK(to_text(again) == to_text(ca));
  // Every key appears exactly once in the resolved text.
  CHECK(parse_key_values(to_text(ca)).size() == config_keys().size());
}

TEST_CASE("sweep expands to the full grid of the ablation axes") {
  const auto cells = expand_sweep({"k=1,3,5,7", "c=2,4,8", "strategy=entropy_weighted,uniform,argmax,argmin",
                                   "reward=cosine,binary,hybrid"});
  CHECK(cells.size() == 4 * 3 * 4 * 3);
  std::set<std::string> names;
  for (const auto& c : cells) {
    names.insert(c.name);
    CHECK(c.assignments.size() == 4);
    CHECK(c.assignments.contains("phase.strategy"));
    CHECK_NOTHROW(resolve_config({}, c.assignments, Phase::mid));
  }
  CHECK(names.size() == cells.size());
  CHECK_THROWS_AS(expand_sweep({"k"}), ConfigError);
  CHECK_THROWS_AS(expand_sweep({"k=1", "k=2"}), ConfigError);
}

TEST_CASE("usage on missing or unknown commands") {
  std::string out, err;
  CHECK(run({}, &out, &err) != 0);
  CHECK(err.find("usage:") != std::string::npos);
  CHECK(run({"bogus"}, &out, &err) != 0);
  CHECK(err.find("usage:") != std::string::npos);
  CHECK(run({"mid-train", "--help"}, &out) == 0);
  CHECK(out.find("--lambda-rl") != std::string::npos);
}

TEST_CASE("gen-data writes the requested number of tasks") {
  const auto dir = scratch("gen");
  CHECK(run({"gen-data", "--task", "niah", "--n", "10", "--seed", "7", "--out", (dir / "niah.jsonl").string()}) == 0);
  CHECK(read_tasks(dir / "niah.jsonl").size() == 10);
  CHECK(run({"gen-data", "--task", "copy", "--n", "3", "--out", (dir / "copy.jsonl").string()}) == 0);
  const auto copies = read_tasks(dir / "copy.jsonl");
  CHECK(copies.size() == 3);
  CHECK(copies[0].meta.task == "copy");
  CHECK(run({"gen-data", "--task", "corpus", "--n", "4", "--length", "100", "--out", (dir / "c.jsonl").string()}) == 0);
  CHECK(load_corpus(dir / "c.jsonl", 1000, 1000).size() == 4);
  CHECK(run({"gen-data", "--task", "poems"}) != 0);
  fs::remove_all(dir);
}

TEST_CASE("a mid-train run records its config, is reproducible, and feeds diagnostics") {
  const auto dir = scratch("mid");
  std::string err;
  REQUIRE(run(tiny("mid-train", dir / "a"), nullptr, &err) == 0);
  REQUIRE(run(tiny("mid-train", dir / "b")) == 0);
  CHECK(slurp(dir / "a" / "metrics.jsonl") == slurp(dir / "b" / "metrics.jsonl"));
  CHECK(fs::exists(dir / "a" / "final.ckpt"));
  const auto resolved = resolve_config(read_config_file(dir / "a" / "resolved.cfg"), {}, Phase::mid);
  CHECK(resolved.phase.steps == 2);
  CHECK(resolved.model.d_model == 16);

  CHECK(run({"dump-diagnostics", "--run", (dir / "a").string()}) == 0);
  CHECK(fs::exists(dir / "a" / "diagnostics" / "reward_series.csv"));
  CHECK(run({"dump-diagnostics", "--run", (dir / "missing").string()}) != 0);

  auto post = tiny("post-train", dir / "post");
  post.insert(post.end(), {"--set", "data.task_n=3", "--init", (dir / "a" / "final.ckpt").string()});
  CHECK(run(post) == 0);
  CHECK(fs::exists(dir / "post" / "metrics.jsonl"));
  fs::remove_all(dir);
}

TEST_CASE("sweeps write one metrics file per cell") {
  const auto dir = scratch("sweep");
  auto args = tiny("mid-train", dir);
  args.insert(args.end(), {"--sweep", "k=1,3", "--sweep", "strategy=argmax,argmin"});
  REQUIRE(run(args) == 0);
  for (const char* cell : {"k=1_strategy=argmax", "k=1_strategy=argmin", "k=3_strategy=argmax", "k=3_strategy=argmin"}) {
    CHECK(fs::exists(dir / cell / "metrics.jsonl"));
    CHECK(fs::exists(dir / cell / "resolved.cfg"));
  }
  fs::remove_all(dir);
}
