#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "refine/phases.hpp"

using namespace refine;

namespace {

ModelConfig small_model(int vocab = 32) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 16;
  cfg.d_fast = 8;
  cfg.n_layers = 1;
  cfg.max_seq_len = 512;
  return cfg;
}

std::vector<TokenSequence> random_corpus(std::size_t n, std::size_t len, int vocab, unsigned seed) {
  std::mt19937 gen(seed);
  // A small repeating alphabet so there is something to learn.
  std::uniform_int_distribution<int> d(0, vocab / 4);
  std::vector<TokenSequence> out(n);
  for (auto& s : out) {
    for (std::size_t t = 0; t < len; ++t) s.ids.push_back(t % 3 == 2 ? (s.ids[t - 1] + 1) % vocab : d(gen));
  }
  return out;
}

PhaseConfig quick(Phase phase) {
  auto cfg = PhaseConfig::defaults(phase, Preset::desk);
  cfg.selection.chunks = 2;
  cfg.rollout.k = 3;
  cfg.batch_size = 4;
  cfg.trainer.mini_batch = 2;
  cfg.steps = 3;
  cfg.eval_every = 2;
  cfg.seed = 11;
  return cfg;
}

// Plain NTP loop written against the tape directly.
void ntp_reference_loop(ModelParams& params, const std::vector<TokenSequence>& corpus, const PhaseConfig& cfg) {
  BatchSampler sampler(corpus.size(), data_order_seed(cfg.seed));
  AdamW opt(params);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(static_cast<std::size_t>(cfg.batch_size));
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(cfg.trainer.mini_batch)) {
      const auto end = std::min(idx.size(), start + static_cast<std::size_t>(cfg.trainer.mini_batch));
      auto grads = zero_gradients(params);
      for (std::size_t j = start; j < end; ++j) {
        nx::Tape<float> tape;
        auto vars = bind(tape, params, true);
        auto loss = nx::scale(ntp_loss_tape<float>(params.config, vars, corpus[idx[j]].ids, {}),
                              static_cast<float>(cfg.trainer.lambda_sft) / static_cast<float>(end - start));
        auto g = tape.backward(loss);
        for (std::size_t i = 0; i < vars.size(); ++i)
          for (std::size_t e = 0; e < grads[i].size(); ++e) grads[i][e] += g[vars[i]][e];
      }
      clip_global_norm(grads, cfg.trainer.grad_clip_norm);
      opt.step(params, grads, cfg.trainer);
    }
  }
}

}  // namespace

TEST_CASE("full preset defaults match the reference settings") {
  const auto mid = PhaseConfig::defaults(Phase::mid);
  const auto post = PhaseConfig::defaults(Phase::post);
  const auto ttt = PhaseConfig::defaults(Phase::ttt);
  for (const auto* c : {&mid, &post, &ttt}) {
    CHECK(c->selection.chunks == 8);
    CHECK(c->rollout.k == 5);
    CHECK(c->rollout.n == 1);
    CHECK(c->trainer.lambda_sft == 1.0);
    CHECK(c->trainer.lr == 1e-6);
  }
  CHECK(mid.reward == RewardKind::cosine);
  CHECK(post.reward == RewardKind::hybrid);
  CHECK(ttt.reward == RewardKind::binary);
  CHECK(mid.trainer.lambda_rl == 0.2);
  CHECK(post.trainer.lambda_rl == 0.2);
  CHECK(ttt.trainer.lambda_rl == 0.4);
  CHECK(mid.batch_size == 128);
  CHECK(post.batch_size == 64);
  CHECK(ttt.batch_size == 8);
  CHECK(mid.trainer.mini_batch == 32);
  CHECK(post.trainer.mini_batch == 16);
  CHECK(ttt.trainer.mini_batch == 4);
}

TEST_CASE("desk preset keeps the structure of the full preset") {
  for (auto phase : {Phase::mid, Phase::post, Phase::ttt}) {
    const auto p = PhaseConfig::defaults(phase, Preset::full);
    const auto d = PhaseConfig::defaults(phase, Preset::desk);
    CHECK(d.selection.chunks == p.selection.chunks);
    CHECK(d.rollout.k == p.rollout.k);
    CHECK(d.rollout.n == p.rollout.n);
    CHECK(d.reward == p.reward);
    CHECK(d.trainer.lambda_rl == p.trainer.lambda_rl);
    CHECK(d.batch_size <= p.batch_size);
  }
}

TEST_CASE("enum names round-trip") {
  for (auto p : {Phase::mid, Phase::post, Phase::ttt}) CHECK(phase_from_string(to_string(p)) == p);
  for (auto p : {Preset::desk, Preset::full}) CHECK(preset_from_string(to_string(p)) == p);
  for (auto m : {PostMode::sft, PostMode::nested_sft, PostMode::nested_refine})
    CHECK(post_mode_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(phase_from_string("pre"), std::invalid_argument);
}

TEST_CASE("batch sampler visits every sequence once per epoch and reshuffles") {
  BatchSampler s(7, 3);
  std::multiset<std::size_t> first;
  for (auto i : s.next(7)) first.insert(i);
  CHECK(first.size() == 7);
  CHECK(std::set<std::size_t>(first.begin(), first.end()).size() == 7);
  CHECK(s.epoch() == 0);
  auto more = s.next(10);
  CHECK(s.epoch() == 2);
  CHECK(std::set<std::size_t>(more.begin(), more.begin() + 7).size() == 7);

  BatchSampler a(50, 9), b(50, 9);
  for (int i = 0; i < 20; ++i) CHECK(a.next(8) == b.next(8));
}

TEST_CASE("prepare_unit selects one position per chunk and standardizes per sequence") {
  const auto params = init_params(small_model(), 1);
  auto cfg = quick(Phase::mid);
  const auto corpus = random_corpus(1, 40, 32, 2);
  const auto unit = prepare_unit(params, corpus[0].ids, cfg, 5, 0);
  REQUIRE(unit.records.size() == static_cast<std::size_t>(cfg.selection.chunks * cfg.rollout.n));
  double mean = 0;
  for (const auto& r : unit.records) {
    CHECK(r.tokens.size() == static_cast<std::size_t>(cfg.rollout.k));
    CHECK(r.reward >= -1.0);
    CHECK(r.reward <= 1.0);
    mean += r.advantage;
  }
  CHECK(mean == doctest::Approx(0).epsilon(1e-9));

  const auto again = prepare_unit(params, corpus[0].ids, cfg, 5, 0);
  for (std::size_t i = 0; i < unit.records.size(); ++i) {
    CHECK(again.records[i].position == unit.records[i].position);
    CHECK(again.records[i].tokens == unit.records[i].tokens);
  }

  const std::vector<int> short_ids(7, 1);
  CHECK(prepare_unit(params, short_ids, cfg, 5, 0).records.empty());
  cfg.trainer.lambda_rl = 0;
  CHECK(prepare_unit(params, corpus[0].ids, cfg, 5, 0).records.empty());
}

TEST_CASE("mid_train with zero steps leaves parameters unchanged") {
  auto params = init_params(small_model(), 3);
  const auto before = params;
  auto cfg = quick(Phase::mid);
  cfg.steps = 0;
  CHECK(mid_train(params, random_corpus(4, 30, 32, 1), {}, cfg).empty());
  CHECK(bitwise_equal(params, before));
  CHECK_THROWS_AS(mid_train(params, {}, {}, quick(Phase::mid)), std::invalid_argument);
}

TEST_CASE("mid_train without the RL term matches a plain NTP loop bitwise") {
  const auto corpus = random_corpus(10, 30, 32, 4);
  auto cfg = quick(Phase::mid);
  cfg.trainer.lambda_rl = 0;
  cfg.steps = 4;
  auto a = init_params(small_model(), 5);
  auto b = a;
  mid_train(a, corpus, {}, cfg);
  ntp_reference_loop(b, corpus, cfg);
  CHECK(bitwise_equal(a, b));
}

TEST_CASE("mid_train is reproducible and writes metrics, rollouts and checkpoints") {
  const auto corpus = random_corpus(50, 30, 32, 6);
  const auto valid = random_corpus(3, 30, 32, 7);
  auto cfg = quick(Phase::mid);
  cfg.steps = 5;
  cfg.eval_every = 2;
  const auto dir = std::filesystem::temp_directory_path() / "refine_test_phases_ckpt";
  std::filesystem::remove_all(dir);

  std::ostringstream m1, r1, m2;
  auto a = init_params(small_model(), 8);
  auto b = a;
  const auto metrics = mid_train(a, corpus, valid, cfg, {&m1, &r1, dir});
  mid_train(b, corpus, valid, cfg, {&m2, nullptr, {}});
  CHECK(bitwise_equal(a, b));
  CHECK(m1.str() == m2.str());
  REQUIRE(metrics.size() == 5);
  CHECK(metrics.back().loss_ntp == metrics.back().loss_ntp);
  for (const auto& m : metrics) {
    CHECK(m.phase == "mid");
    CHECK(m.updates == 2);
    CHECK(m.val_loss.has_value() == (m.step % 2 == 0 || m.step == 5));
  }

  std::istringstream rin(r1.str());
  std::string line;
  std::size_t records = 0;
  while (std::getline(rin, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j["tokens"].size() == 3);
    ++records;
  }
  CHECK(records == 5 * 4 * 2);
  CHECK(std::filesystem::exists(dir / "step_2.ckpt"));
  CHECK(std::filesystem::exists(dir / "step_4.ckpt"));
  CHECK(std::filesystem::exists(dir / "step_5.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("enabling RL does not change which sequences are drawn") {
  // Data order comes from its own stream; only the seed matters.
  BatchSampler a(20, data_order_seed(4)), b(20, data_order_seed(4));
  CHECK(a.next(30) == b.next(30));
  CHECK(data_order_seed(4) != data_order_seed(5));
}

namespace {

std::vector<TokenSequence> span_samples(std::size_t n, std::size_t prompt, std::size_t response, unsigned seed) {
  auto seqs = random_corpus(n, prompt + response, 32, seed);
  for (auto& s : seqs) s.prompt_len = prompt;
  return seqs;
}

}  // namespace

TEST_CASE("response mask keeps exactly the response targets") {
  const auto params = init_params(small_model(), 9);
  const auto s = span_samples(1, 12, 9, 3)[0];
  std::vector<std::uint8_t> mask(s.ids.size() - 1);
  for (std::size_t t = 0; t + 1 < s.ids.size(); ++t) mask[t] = t + 1 >= *s.prompt_len;
  // Oracle: hand-summed CE over the response tokens of a plain forward.
  const auto full = forward_sequence(params, s.ids, false);
  double sum = 0;
  for (std::size_t t = *s.prompt_len - 1; t + 1 < s.ids.size(); ++t) sum -= full.next_token_logprobs[t];
  const double expected = sum / static_cast<double>(s.ids.size() - *s.prompt_len);
  CHECK(ntp_loss(params, s.ids, mask) == doctest::Approx(expected).epsilon(1e-5));
}

TEST_CASE("nested refine without the RL term equals nested sft update for update") {
  const auto samples = span_samples(6, 30, 10, 12);
  auto cfg = quick(Phase::post);
  cfg.trainer.lambda_rl = 0;
  auto a = init_params(small_model(), 13);
  auto b = a;
  cfg.post_mode = PostMode::nested_refine;
  const auto ma = post_train_nested(a, samples, cfg);
  cfg.post_mode = PostMode::nested_sft;
  const auto mb = post_train_nested(b, samples, cfg);
  CHECK(bitwise_equal(a, b));
  REQUIRE(ma.size() == mb.size());
  for (std::size_t i = 0; i < ma.size(); ++i) CHECK(ma[i].loss_ntp == mb[i].loss_ntp);
}

TEST_CASE("empty prompt span reduces nested modes to plain response sft") {
  auto samples = span_samples(5, 0, 24, 14);
  auto cfg = quick(Phase::post);
  auto base = init_params(small_model(), 15);
  auto sft = base;
  cfg.post_mode = PostMode::sft;
  post_train_nested(sft, samples, cfg);
  for (auto mode : {PostMode::nested_sft, PostMode::nested_refine}) {
    auto p = base;
    cfg.post_mode = mode;
    post_train_nested(p, samples, cfg);
    CHECK(bitwise_equal(p, sft));
  }
}

TEST_CASE("nested post-training runs the refine inner loop and honours the persistence flag") {
  const auto samples = span_samples(6, 30, 10, 16);
  auto cfg = quick(Phase::post);
  cfg.post_mode = PostMode::nested_refine;
  auto keep = init_params(small_model(), 17);
  auto drop = keep;
  std::ostringstream rollouts;
  const auto m = post_train_nested(keep, samples, cfg, {nullptr, &rollouts, {}});
  CHECK(!rollouts.str().empty());
  for (const auto& s : m) CHECK(s.reward_std >= 0);
  cfg.inner_persist = false;
  post_train_nested(drop, samples, cfg);
  CHECK(!bitwise_equal(keep, drop));

  auto missing = samples;
  missing[2].prompt_len.reset();
  CHECK_THROWS_AS(post_train_nested(keep, missing, cfg), std::invalid_argument);
  auto no_response = samples;
  no_response[0].prompt_len = no_response[0].ids.size();
  CHECK_THROWS_AS(post_train_nested(keep, no_response, cfg), std::invalid_argument);
}

TEST_CASE("ttt adapts a clone and never touches the base") {
  const auto base = init_params(small_model(kVocabSize), 21);
  const auto snapshot = base;
  auto cfg = quick(Phase::ttt);
  cfg.batch_size = 2;
  const auto task = gen_copy_task(4, 12, 2, 3);
  const auto prompt = encode(task.prompt);

  cfg.ttt_steps = 0;
  const auto plain = ttt_adapt(base, prompt, cfg, 8, 1);
  CHECK(!plain.adapted_applied);
  CHECK(plain.response == greedy_continue(base, prompt, 8));

  cfg.ttt_steps = 1;
  const auto adapted = ttt_adapt(base, prompt, cfg, 8, 1);
  CHECK(adapted.adapted_applied);
  CHECK(bitwise_equal(base, snapshot));
  CHECK(!bitwise_equal(adapted.adapted, base));
  CHECK(mean_prompt_logprob(adapted.adapted, prompt) > mean_prompt_logprob(base, prompt));

  const std::vector<int> tiny_prompt(5, 65);
  const auto fallback = ttt_adapt(base, tiny_prompt, cfg, 4, 1);
  CHECK(!fallback.adapted_applied);
  CHECK(fallback.response == greedy_continue(base, tiny_prompt, 4));
}

TEST_CASE("ttt results do not depend on the order prompts are served") {
  const auto base = init_params(small_model(kVocabSize), 22);
  auto cfg = quick(Phase::ttt);
  cfg.batch_size = 2;
  const auto p1 = encode(gen_copy_task(4, 10, 1, 1).prompt);
  const auto p2 = encode(gen_copy_task(4, 10, 1, 2).prompt);
  const auto a1 = ttt_adapt(base, p1, cfg, 6, 7);
  const auto a2 = ttt_adapt(base, p2, cfg, 6, 8);
  const auto b2 = ttt_adapt(base, p2, cfg, 6, 8);
  const auto b1 = ttt_adapt(base, p1, cfg, 6, 7);
  CHECK(a1.response == b1.response);
  CHECK(a2.response == b2.response);
  CHECK(bitwise_equal(a1.adapted, b1.adapted));
}
