#include <random>

#include "doctest.h"
#include "refine/model.hpp"
#include "refine/numerics/gradcheck.hpp"

using namespace refine;

namespace {

ModelConfig small_config(UpdateMode mode = UpdateMode::per_token_delta) {
  ModelConfig cfg;
  cfg.vocab_size = 20;
  cfg.d_model = 16;
  cfg.d_fast = 8;
  cfg.n_layers = 2;
  cfg.update_mode = mode;
  cfg.chunk_size = 3;
  cfg.max_seq_len = 64;
  return cfg;
}

std::vector<int> random_ids(std::size_t n, int vocab, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_int_distribution<int> d(0, vocab - 1);
  std::vector<int> ids(n);
  for (auto& x : ids) x = d(gen);
  return ids;
}

bool rows_equal(const nx::Array<float>& a, const nx::Array<float>& b, std::size_t rows) {
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < rows * n; ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg;
  cfg.vocab_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS_AS(init_params(cfg, 0), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.d_fast = cfg.d_model + 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.eta = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.chunk_size = cfg.max_seq_len + 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK(update_mode_from_string("chunked") == UpdateMode::chunked);
  CHECK_THROWS(update_mode_from_string("bogus"));
}

TEST_CASE("init is deterministic per seed") {
  const auto cfg = small_config();
  CHECK(bitwise_equal(init_params(cfg, 3), init_params(cfg, 3)));
  CHECK_FALSE(bitwise_equal(init_params(cfg, 1), init_params(cfg, 2)));
  const auto p = init_params(cfg, 3);
  CHECK(p.tensors.size() == 3 + 8 * static_cast<std::size_t>(cfg.n_layers));
  CHECK(p.names.front() == "embed");
  CHECK(p.names.back() == "head");
}

TEST_CASE("forward is deterministic and causal") {
  for (auto mode : {UpdateMode::per_token_delta, UpdateMode::chunked}) {
    const auto cfg = small_config(mode);
    const auto p = init_params(cfg, 7);
    const auto ids = random_ids(16, cfg.vocab_size, 1);
    const auto a = forward_sequence(p, ids, false);
    const auto b = forward_sequence(p, ids, false);
    CHECK(bitwise_equal(a.logits, b.logits));
    CHECK(a.next_token_logprobs.size() == 15);
    if (mode == UpdateMode::per_token_delta) {
      for (std::size_t t = 0; t < 15; ++t) {
        auto other = ids;
        for (std::size_t j = t + 1; j < other.size(); ++j) other[j] = (other[j] + 5) % cfg.vocab_size;
        const auto c = forward_sequence(p, other, false);
        CHECK(rows_equal(a.logits, c.logits, t + 1));
        CHECK(rows_equal(a.hidden, c.hidden, t + 1));
      }
    }
  }
}

TEST_CASE("chunked mode is causal across chunk boundaries") {
  // Positions read the state from before their chunk, so rows of a chunk
  // never see later tokens either.
  const auto cfg = small_config(UpdateMode::chunked);
  const auto p = init_params(cfg, 8);
  const auto ids = random_ids(12, cfg.vocab_size, 2);
  const auto a = forward_sequence(p, ids, false);
  for (std::size_t t = 0; t < 11; ++t) {
    auto other = ids;
    other[t + 1] = (other[t + 1] + 1) % cfg.vocab_size;
    CHECK(rows_equal(a.logits, forward_sequence(p, other, false).logits, t + 1));
  }
}

TEST_CASE("one-token sequence sees only the residual path") {
  auto cfg = small_config();
  auto p = init_params(cfg, 9);
  const std::vector<int> ids{4};
  const auto base = forward_sequence(p, ids, false);
  // With W0 = 0 the mixer output is zero, so the output projections cannot matter.
  for (std::size_t l = 0; l < 2; ++l) {
    auto& wo = p.tensors[p.layer_index(l, ModelParams::wo)];
    for (auto& x : wo.mutable_data()) x *= -3.0f;
  }
  CHECK(bitwise_equal(base.logits, forward_sequence(p, ids, false).logits));
}

TEST_CASE("forward rejects out-of-vocabulary ids and overlong input") {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 1);
  CHECK_THROWS(forward_sequence(p, std::vector<int>{1, cfg.vocab_size}, false));
  CHECK_THROWS(forward_sequence(p, std::vector<int>{-1}, false));
  CHECK_THROWS(forward_sequence(p, std::vector<int>(65, 1), false));
}

TEST_CASE("captured states match a forward of the prefix") {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 11);
  const auto ids = random_ids(20, cfg.vocab_size, 3);
  const auto full = forward_sequence(p, ids, true);
  REQUIRE(full.states.has_value());
  REQUIRE((*full.states)[0].size() == ids.size() + 1);
  for (std::size_t t = 1; t <= ids.size(); ++t) {
    const auto prefix = forward_sequence(p, std::span<const int>(ids.data(), t), true);
    for (std::size_t l = 0; l < 2; ++l) {
      CHECK(bitwise_equal((*prefix.states)[l].back().w, (*full.states)[l][t].w));
      CHECK((*full.states)[l][t].position == t);
    }
  }
}

TEST_CASE("incremental decoding mirrors the full forward") {
  for (auto mode : {UpdateMode::per_token_delta, UpdateMode::chunked}) {
    const auto cfg = small_config(mode);
    const auto p = init_params(cfg, 12);
    const auto ids = random_ids(11, cfg.vocab_size, 4);
    const auto full = forward_sequence(p, ids, false);
    auto st = DecodeState::empty(cfg);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      const auto out = decode_step(p, st, ids[t]);
      for (std::size_t j = 0; j < out.logits.size(); ++j) CHECK(out.logits[j] == full.logits.at(t, j));
      for (std::size_t j = 0; j < out.hidden.size(); ++j) CHECK(out.hidden[j] == full.hidden.at(t, j));
    }
  }
}

TEST_CASE("generation matches a re-forward of prefix plus continuation") {
  for (auto mode : {UpdateMode::per_token_delta, UpdateMode::chunked}) {
    const auto cfg = small_config(mode);
    const auto p = init_params(cfg, 13);
    const auto ids = random_ids(10, cfg.vocab_size, 5);
    const std::size_t t = 6;
    PrefixState prefix{consume(p, std::span<const int>(ids.data(), t)), ids[t], t};
    for (auto spec : {DecodeSpec::greedy(), DecodeSpec::sample(0.7, 99)}) {
      const auto g = generate(p, prefix, 4, spec);
      REQUIRE(g.tokens.size() == 4);
      const auto again = generate(p, prefix, 4, spec);
      CHECK(g.tokens == again.tokens);
      CHECK(bitwise_equal(g.hidden, again.hidden));

      std::vector<int> seq(ids.begin(), ids.begin() + static_cast<long>(t + 1));
      seq.insert(seq.end(), g.tokens.begin(), g.tokens.end());
      const auto ref = forward_sequence(p, seq, false);
      for (std::size_t j = 0; j < 4; ++j) {
        for (std::size_t d = 0; d < static_cast<std::size_t>(cfg.d_model); ++d) {
          CHECK(std::abs(g.hidden.at(j, d) - ref.hidden.at(t + 1 + j, d)) <= 1e-5);
        }
        // Token j is predicted from row t + j.
        const double scale = spec.scoring_temperature();
        double mx = -1e30;
        for (std::size_t v = 0; v < static_cast<std::size_t>(cfg.vocab_size); ++v)
          mx = std::max(mx, ref.logits.at(t + j, v) / scale);
        double z = 0;
        for (std::size_t v = 0; v < static_cast<std::size_t>(cfg.vocab_size); ++v)
          z += std::exp(ref.logits.at(t + j, v) / scale - mx);
        const double lp = ref.logits.at(t + j, static_cast<std::size_t>(g.tokens[j])) / scale - mx - std::log(z);
        CHECK(g.logprobs[j] == doctest::Approx(lp).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("sampling depends on the seed, greedy does not") {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 14);
  PrefixState prefix{DecodeState::empty(cfg), 3, 0};
  bool differs = false;
  const auto first = generate(p, prefix, 8, DecodeSpec::sample(2.0, 1));
  for (std::uint64_t s = 2; s < 20 && !differs; ++s) differs = generate(p, prefix, 8, DecodeSpec::sample(2.0, s)).tokens != first.tokens;
  CHECK(differs);
}

TEST_CASE("generation checks its budget") {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 15);
  const auto ids = random_ids(60, cfg.vocab_size, 6);
  PrefixState prefix{consume(p, std::span<const int>(ids.data(), 59)), ids[59], 59};
  CHECK_THROWS(generate(p, prefix, 0, DecodeSpec::greedy()));
  CHECK_THROWS(generate(p, prefix, 5, DecodeSpec::greedy()));
  CHECK_NOTHROW(generate(p, prefix, 4, DecodeSpec::greedy()));
  CHECK(greedy_continue(p, ids, 10).size() == 4);
}

TEST_CASE("next-token loss gradient passes the finite-difference check") {
  for (auto mode : {UpdateMode::per_token_delta, UpdateMode::chunked}) {
    const auto cfg = small_config(mode);
    const auto p = init_params(cfg, 21).cast<double>();
    const auto ids = random_ids(8, cfg.vocab_size, 7);
    nx::ScalarFn<double> loss = [&](nx::Tape<double>&, nx::Var<double> flat) {
      auto vars = unflatten(flat, p);
      auto out = forward_tape<double>(cfg, vars, ids);
      const std::vector<int> targets(ids.begin() + 1, ids.end());
      auto lp = nx::log_softmax_rows(nx::slice_rows(out.logits, 0, ids.size() - 1));
      return nx::scale(nx::mean(nx::pick(lp, targets)), -1.0);
    };
    const auto r = nx::finite_diff_check_detailed(loss, p.flatten(), 1e-3);
    INFO("worst index " << r.worst_index << " analytic " << r.analytic_at_worst << " numeric " << r.numeric_at_worst);
    CHECK(r.max_rel_error < 1e-2);
  }
}
