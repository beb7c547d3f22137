#include <cmath>
#include <random>

#include "doctest.h"
#include "refine/fastweight.hpp"
#include "refine/numerics/gradcheck.hpp"

using refine::FastWeightState;
using refine::nx::Array;

namespace {

FastWeightState state_of(std::size_t n, std::vector<float> w) {
  return FastWeightState{Array<float>::matrix(n, n, std::move(w)), 0};
}

std::vector<float> random_vec(std::mt19937& gen, std::size_t n) {
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<float> v(n);
  for (auto& x : v) x = u(gen);
  return v;
}

double norm(const std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("delta rule examples") {
  auto w0 = FastWeightState::zero(2);
  auto w1 = refine::delta_rule_step(w0, std::vector<float>{1, 0}, std::vector<float>{0, 1}, 0.5f);
  CHECK(w1.w == Array<float>::matrix(2, 2, {0, 0, 0.5f, 0}));
  CHECK(w1.position == 1);
  CHECK(w0.w == Array<float>::zeros({2, 2}));  // input untouched

  auto w = state_of(2, {0.3f, -0.2f, 1.5f, 0.7f});
  CHECK(refine::delta_rule_step(w, std::vector<float>{0.6f, 0.8f}, std::vector<float>{1, 2}, 0.0f).w == w.w);
  CHECK(refine::delta_rule_step(w, std::vector<float>{0, 0}, std::vector<float>{5, -3}, 0.9f).w == w.w);
}

TEST_CASE("delta rule rejects bad input") {
  auto w = FastWeightState::zero(2);
  CHECK_THROWS(refine::delta_rule_step(w, std::vector<float>{NAN, 0}, std::vector<float>{0, 1}, 0.5f));
  CHECK_THROWS(refine::delta_rule_step(w, std::vector<float>{1, 0, 0}, std::vector<float>{0, 1}, 0.5f));
}

TEST_CASE("chunked update examples") {
  auto w = state_of(2, {0.1f, 0.2f, -0.3f, 0.4f});
  const std::vector<float> k{0.6f, 0.8f}, v{1.0f, -0.5f};
  auto one = refine::chunked_update_step(w, {k}, {v}, 0.7f);
  CHECK(one.w == refine::delta_rule_step(w, k, v, 0.7f).w);

  auto two = refine::chunked_update_step(w, {k, k}, {v, v}, 0.7f);
  auto single = refine::delta_rule_step(w, k, v, 0.7f);
  for (std::size_t i = 0; i < 4; ++i) CHECK(two.w[i] == doctest::Approx(single.w[i]).epsilon(1e-6));

  auto basis = refine::chunked_update_step(FastWeightState::zero(2), {{1, 0}, {0, 1}}, {{0, 1}, {1, 0}}, 1.0f);
  CHECK(basis.w == Array<float>::matrix(2, 2, {0, 0.5f, 0.5f, 0}));
  CHECK(basis.position == 2);

  CHECK_THROWS(refine::chunked_update_step(w, {}, {}, 1.0f));
  CHECK_THROWS(refine::chunked_update_step(w, {k}, {v, v}, 1.0f));
}

TEST_CASE("apply examples") {
  const std::vector<float> q{0.25f, -2.0f};
  CHECK(refine::apply(FastWeightState{Array<float>::identity(2), 0}, q) == q);
  CHECK(refine::apply(FastWeightState::zero(2), q) == std::vector<float>{0, 0});
  CHECK(refine::apply(state_of(2, {0, 0, 0.5f, 0}), std::vector<float>{1, 0}) == std::vector<float>{0, 0.5f});
  CHECK_THROWS(refine::apply(FastWeightState::zero(2), std::vector<float>{1, 0, 0}));
}

TEST_CASE("delta rule contracts toward the target mapping") {
  std::mt19937 gen(5);
  std::uniform_real_distribution<float> eta_dist(0.01f, 1.99f);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + trial % 6;
    auto w = FastWeightState{Array<float>::matrix(n, n, random_vec(gen, n * n)), 0};
    auto k = random_vec(gen, n);
    const double kn = norm(k);
    if (kn < 1e-3) continue;
    for (auto& x : k) x = static_cast<float>(x / kn);
    const auto v = random_vec(gen, n);
    const float eta = eta_dist(gen);
    auto residual = [&](const FastWeightState& s) {
      auto y = refine::apply(s, k);
      for (std::size_t i = 0; i < n; ++i) y[i] -= v[i];
      return norm(y);
    };
    CHECK(residual(refine::delta_rule_step(w, k, v, eta)) <= residual(w) + 1e-5);
  }
}

TEST_CASE("scan forward matches step-by-step updates") {
  using namespace refine::nx;
  std::mt19937 gen(9);
  const std::size_t len = 7, n = 3;
  auto q = random_vec(gen, len * n), k = random_vec(gen, len * n), v = random_vec(gen, len * n);
  for (std::size_t chunk : {std::size_t{1}, std::size_t{3}}) {
    Tape<float> tape;
    std::vector<Array<float>> states;
    auto y = refine::fast_weight_scan(tape.constant(Array<float>::matrix(len, n, q)),
                                      tape.constant(Array<float>::matrix(len, n, k)),
                                      tape.constant(Array<float>::matrix(len, n, v)), double{0.8f}, chunk, &states);
    auto s = FastWeightState::zero(n);
    for (std::size_t start = 0, c = 0; start < len; start += chunk, ++c) {
      CHECK(bitwise_equal(states[c], s.w));
      const std::size_t end = std::min(len, start + chunk);
      std::vector<std::vector<float>> ks, vs;
      for (std::size_t t = start; t < end; ++t) {
        auto yt = refine::apply(s, std::span<const float>(q.data() + t * n, n));
        for (std::size_t i = 0; i < n; ++i) CHECK(y.value()[t * n + i] == yt[i]);
        ks.emplace_back(k.begin() + static_cast<long>(t * n), k.begin() + static_cast<long>((t + 1) * n));
        vs.emplace_back(v.begin() + static_cast<long>(t * n), v.begin() + static_cast<long>((t + 1) * n));
      }
      s = refine::chunked_update_step(s, ks, vs, 0.8f);
    }
    CHECK(bitwise_equal(states.back(), s.w));
  }
}

TEST_CASE("scan gradient matches finite differences") {
  using namespace refine::nx;
  std::mt19937 gen(13);
  const std::size_t len = 6, n = 3;
  std::vector<double> flat;
  for (int i = 0; i < 3; ++i) {
    auto r = random_vec(gen, len * n);
    flat.insert(flat.end(), r.begin(), r.end());
  }
  for (std::size_t chunk : {std::size_t{1}, std::size_t{4}}) {
    ScalarFn<double> f = [&](Tape<double>& tape, Var<double> p) {
      auto q = view_slice(p, 0, {len, n});
      auto k = view_slice(p, len * n, {len, n});
      auto v = view_slice(p, 2 * len * n, {len, n});
      auto y = refine::fast_weight_scan(q, k, v, 0.9, chunk);
      std::vector<double> w(len * n);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + static_cast<double>(i));
      return sum(mul(y, tape.constant(Array<double>::matrix(len, n, w))));
    };
    CHECK(finite_diff_check(f, Array<double>::vector(flat), 1e-5) < 1e-5);
  }
}
