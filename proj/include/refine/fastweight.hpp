#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "refine/numerics/ops.hpp"

namespace refine {

// Fast-weight memory of one layer: a d_fast x d_fast matrix W plus the number of
// tokens it has absorbed. W starts at zero for every sequence.
struct FastWeightState {
  nx::Array<float> w;
  std::size_t position = 0;

  static FastWeightState zero(std::size_t d_fast) {
    return FastWeightState{nx::Array<float>::zeros({d_fast, d_fast}), 0};
  }
  std::size_t dim() const { return w.shape()[0]; }
};

namespace kernels {

using Acc = double;

// W <- W - (eta / m) * sum_i (W k_i - v_i) k_i^T over the m rows of keys/values.
// All errors use the incoming W. With m == 1 this is the delta rule.
template <typename T>
void chunk_update(T* w, std::size_t n, const T* keys, const T* values, std::size_t m, double eta) {
  std::vector<Acc> err(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* k = keys + i * n;
    const T* v = values + i * n;
    for (std::size_t r = 0; r < n; ++r) {
      Acc s = 0;
      for (std::size_t c = 0; c < n; ++c) s += static_cast<Acc>(w[r * n + c]) * k[c];
      err[i * n + r] = s - v[r];
    }
  }
  const Acc f = eta / static_cast<Acc>(m);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      Acc s = 0;
      for (std::size_t i = 0; i < m; ++i) s += err[i * n + r] * static_cast<Acc>(keys[i * n + c]);
      w[r * n + c] = static_cast<T>(w[r * n + c] - f * s);
    }
  }
}

// y = W q
template <typename T>
void apply(const T* w, std::size_t n, const T* q, T* y) {
  for (std::size_t r = 0; r < n; ++r) {
    Acc s = 0;
    for (std::size_t c = 0; c < n; ++c) s += static_cast<Acc>(w[r * n + c]) * q[c];
    y[r] = static_cast<T>(s);
  }
}

}  // namespace kernels

// Closed-form delta rule for the squared-error inner loss: W' = W - eta (W k - v) k^T.
FastWeightState delta_rule_step(const FastWeightState& state, std::span<const float> key,
                                std::span<const float> value, float eta);

// One update from the mean inner-loss gradient over a chunk of (key, value) pairs.
FastWeightState chunked_update_step(const FastWeightState& state, const std::vector<std::vector<float>>& keys,
                                    const std::vector<std::vector<float>>& values, float eta);

// Read-out W q.
std::vector<float> apply(const FastWeightState& state, std::span<const float> query);

// Differentiable fast-weight mixer over a whole sequence. Rows of q, k, v are
// positions. Each position reads with the state from before its chunk, then the
// chunk is written (chunk == 1 gives per-token read-then-update). When
// `states_out` is set it receives the state at every chunk boundary, starting
// with the zero state.
template <typename T>
nx::Var<T> fast_weight_scan(nx::Var<T> q, nx::Var<T> k, nx::Var<T> v, double eta, std::size_t chunk,
                            std::vector<nx::Array<T>>* states_out = nullptr) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  if (qv.rank() != 2 || qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape()[1] == 0) {
    throw nx::ShapeError("fast_weight_scan: q " + nx::shape_str(qv.shape()) + ", k " + nx::shape_str(kv.shape()) +
                         ", v " + nx::shape_str(vv.shape()));
  }
  if (chunk == 0) throw std::invalid_argument("fast_weight_scan: chunk size must be positive");
  const std::size_t len = qv.shape()[0], n = qv.shape()[1];
  const std::size_t n_chunks = (len + chunk - 1) / chunk;

  std::vector<std::vector<T>> states(n_chunks + 1);
  std::vector<T> w(n * n, T{0});
  std::vector<T> out(len * n);
  for (std::size_t c = 0; c < n_chunks; ++c) {
    states[c] = w;
    const std::size_t s = c * chunk, e = std::min(len, s + chunk);
    for (std::size_t t = s; t < e; ++t) {
      kernels::apply(w.data(), n, qv.data().data() + t * n, out.data() + t * n);
    }
    kernels::chunk_update(w.data(), n, kv.data().data() + s * n, vv.data().data() + s * n, e - s, eta);
  }
  states[n_chunks] = w;
  if (states_out) {
    states_out->clear();
    for (const auto& st : states) states_out->push_back(nx::Array<T>::unchecked({n, n}, st));
  }

  return q.tape->record(
      nx::Array<T>::unchecked({len, n}, std::move(out)), {q, k, v},
      [q, k, v, eta, chunk, len, n, n_chunks, states = std::move(states)](nx::Tape<T>& tape,
                                                                          const nx::Array<T>& gy) {
        using Acc = kernels::Acc;
        const auto& qv2 = q.value();
        const auto& kv2 = k.value();
        const auto& vv2 = v.value();
        auto gq = tape.grad_buffer(q);
        auto gk = tape.grad_buffer(k);
        auto gv = tape.grad_buffer(v);
        // G holds dL/dW for the state after the chunk currently processed.
        std::vector<Acc> g(n * n, 0.0), gw(n * n);
        std::vector<Acc> e(n), gkv(n);
        for (std::size_t c = n_chunks; c-- > 0;) {
          const auto& w = states[c];
          const std::size_t s = c * chunk, end = std::min(len, s + chunk);
          const Acc f = eta / static_cast<Acc>(end - s);
          std::fill(gw.begin(), gw.end(), 0.0);
          // Write contribution: W' = W - f sum (W k - v) k^T
          for (std::size_t i = s; i < end; ++i) {
            const T* ki = kv2.data().data() + i * n;
            const T* vi = vv2.data().data() + i * n;
            for (std::size_t r = 0; r < n; ++r) {
              Acc acc = 0;
              for (std::size_t cc = 0; cc < n; ++cc) acc += static_cast<Acc>(w[r * n + cc]) * ki[cc];
              e[r] = acc - vi[r];
            }
            // G k, shared by dv and the W^T G k term
            for (std::size_t r = 0; r < n; ++r) {
              Acc acc = 0;
              for (std::size_t cc = 0; cc < n; ++cc) acc += g[r * n + cc] * ki[cc];
              gkv[r] = acc;
            }
            if (!gv.empty()) {
              for (std::size_t r = 0; r < n; ++r) gv[i * n + r] += static_cast<T>(f * gkv[r]);
            }
            if (!gk.empty()) {
              // dk = -f (G^T e + W^T G k)
              for (std::size_t cc = 0; cc < n; ++cc) {
                Acc acc = 0;
                for (std::size_t r = 0; r < n; ++r) acc += g[r * n + cc] * e[r] + static_cast<Acc>(w[r * n + cc]) * gkv[r];
                gk[i * n + cc] += static_cast<T>(-f * acc);
              }
            }
            // dL/dW via the write: -f (G k) k^T
            for (std::size_t r = 0; r < n; ++r)
              for (std::size_t cc = 0; cc < n; ++cc) gw[r * n + cc] -= f * gkv[r] * ki[cc];
          }
          for (std::size_t idx = 0; idx < n * n; ++idx) gw[idx] += g[idx];
          // Read contribution: y_t = W q_t
          for (std::size_t t = s; t < end; ++t) {
            const T* qt = qv2.data().data() + t * n;
            const T* gyt = gy.data().data() + t * n;
            if (!gq.empty()) {
              for (std::size_t cc = 0; cc < n; ++cc) {
                Acc acc = 0;
                for (std::size_t r = 0; r < n; ++r) acc += static_cast<Acc>(w[r * n + cc]) * gyt[r];
                gq[t * n + cc] += static_cast<T>(acc);
              }
            }
            for (std::size_t r = 0; r < n; ++r)
              for (std::size_t cc = 0; cc < n; ++cc) gw[r * n + cc] += static_cast<Acc>(gyt[r]) * qt[cc];
          }
          g.swap(gw);
        }
      });
}

}  // namespace refine
