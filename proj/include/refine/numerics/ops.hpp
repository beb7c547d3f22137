#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "refine/numerics/tape.hpp"

// Differentiable primitives. Reductions, matmuls and softmax accumulate in
// double regardless of storage type. Shapes must match exactly; the only
// broadcast is add_row (row-wise bias).
namespace refine::nx {

namespace detail {

using Acc = double;

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}
[[noreturn]] inline void shape_fail(const char* op, const Shape& a) {
  throw ShapeError(std::string(op) + ": unsupported shape " + shape_str(a));
}

template <typename T>
void require_same_tape(const char* op, Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

// C[m,n] = A[m,k] B[k,n]
template <typename T>
void matmul_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<Acc> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), Acc{0});
    const T* ar = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Acc av = ar[p];
      const T* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<Acc>(br[j]);
    }
    T* cr = c + i * n;
    for (std::size_t j = 0; j < n; ++j) cr[j] = static_cast<T>(acc[j]);
  }
}

// C[m,k] += G[m,n] B[k,n]^T
template <typename T>
void matmul_nt_acc(const T* g, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* gr = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* br = b + p * n;
      Acc s = 0;
      for (std::size_t j = 0; j < n; ++j) s += static_cast<Acc>(gr[j]) * static_cast<Acc>(br[j]);
      c[i * k + p] += static_cast<T>(s);
    }
  }
}

// C[k,n] += A[m,k]^T G[m,n]
template <typename T>
void matmul_tn_acc(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<Acc> acc(k * n, Acc{0});
  for (std::size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    const T* gr = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Acc av = ar[p];
      if (av == 0) continue;
      Acc* dst = acc.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += av * static_cast<Acc>(gr[j]);
    }
  }
  for (std::size_t i = 0; i < k * n; ++i) c[i] += static_cast<T>(acc[i]);
}

template <typename T>
void softmax_row(const T* x, T* y, std::size_t n) {
  Acc mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max<Acc>(mx, x[j]);
  Acc z = 0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(static_cast<Acc>(x[j]) - mx);
  for (std::size_t j = 0; j < n; ++j) y[j] = static_cast<T>(std::exp(static_cast<Acc>(x[j]) - mx) / z);
}

template <typename T>
void log_softmax_row(const T* x, T* y, std::size_t n) {
  Acc mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max<Acc>(mx, x[j]);
  Acc z = 0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(static_cast<Acc>(x[j]) - mx);
  const Acc lse = mx + std::log(z);
  for (std::size_t j = 0; j < n; ++j) y[j] = static_cast<T>(static_cast<Acc>(x[j]) - lse);
}

template <typename T>
std::size_t row_count(const Array<T>& a) {
  return a.rank() == 2 ? a.shape()[0] : 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape("matmul", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
    detail::shape_fail("matmul", av.shape(), bv.shape());
  }
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  std::vector<T> out(m * n);
  detail::matmul_nn(av.data().data(), bv.data().data(), out.data(), m, k, n);
  return a.tape->record(Array<T>::unchecked({m, n}, std::move(out)), {a, b},
                        [a, b, m, k, n](Tape<T>& tape, const Array<T>& g) {
                          if (a.tracked()) {
                            auto ga = tape.grad_buffer(a);
                            detail::matmul_nt_acc(g.data().data(), b.value().data().data(), ga.data(), m, n, k);
                          }
                          if (b.tracked()) {
                            auto gb = tape.grad_buffer(b);
                            detail::matmul_tn_acc(a.value().data().data(), g.data().data(), gb.data(), m, k, n);
                          }
                        });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape("add", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) detail::shape_fail("add", av.shape(), bv.shape());
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape->record(Array<T>::unchecked(av.shape(), std::move(out)), {a, b},
                        [a, b](Tape<T>& tape, const Array<T>& g) {
                          tape.accumulate(a, g);
                          tape.accumulate(b, g);
                        });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_tape("sub", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) detail::shape_fail("sub", av.shape(), bv.shape());
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape->record(Array<T>::unchecked(av.shape(), std::move(out)), {a, b},
                        [a, b](Tape<T>& tape, const Array<T>& g) {
                          tape.accumulate(a, g);
                          if (b.tracked()) {
                            auto gb = tape.grad_buffer(b);
                            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
                          }
                        });
}

// a[m,n] + bias[n] on every row.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> bias) {
  detail::require_same_tape("add_row", a, bias);
  const auto& av = a.value();
  const auto& bv = bias.value();
  if (av.rank() != 2 || bv.rank() != 1 || bv.size() != av.shape()[1]) {
    detail::shape_fail("add_row", av.shape(), bv.shape());
  }
  const std::size_t m = av.shape()[0], n = av.shape()[1];
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[j];
  return a.tape->record(Array<T>::unchecked(av.shape(), std::move(out)), {a, bias},
                        [a, bias, m, n](Tape<T>& tape, const Array<T>& g) {
                          tape.accumulate(a, g);
                          if (bias.tracked()) {
                            auto gb = tape.grad_buffer(bias);
                            for (std::size_t j = 0; j < n; ++j) {
                              detail::Acc s = 0;
                              for (std::size_t i = 0; i < m; ++i) s += g[i * n + j];
                              gb[j] += static_cast<T>(s);
                            }
                          }
                        });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape("mul", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) detail::shape_fail("mul", av.shape(), bv.shape());
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(Array<T>::unchecked(av.shape(), std::move(out)), {a, b},
                        [a, b](Tape<T>& tape, const Array<T>& g) {
                          if (a.tracked()) {
                            auto ga = tape.grad_buffer(a);
                            const auto& bv2 = b.value();
                            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv2[i];
                          }
                          if (b.tracked()) {
                            auto gb = tape.grad_buffer(b);
                            const auto& av2 = a.value();
                            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av2[i];
                          }
                        });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  const auto& av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return a.tape->record(Array<T>::unchecked(av.shape(), std::move(out)), {a},
                        [a, s](Tape<T>& tape, const Array<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
                        });
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <typename T>
Var<T> silu(Var<T> a) {
  const auto& av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const detail::Acc x = av[i];
    out[i] = static_cast<T>(x / (1.0 + std::exp(-x)));
  }
  return a.tape->record(Array<T>::unchecked(av.shape(), std::move(out)), {a},
                        [a](Tape<T>& tape, const Array<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          const auto& av2 = a.value();
                          for (std::size_t i = 0; i < ga.size(); ++i) {
                            const detail::Acc x = av2[i];
                            const detail::Acc sg = 1.0 / (1.0 + std::exp(-x));
                            ga[i] += static_cast<T>(g[i] * sg * (1.0 + x * (1.0 - sg)));
                          }
                        });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  const auto& av = a.value();
  if (av.rank() == 0 || av.rank() > 2) detail::shape_fail("softmax_rows", av.shape());
  const std::size_t m = detail::row_count(av), n = av.cols();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < m; ++i) detail::softmax_row(av.data().data() + i * n, out.data() + i * n, n);
  return a.tape->record(Array<T>::unchecked(av.shape(), out), {a},
                        [a, m, n, y = out](Tape<T>& tape, const Array<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          for (std::size_t i = 0; i < m; ++i) {
                            detail::Acc gy = 0;
                            for (std::size_t j = 0; j < n; ++j) gy += static_cast<detail::Acc>(g[i * n + j]) * y[i * n + j];
                            for (std::size_t j = 0; j < n; ++j) {
                              ga[i * n + j] += static_cast<T>(y[i * n + j] * (g[i * n + j] - gy));
                            }
                          }
                        });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> a) {
  const auto& av = a.value();
  if (av.rank() == 0 || av.rank() > 2) detail::shape_fail("log_softmax_rows", av.shape());
  const std::size_t m = detail::row_count(av), n = av.cols();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < m; ++i) detail::log_softmax_row(av.data().data() + i * n, out.data() + i * n, n);
  return a.tape->record(Array<T>::unchecked(av.shape(), out), {a},
                        [a, m, n, y = out](Tape<T>& tape, const Array<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          for (std::size_t i = 0; i < m; ++i) {
                            detail::Acc gs = 0;
                            for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
                            for (std::size_t j = 0; j < n; ++j) {
                              ga[i * n + j] += static_cast<T>(g[i * n + j] - std::exp(static_cast<detail::Acc>(y[i * n + j])) * gs);
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  detail::Acc s = 0;
  for (T v : av.data()) s += v;
  return a.tape->record(Array<T>::scalar(static_cast<T>(s)), {a},
                        [a](Tape<T>& tape, const Array<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          const T gv = g[0];
                          for (auto& x : ga) x += gv;
                        });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const auto& av = a.value();
  detail::Acc s = 0;
  for (T v : av.data()) s += v;
  const auto n = static_cast<detail::Acc>(av.size());
  return a.tape->record(Array<T>::scalar(static_cast<T>(s / n)), {a},
                        [a, n](Tape<T>& tape, const Array<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          const T gv = static_cast<T>(g[0] / n);
                          for (auto& x : ga) x += gv;
                        });
}

// Euclidean norm of all entries.
template <typename T>
Var<T> l2_norm(Var<T> a) {
  const auto& av = a.value();
  detail::Acc s = 0;
  for (T v : av.data()) s += static_cast<detail::Acc>(v) * v;
  const detail::Acc nrm = std::sqrt(s);
  return a.tape->record(Array<T>::scalar(static_cast<T>(nrm)), {a},
                        [a, nrm](Tape<T>& tape, const Array<T>& g) {
                          if (nrm == 0) return;
                          auto ga = tape.grad_buffer(a);
                          const auto& av2 = a.value();
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += static_cast<T>(g[0] * av2[i] / nrm);
                        });
}

// ---------------------------------------------------------------------------
// Normalization

// Each row divided by sqrt(|row|^2 + eps).
template <typename T>
Var<T> l2_normalize_rows(Var<T> a, double eps = 1e-12) {
  const auto& av = a.value();
  if (av.rank() == 0 || av.rank() > 2) detail::shape_fail("l2_normalize_rows", av.shape());
  const std::size_t m = detail::row_count(av), n = av.cols();
  std::vector<T> out(av.size());
  std::vector<detail::Acc> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    detail::Acc s = 0;
    for (std::size_t j = 0; j < n; ++j) s += static_cast<detail::Acc>(av[i * n + j]) * av[i * n + j];
    norms[i] = std::sqrt(s + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<T>(av[i * n + j] / norms[i]);
  }
  return a.tape->record(Array<T>::unchecked(av.shape(), std::move(out)), {a},
                        [a, m, n, norms = std::move(norms)](Tape<T>& tape, const Array<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          const auto& x = a.value();
                          for (std::size_t i = 0; i < m; ++i) {
                            detail::Acc xg = 0;
                            for (std::size_t j = 0; j < n; ++j) xg += static_cast<detail::Acc>(x[i * n + j]) * g[i * n + j];
                            const detail::Acc nr = norms[i];
                            const detail::Acc n3 = nr * nr * nr;
                            for (std::size_t j = 0; j < n; ++j) {
                              ga[i * n + j] += static_cast<T>(g[i * n + j] / nr - x[i * n + j] * xg / n3);
                            }
                          }
                        });
}

// RMS normalization of each row followed by an elementwise gain.
template <typename T>
Var<T> rms_norm_rows(Var<T> a, Var<T> gain, double eps = 1e-6) {
  detail::require_same_tape("rms_norm_rows", a, gain);
  const auto& av = a.value();
  const auto& gv = gain.value();
  if (av.rank() != 2 || gv.rank() != 1 || gv.size() != av.shape()[1]) {
    detail::shape_fail("rms_norm_rows", av.shape(), gv.shape());
  }
  const std::size_t m = av.shape()[0], n = av.shape()[1];
  std::vector<T> out(av.size());
  std::vector<detail::Acc> inv(m);
  for (std::size_t i = 0; i < m; ++i) {
    detail::Acc s = 0;
    for (std::size_t j = 0; j < n; ++j) s += static_cast<detail::Acc>(av[i * n + j]) * av[i * n + j];
    inv[i] = 1.0 / std::sqrt(s / static_cast<detail::Acc>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<T>(av[i * n + j] * inv[i] * gv[j]);
  }
  return a.tape->record(
      Array<T>::unchecked(av.shape(), std::move(out)), {a, gain},
      [a, gain, m, n, inv = std::move(inv)](Tape<T>& tape, const Array<T>& g) {
        const auto& x = a.value();
        const auto& gw = gain.value();
        if (gain.tracked()) {
          auto gg = tape.grad_buffer(gain);
          for (std::size_t j = 0; j < n; ++j) {
            detail::Acc s = 0;
            for (std::size_t i = 0; i < m; ++i) s += static_cast<detail::Acc>(g[i * n + j]) * x[i * n + j] * inv[i];
            gg[j] += static_cast<T>(s);
          }
        }
        if (a.tracked()) {
          auto ga = tape.grad_buffer(a);
          for (std::size_t i = 0; i < m; ++i) {
            detail::Acc dot = 0;
            for (std::size_t j = 0; j < n; ++j) {
              dot += static_cast<detail::Acc>(g[i * n + j]) * gw[j] * x[i * n + j] * inv[i];
            }
            dot /= static_cast<detail::Acc>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const detail::Acc xh = x[i * n + j] * inv[i];
              ga[i * n + j] += static_cast<T>((static_cast<detail::Acc>(g[i * n + j]) * gw[j] - xh * dot) * inv[i]);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing along the sequence axis

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  if (av.rank() != 2 || begin >= end || end > av.shape()[0]) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for shape " + shape_str(av.shape()));
  }
  const std::size_t n = av.shape()[1];
  std::vector<T> out(av.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                     av.data().begin() + static_cast<std::ptrdiff_t>(end * n));
  return a.tape->record(Array<T>::unchecked({end - begin, n}, std::move(out)), {a},
                        [a, begin, n](Tape<T>& tape, const Array<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[begin * n + i] += g[i];
                        });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].value().cols();
  std::size_t rows = 0;
  for (auto p : parts) {
    const auto& pv = p.value();
    if (pv.rank() != 2 || pv.shape()[1] != n) detail::shape_fail("concat_rows", parts[0].shape(), pv.shape());
    if (p.tape != parts[0].tape) throw std::invalid_argument("concat_rows: operands on different tapes");
    rows += pv.shape()[0];
  }
  std::vector<T> out;
  out.reserve(rows * n);
  for (auto p : parts) out.insert(out.end(), p.value().data().begin(), p.value().data().end());
  return parts[0].tape->record(Array<T>::unchecked({rows, n}, std::move(out)), parts,
                               [parts](Tape<T>& tape, const Array<T>& g) {
                                 std::size_t off = 0;
                                 for (auto p : parts) {
                                   const std::size_t len = p.value().size();
                                   tape.accumulate(p, g.data().subspan(off, len));
                                   off += len;
                                 }
                               });
}

// Rows of `table` selected by `ids`.
template <typename T>
Var<T> embedding(Var<T> table, std::span<const int> ids) {
  const auto& tv = table.value();
  if (tv.rank() != 2 || ids.empty()) detail::shape_fail("embedding", tv.shape());
  const std::size_t vocab = tv.shape()[0], d = tv.shape()[1];
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape->record(Array<T>::unchecked({ids.size(), d}, std::move(out)), {table},
                            [table, d, idv = std::move(idv)](Tape<T>& tape, const Array<T>& g) {
                              auto gt = tape.grad_buffer(table);
                              for (std::size_t i = 0; i < idv.size(); ++i) {
                                T* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                                for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                              }
                            });
}

// out[i] = a[i, idx[i]]
template <typename T>
Var<T> pick(Var<T> a, std::span<const int> idx) {
  const auto& av = a.value();
  if (av.rank() != 2 || av.shape()[0] != idx.size()) {
    throw ShapeError("pick: shape " + shape_str(av.shape()) + " incompatible with " +
                     std::to_string(idx.size()) + " indices");
  }
  const std::size_t n = av.shape()[1];
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
      throw std::out_of_range("pick: index " + std::to_string(idx[i]) + " outside " + std::to_string(n) + " columns");
    }
    out[i] = av[i * n + static_cast<std::size_t>(idx[i])];
  }
  std::vector<int> iv(idx.begin(), idx.end());
  return a.tape->record(Array<T>::unchecked({idx.size()}, std::move(out)), {a},
                        [a, n, iv = std::move(iv)](Tape<T>& tape, const Array<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          for (std::size_t i = 0; i < iv.size(); ++i) ga[i * n + static_cast<std::size_t>(iv[i])] += g[i];
                        });
}

// A contiguous window of a flat array viewed with a new shape.
template <typename T>
Var<T> view_slice(Var<T> flat, std::size_t offset, Shape shape) {
  const auto& fv = flat.value();
  const std::size_t len = shape_size(shape);
  if (offset + len > fv.size()) {
    throw ShapeError("view_slice: window [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                     ") exceeds size " + std::to_string(fv.size()));
  }
  std::vector<T> out(fv.data().begin() + static_cast<std::ptrdiff_t>(offset),
                     fv.data().begin() + static_cast<std::ptrdiff_t>(offset + len));
  return flat.tape->record(Array<T>::unchecked(std::move(shape), std::move(out)), {flat},
                           [flat, offset](Tape<T>& tape, const Array<T>& g) {
                             auto gf = tape.grad_buffer(flat);
                             for (std::size_t i = 0; i < g.size(); ++i) gf[offset + i] += g[i];
                           });
}

// ---------------------------------------------------------------------------
// Policy-gradient surrogate

// Per-token clipped surrogate min(r*A, clip(r, 1-eps, 1+eps)*A), r = exp(logp - old).
// `old_logp` and `adv` are constants.
template <typename T>
Var<T> clipped_surrogate(Var<T> logp, std::span<const T> old_logp, std::span<const T> adv, double eps) {
  const auto& lv = logp.value();
  if (lv.rank() != 1 || lv.size() != old_logp.size() || lv.size() != adv.size()) {
    throw ShapeError("clipped_surrogate: logp shape " + shape_str(lv.shape()) + " vs " +
                     std::to_string(old_logp.size()) + " old logprobs and " + std::to_string(adv.size()) +
                     " advantages");
  }
  const std::size_t m = lv.size();
  std::vector<T> out(m);
  std::vector<T> dobj(m);  // d objective / d logp
  for (std::size_t i = 0; i < m; ++i) {
    const detail::Acc r = std::exp(static_cast<detail::Acc>(lv[i]) - old_logp[i]);
    const detail::Acc a = adv[i];
    const detail::Acc rc = std::clamp(r, 1.0 - eps, 1.0 + eps);
    const detail::Acc un = r * a, cl = rc * a;
    if (un <= cl) {
      out[i] = static_cast<T>(un);
      dobj[i] = static_cast<T>(un);
    } else {
      out[i] = static_cast<T>(cl);
      dobj[i] = T{0};
    }
  }
  return logp.tape->record(Array<T>::unchecked({m}, std::move(out)), {logp},
                           [logp, dobj = std::move(dobj)](Tape<T>& tape, const Array<T>& g) {
                             auto gl = tape.grad_buffer(logp);
                             for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g[i] * dobj[i];
                           });
}

}  // namespace refine::nx
