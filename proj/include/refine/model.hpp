#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "refine/fastweight.hpp"
#include "refine/numerics/ops.hpp"

namespace refine {

enum class UpdateMode { per_token_delta, chunked };

const char* to_string(UpdateMode mode);
UpdateMode update_mode_from_string(const std::string& s);

struct ModelConfig {
  int vocab_size = 258;
  int d_model = 32;
  int n_layers = 2;
  int d_fast = 16;
  double eta = 1.0;
  UpdateMode update_mode = UpdateMode::per_token_delta;
  int chunk_size = 16;
  int max_seq_len = 512;

  int d_ff() const { return 4 * d_model; }
  // Tokens absorbed per fast-weight write.
  std::size_t write_chunk() const {
    return update_mode == UpdateMode::chunked ? static_cast<std::size_t>(chunk_size) : 1;
  }
  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Slow parameters, stored as an ordered list of named tensors:
//   embed, layers.{l}.{norm1,wq,wk,wv,wo,norm2,w1,w2}, norm_f, head
template <typename T>
struct BasicParams {
  static constexpr std::size_t kPerLayer = 8;
  enum Slot : std::size_t { norm1 = 0, wq, wk, wv, wo, norm2, w1, w2 };

  ModelConfig config;
  std::vector<std::string> names;
  std::vector<nx::Array<T>> tensors;

  std::size_t embed_index() const { return 0; }
  std::size_t layer_index(std::size_t layer, Slot slot) const { return 1 + layer * kPerLayer + slot; }
  std::size_t norm_f_index() const { return 1 + static_cast<std::size_t>(config.n_layers) * kPerLayer; }
  std::size_t head_index() const { return norm_f_index() + 1; }
  const nx::Array<T>& layer(std::size_t l, Slot slot) const { return tensors[layer_index(l, slot)]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  template <typename U>
  BasicParams<U> cast() const {
    BasicParams<U> out;
    out.config = config;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  // Flattened copy of every tensor in order.
  nx::Array<T> flatten() const {
    std::vector<T> flat;
    flat.reserve(count());
    for (const auto& t : tensors) flat.insert(flat.end(), t.data().begin(), t.data().end());
    const std::size_t n = flat.size();
    return nx::Array<T>::unchecked({n}, std::move(flat));
  }
};

using ModelParams = BasicParams<float>;

bool bitwise_equal(const ModelParams& a, const ModelParams& b);

// Deterministic for a fixed seed. Matrices draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
// the embedding uses fan_in 1; norm gains start at 1.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Parameters bound to a tape, in BasicParams order.
template <typename T>
std::vector<nx::Var<T>> bind(nx::Tape<T>& tape, const BasicParams<T>& params, bool tracked) {
  std::vector<nx::Var<T>> vars;
  vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) vars.push_back(tracked ? tape.leaf(t) : tape.constant(t));
  return vars;
}

// Views a flat parameter vector as the individual tensors of `shape_of`.
template <typename T>
std::vector<nx::Var<T>> unflatten(nx::Var<T> flat, const BasicParams<T>& shape_of) {
  std::vector<nx::Var<T>> vars;
  std::size_t off = 0;
  for (const auto& t : shape_of.tensors) {
    vars.push_back(nx::view_slice(flat, off, t.shape()));
    off += t.size();
  }
  return vars;
}

template <typename T>
struct TapeForward {
  nx::Var<T> logits;  // T x vocab
  nx::Var<T> hidden;  // T x d_model, final normalized rows feeding the head
};

// Full-sequence forward on a tape. `layer_states`, when set, receives for each
// layer the fast-weight state at every write boundary (index 0 = zero state).
template <typename T>
TapeForward<T> forward_tape(const ModelConfig& cfg, std::span<const nx::Var<T>> p, std::span<const int> ids,
                            std::vector<std::vector<nx::Array<T>>>* layer_states = nullptr) {
  using P = BasicParams<T>;
  if (ids.empty()) throw std::invalid_argument("forward: empty sequence");
  if (ids.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  }
  const std::size_t per = P::kPerLayer;
  auto x = nx::embedding(p[0], ids);
  if (layer_states) layer_states->assign(static_cast<std::size_t>(cfg.n_layers), {});
  for (std::size_t l = 0; l < static_cast<std::size_t>(cfg.n_layers); ++l) {
    const std::size_t b = 1 + l * per;
    auto h = nx::rms_norm_rows(x, p[b + P::norm1]);
    auto q = nx::matmul(h, p[b + P::wq]);
    auto k = nx::l2_normalize_rows(nx::matmul(h, p[b + P::wk]));
    auto v = nx::matmul(h, p[b + P::wv]);
    auto y = fast_weight_scan(q, k, v, cfg.eta, cfg.write_chunk(), layer_states ? &(*layer_states)[l] : nullptr);
    x = nx::add(x, nx::matmul(y, p[b + P::wo]));
    auto h2 = nx::rms_norm_rows(x, p[b + P::norm2]);
    x = nx::add(x, nx::matmul(nx::silu(nx::matmul(h2, p[b + P::w1])), p[b + P::w2]));
  }
  const std::size_t nf = 1 + static_cast<std::size_t>(cfg.n_layers) * per;
  auto hidden = nx::rms_norm_rows(x, p[nf]);
  auto logits = nx::matmul(hidden, p[nf + 1]);
  return {logits, hidden};
}

struct ForwardOutput {
  nx::Array<float> logits;  // T x vocab
  nx::Array<float> hidden;  // T x d_model
  // states[layer][j]: state after j writes (per-token mode: after tokens 0..j-1).
  std::optional<std::vector<std::vector<FastWeightState>>> states;
  std::vector<float> next_token_logprobs;  // log p(x_{t+1} | x_{<=t}), length T-1

  std::size_t length() const { return logits.shape()[0]; }
};

// Inference forward; throws on ids outside the vocabulary.
ForwardOutput forward_sequence(const ModelParams& params, std::span<const int> ids, bool capture_states);

// Incremental decoder state for one layer: the state at the last write boundary
// plus keys/values of positions read since then.
struct LayerDecodeState {
  FastWeightState fast;
  std::vector<float> pending_keys;
  std::vector<float> pending_values;
};

struct DecodeState {
  std::vector<LayerDecodeState> layers;
  std::size_t position = 0;  // tokens consumed

  static DecodeState empty(const ModelConfig& cfg);
};

struct StepOutput {
  std::vector<float> hidden;
  std::vector<float> logits;
};

// Feeds one token; mirrors forward_sequence row for row.
StepOutput decode_step(const ModelParams& params, DecodeState& state, int token);

// State after consuming `ids` from scratch.
DecodeState consume(const ModelParams& params, std::span<const int> ids);

// Everything needed to continue a sequence after x_{<=t}: the decoder state
// over x_{<t} and the still-unread token x_t.
struct PrefixState {
  DecodeState state;
  int pending_token = 0;
  std::size_t position = 0;  // t
};

enum class DecodeKind { greedy, sample };

struct DecodeSpec {
  DecodeKind kind = DecodeKind::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static DecodeSpec greedy() { return {}; }
  static DecodeSpec sample(double temperature, std::uint64_t seed) { return {DecodeKind::sample, temperature, seed}; }
  // Temperature under which emitted-token log-probabilities are reported.
  double scoring_temperature() const { return kind == DecodeKind::sample && temperature > 0 ? temperature : 1.0; }
};

struct Generation {
  std::vector<int> tokens;
  nx::Array<float> hidden;        // steps x d_model, rows for the generated positions
  std::vector<float> logprobs;    // log pi(token_j | context) at scoring temperature
};

// Autoregressive continuation of `steps` tokens after the prefix.
Generation generate(const ModelParams& params, const PrefixState& prefix, int steps, const DecodeSpec& decode);

// Plain greedy continuation of a full prompt (used by evaluation and TTT).
std::vector<int> greedy_continue(const ModelParams& params, std::span<const int> prompt, int steps);

}  // namespace refine
