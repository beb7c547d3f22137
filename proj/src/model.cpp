#include "refine/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "refine/rng.hpp"

namespace refine {

const char* to_string(UpdateMode mode) {
  return mode == UpdateMode::chunked ? "chunked" : "per_token_delta";
}

UpdateMode update_mode_from_string(const std::string& s) {
  if (s == "per_token_delta" || s == "per_token") return UpdateMode::per_token_delta;
  if (s == "chunked") return UpdateMode::chunked;
  throw std::invalid_argument("update_mode: expected per_token_delta or chunked, got '" + s + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (vocab_size < 1) fail("vocab_size must satisfy vocab_size ≥ 1");
  if (d_model < 1) fail("d_model must satisfy d_model ≥ 1");
  if (n_layers < 1) fail("n_layers must satisfy n_layers ≥ 1");
  if (d_fast < 1 || d_fast > d_model) fail("d_fast must satisfy 1 ≤ d_fast ≤ d_model");
  if (!(eta > 0) || !std::isfinite(eta)) fail("eta must satisfy eta > 0");
  if (max_seq_len < 1) fail("max_seq_len must satisfy max_seq_len ≥ 1");
  if (chunk_size < 1 || chunk_size > max_seq_len) fail("chunk_size must satisfy 1 ≤ chunk_size ≤ max_seq_len");
}

bool bitwise_equal(const ModelParams& a, const ModelParams& b) {
  if (!(a.config == b.config) || a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (!nx::bitwise_equal(a.tensors[i], b.tensors[i])) return false;
  }
  return true;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  Rng rng(seed);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.d_fast);
  const auto ff = static_cast<std::size_t>(config.d_ff());

  auto uniform = [&](std::size_t rows, std::size_t cols, double fan_in) {
    const double s = 1.0 / std::sqrt(fan_in);
    std::vector<float> data(rows * cols);
    for (auto& x : data) x = static_cast<float>(rng.uniform(-s, s));
    return nx::Array<float>({rows, cols}, std::move(data));
  };
  auto add = [&](std::string name, nx::Array<float> t) {
    p.names.push_back(std::move(name));
    p.tensors.push_back(std::move(t));
  };

  add("embed", uniform(v, d, 1.0));
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    add(pre + "norm1", nx::Array<float>::ones({d}));
    add(pre + "wq", uniform(d, f, static_cast<double>(d)));
    add(pre + "wk", uniform(d, f, static_cast<double>(d)));
    add(pre + "wv", uniform(d, f, static_cast<double>(d)));
    add(pre + "wo", uniform(f, d, static_cast<double>(f)));
    add(pre + "norm2", nx::Array<float>::ones({d}));
    add(pre + "w1", uniform(d, ff, static_cast<double>(d)));
    add(pre + "w2", uniform(ff, d, static_cast<double>(ff)));
  }
  add("norm_f", nx::Array<float>::ones({d}));
  add("head", uniform(d, v, static_cast<double>(d)));
  return p;
}

ForwardOutput forward_sequence(const ModelParams& params, std::span<const int> ids, bool capture_states) {
  nx::Tape<float> tape;
  auto vars = bind(tape, params, false);
  std::vector<std::vector<nx::Array<float>>> raw_states;
  auto fw = forward_tape<float>(params.config, vars, ids, capture_states ? &raw_states : nullptr);

  ForwardOutput out;
  out.logits = fw.logits.value();
  out.hidden = fw.hidden.value();
  const std::size_t len = ids.size();
  const std::size_t vocab = out.logits.shape()[1];
  out.next_token_logprobs.resize(len > 0 ? len - 1 : 0);
  std::vector<float> row(vocab);
  for (std::size_t t = 0; t + 1 < len; ++t) {
    nx::detail::log_softmax_row(out.logits.data().data() + t * vocab, row.data(), vocab);
    out.next_token_logprobs[t] = row[static_cast<std::size_t>(ids[t + 1])];
  }
  if (capture_states) {
    const std::size_t chunk = params.config.write_chunk();
    std::vector<std::vector<FastWeightState>> states(raw_states.size());
    for (std::size_t l = 0; l < raw_states.size(); ++l) {
      for (std::size_t j = 0; j < raw_states[l].size(); ++j) {
        states[l].push_back(FastWeightState{std::move(raw_states[l][j]), std::min(len, j * chunk)});
      }
    }
    out.states = std::move(states);
  }
  return out;
}

DecodeState DecodeState::empty(const ModelConfig& cfg) {
  DecodeState st;
  st.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& l : st.layers) l.fast = FastWeightState::zero(static_cast<std::size_t>(cfg.d_fast));
  return st;
}

namespace {

// Row versions of the tape primitives, evaluated with identical expressions so
// incremental decoding reproduces forward_sequence bit for bit.
std::vector<float> rms_norm(std::span<const float> x, const nx::Array<float>& gain) {
  const std::size_t n = x.size();
  double s = 0;
  for (float v : x) s += static_cast<double>(v) * v;
  const double inv = 1.0 / std::sqrt(s / static_cast<double>(n) + 1e-6);
  std::vector<float> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<float>(x[j] * inv * gain[j]);
  return out;
}

std::vector<float> l2_normalize(std::span<const float> x) {
  double s = 0;
  for (float v : x) s += static_cast<double>(v) * v;
  const double nrm = std::sqrt(s + 1e-12);
  std::vector<float> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = static_cast<float>(x[j] / nrm);
  return out;
}

std::vector<float> matvec(std::span<const float> x, const nx::Array<float>& w) {
  const std::size_t k = w.shape()[0], n = w.shape()[1];
  std::vector<float> out(n);
  nx::detail::matmul_nn(x.data(), w.data().data(), out.data(), 1, k, n);
  return out;
}

}  // namespace

StepOutput decode_step(const ModelParams& params, DecodeState& state, int token) {
  const auto& cfg = params.config;
  if (token < 0 || token >= cfg.vocab_size) {
    throw std::out_of_range("decode_step: token id " + std::to_string(token) + " outside vocabulary of " +
                            std::to_string(cfg.vocab_size));
  }
  if (state.position >= static_cast<std::size_t>(cfg.max_seq_len)) {
    throw std::invalid_argument("decode_step: sequence would exceed max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto n = static_cast<std::size_t>(cfg.d_fast);
  const std::size_t chunk = cfg.write_chunk();
  const auto& embed = params.tensors[params.embed_index()];
  std::vector<float> x(embed.row(static_cast<std::size_t>(token)).begin(),
                       embed.row(static_cast<std::size_t>(token)).end());

  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    auto& ls = state.layers[l];
    auto h = rms_norm(x, params.layer(l, ModelParams::norm1));
    auto q = matvec(h, params.layer(l, ModelParams::wq));
    auto k = l2_normalize(matvec(h, params.layer(l, ModelParams::wk)));
    auto v = matvec(h, params.layer(l, ModelParams::wv));
    std::vector<float> y(n);
    kernels::apply(ls.fast.w.data().data(), n, q.data(), y.data());
    ls.pending_keys.insert(ls.pending_keys.end(), k.begin(), k.end());
    ls.pending_values.insert(ls.pending_values.end(), v.begin(), v.end());
    const std::size_t pending = ls.pending_keys.size() / n;
    if (pending == chunk) {
      std::vector<float> w(ls.fast.w.data().begin(), ls.fast.w.data().end());
      kernels::chunk_update(w.data(), n, ls.pending_keys.data(), ls.pending_values.data(), pending, cfg.eta);
      ls.fast = FastWeightState{nx::Array<float>::unchecked({n, n}, std::move(w)), ls.fast.position + pending};
      ls.pending_keys.clear();
      ls.pending_values.clear();
    }
    auto mixed = matvec(y, params.layer(l, ModelParams::wo));
    for (std::size_t j = 0; j < d; ++j) x[j] = x[j] + mixed[j];
    auto h2 = rms_norm(x, params.layer(l, ModelParams::norm2));
    auto a = matvec(h2, params.layer(l, ModelParams::w1));
    for (auto& z : a) {
      const double zz = z;
      z = static_cast<float>(zz / (1.0 + std::exp(-zz)));
    }
    auto ff = matvec(a, params.layer(l, ModelParams::w2));
    for (std::size_t j = 0; j < d; ++j) x[j] = x[j] + ff[j];
  }
  StepOutput out;
  out.hidden = rms_norm(x, params.tensors[params.norm_f_index()]);
  out.logits = matvec(out.hidden, params.tensors[params.head_index()]);
  ++state.position;
  return out;
}

DecodeState consume(const ModelParams& params, std::span<const int> ids) {
  auto st = DecodeState::empty(params.config);
  for (int id : ids) decode_step(params, st, id);
  return st;
}

namespace {

int argmax(std::span<const float> xs) {
  return static_cast<int>(std::max_element(xs.begin(), xs.end()) - xs.begin());
}

std::vector<float> scaled(std::span<const float> logits, double temperature) {
  std::vector<float> out(logits.begin(), logits.end());
  if (temperature != 1.0) {
    const auto s = static_cast<float>(1.0 / temperature);
    for (auto& x : out) x = x * s;
  }
  return out;
}

int sample_index(std::span<const float> logprobs, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0;
  for (std::size_t i = 0; i < logprobs.size(); ++i) {
    cum += std::exp(static_cast<double>(logprobs[i]));
    if (u < cum) return static_cast<int>(i);
  }
  // Rounding left u above the total mass: take the last index with mass.
  for (std::size_t i = logprobs.size(); i-- > 0;) {
    if (std::exp(static_cast<double>(logprobs[i])) > 0) return static_cast<int>(i);
  }
  return static_cast<int>(logprobs.size() - 1);
}

}  // namespace

Generation generate(const ModelParams& params, const PrefixState& prefix, int steps, const DecodeSpec& decode) {
  if (steps < 1) throw std::invalid_argument("generate: steps must be ≥ 1");
  const auto& cfg = params.config;
  if (prefix.state.position + 1 + static_cast<std::size_t>(steps) > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw std::invalid_argument("generate: " + std::to_string(steps) + " steps after position " +
                                std::to_string(prefix.position) + " exceed max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  }
  if (prefix.state.layers.size() != static_cast<std::size_t>(cfg.n_layers)) {
    throw std::invalid_argument("generate: prefix state does not match model layers");
  }
  Rng rng(decode.seed);
  const double score_t = decode.scoring_temperature();
  const auto d = static_cast<std::size_t>(cfg.d_model);

  DecodeState st = prefix.state;
  auto step = decode_step(params, st, prefix.pending_token);
  Generation gen;
  std::vector<float> hidden;
  hidden.reserve(static_cast<std::size_t>(steps) * d);
  std::vector<float> lp(step.logits.size());
  for (int j = 0; j < steps; ++j) {
    auto z = scaled(step.logits, score_t);
    nx::detail::log_softmax_row(z.data(), lp.data(), z.size());
    int tok;
    if (decode.kind == DecodeKind::greedy || decode.temperature <= 0) {
      tok = argmax(step.logits);
    } else {
      tok = sample_index(lp, rng);
    }
    gen.tokens.push_back(tok);
    gen.logprobs.push_back(lp[static_cast<std::size_t>(tok)]);
    step = decode_step(params, st, tok);
    hidden.insert(hidden.end(), step.hidden.begin(), step.hidden.end());
  }
  gen.hidden = nx::Array<float>::unchecked({static_cast<std::size_t>(steps), d}, std::move(hidden));
  return gen;
}

std::vector<int> greedy_continue(const ModelParams& params, std::span<const int> prompt, int steps) {
  if (prompt.empty()) throw std::invalid_argument("greedy_continue: empty prompt");
  const std::size_t room = static_cast<std::size_t>(params.config.max_seq_len);
  if (prompt.size() >= room) return {};
  const int budget = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(steps), room - prompt.size()));
  if (budget < 1) return {};
  PrefixState prefix{consume(params, prompt.first(prompt.size() - 1)), prompt.back(), prompt.size() - 1};
  return generate(params, prefix, budget, DecodeSpec::greedy()).tokens;
}

}  // namespace refine
