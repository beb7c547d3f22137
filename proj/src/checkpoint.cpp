#include "refine/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace refine {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void bytes(const std::string& s) { raw(s.data(), s.size()); }
  void floats(std::span<const float> xs) { raw(xs.data(), xs.size() * sizeof(float)); }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  float f32() {
    float v;
    raw(&v, sizeof v);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<float> floats(std::size_t n) {
    if (n > (buf_.size() - pos_) / sizeof(float)) fail(n * sizeof(float));
    std::vector<float> out(n);
    raw(out.data(), n * sizeof(float));
    return out;
  }
  bool done() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) {
    if (n > buf_.size() - pos_) fail(n);
  }
  [[noreturn]] void fail(std::size_t n) const {
    throw CheckpointError("checkpoint truncated: need " + std::to_string(n) + " bytes at offset " +
                          std::to_string(pos_) + ", file has " + std::to_string(buf_.size()));
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }

  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize(const ModelParams& params) {
  Writer w;
  w.bytes("RFNW");
  w.u32(kCheckpointVersion);
  const auto& c = params.config;
  w.u32(static_cast<std::uint32_t>(c.vocab_size));
  w.u32(static_cast<std::uint32_t>(c.d_model));
  w.u32(static_cast<std::uint32_t>(c.n_layers));
  w.u32(static_cast<std::uint32_t>(c.d_fast));
  w.f32(static_cast<float>(c.eta));
  w.u32(c.update_mode == UpdateMode::chunked ? 1U : 0U);
  w.u32(static_cast<std::uint32_t>(c.chunk_size));
  w.u32(static_cast<std::uint32_t>(c.max_seq_len));
  w.u32(static_cast<std::uint32_t>(params.tensors.size()));
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    w.u32(static_cast<std::uint32_t>(params.names[i].size()));
    w.bytes(params.names[i]);
    const auto& t = params.tensors[i];
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.floats(t.data());
  }
  return w.take();
}

ModelParams deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.bytes(4) != "RFNW") throw CheckpointError("checkpoint: bad magic, expected RFNW");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
  }
  ModelConfig c;
  c.vocab_size = static_cast<int>(r.u32());
  c.d_model = static_cast<int>(r.u32());
  c.n_layers = static_cast<int>(r.u32());
  c.d_fast = static_cast<int>(r.u32());
  c.eta = r.f32();
  const auto mode = r.u32();
  if (mode > 1) throw CheckpointError("checkpoint: unknown update mode " + std::to_string(mode));
  c.update_mode = mode == 1 ? UpdateMode::chunked : UpdateMode::per_token_delta;
  c.chunk_size = static_cast<int>(r.u32());
  c.max_seq_len = static_cast<int>(r.u32());
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }

  // Shapes are checked against a freshly laid-out model of the same config.
  const ModelParams layout = init_params(c, 0);
  const auto count = r.u32();
  if (count != layout.tensors.size()) {
    throw CheckpointError("checkpoint: expected " + std::to_string(layout.tensors.size()) + " tensors, found " +
                          std::to_string(count));
  }
  ModelParams p;
  p.config = c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u32();
    auto name = r.bytes(name_len);
    if (name != layout.names[i]) {
      throw CheckpointError("checkpoint: tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                            layout.names[i] + "'");
    }
    const auto rank = r.u32();
    nx::Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.u32());
    if (shape != layout.tensors[i].shape()) {
      throw CheckpointError("checkpoint: tensor '" + name + "' has shape " + nx::shape_str(shape) + ", expected " +
                            nx::shape_str(layout.tensors[i].shape()));
    }
    auto data = r.floats(nx::shape_size(shape));
    try {
      p.tensors.emplace_back(shape, std::move(data));
    } catch (const std::exception& e) {
      throw CheckpointError("checkpoint: tensor '" + name + "': " + e.what());
    }
    p.names.push_back(std::move(name));
  }
  if (!r.done()) {
    throw CheckpointError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes after last tensor");
  }
  return p;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const auto bytes = serialize(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("checkpoint: write failed for " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace refine
