#pragma once

#include <cstring>
#include <functional>
#include <optional>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "refine/numerics/array.hpp"

namespace refine::nx {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Array<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool tracked() const { return tape->tracked(*this); }
};

// Gradients of tracked leaves, keyed by leaf id.
template <typename T>
class Gradients {
 public:
  bool contains(Var<T> v) const { return grads_.count(v.id) != 0; }
  const Array<T>& operator[](Var<T> v) const {
    auto it = grads_.find(v.id);
    if (it == grads_.end()) throw std::out_of_range("Gradients: value is not a tracked leaf");
    return it->second;
  }
  void set(int id, Array<T> g) { grads_.insert_or_assign(id, std::move(g)); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<int, Array<T>> grads_;
};

// Linear record of primitive applications. Backward walks the record in exact
// reverse order; each node's pullback scatters into its inputs' gradients.
template <typename T>
class Tape {
 public:
  using Pullback = std::function<void(Tape&, const Array<T>& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Array<T> value) { return push(std::move(value), false, true, nullptr); }
  Var<T> leaf(Array<T> value) { return push(std::move(value), true, true, nullptr); }

  // Records an op result. The node is tracked iff any input is tracked.
  Var<T> record(Array<T> value, std::initializer_list<Var<T>> inputs, Pullback pullback) {
    bool any = false;
    for (auto in : inputs) any = any || nodes_[static_cast<std::size_t>(in.id)].tracked;
    return push(std::move(value), any, false, any ? std::move(pullback) : Pullback{});
  }
  Var<T> record(Array<T> value, const std::vector<Var<T>>& inputs, Pullback pullback) {
    bool any = false;
    for (auto in : inputs) any = any || nodes_[static_cast<std::size_t>(in.id)].tracked;
    return push(std::move(value), any, false, any ? std::move(pullback) : Pullback{});
  }

  const Array<T>& value(Var<T> v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  bool tracked(Var<T> v) const { return nodes_.at(static_cast<std::size_t>(v.id)).tracked; }
  std::size_t size() const { return nodes_.size(); }

  // Adds `g` into the gradient slot of `v` (no-op for untracked values).
  void accumulate(Var<T> v, std::span<const T> g) {
    auto& node = nodes_[static_cast<std::size_t>(v.id)];
    if (!node.tracked) return;
    auto& slot = slot_for(v.id);
    auto dst = slot.mutable_data();
    if (dst.size() != g.size()) {
      throw ShapeError("Tape::accumulate: gradient size mismatch for node " + std::to_string(v.id));
    }
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
  void accumulate(Var<T> v, const Array<T>& g) { accumulate(v, g.data()); }

  // Mutable gradient buffer of a tracked node, for pullbacks that scatter.
  std::span<T> grad_buffer(Var<T> v) {
    if (!nodes_[static_cast<std::size_t>(v.id)].tracked) return {};
    return slot_for(v.id).mutable_data();
  }

  Gradients<T> backward(Var<T> loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss recorded on a different tape");
    const auto& lv = value(loss);
    if (!lv.is_scalar()) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    Gradients<T> out;
    if (nodes_[static_cast<std::size_t>(loss.id)].tracked) {
      slot_for(loss.id) = Array<T>::filled(lv.shape(), T{1});
      for (int id = loss.id; id >= 0; --id) {
        auto& node = nodes_[static_cast<std::size_t>(id)];
        if (!node.tracked || !grads_[static_cast<std::size_t>(id)]) continue;
        if (node.pullback) {
          Array<T> g = std::move(*grads_[static_cast<std::size_t>(id)]);
          grads_[static_cast<std::size_t>(id)].reset();
          node.pullback(*this, g);
        }
      }
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      const auto& node = nodes_[id];
      if (!node.is_leaf || !node.tracked) continue;
      if (grads_[id]) {
        out.set(static_cast<int>(id), std::move(*grads_[id]));
      } else {
        out.set(static_cast<int>(id), Array<T>::zeros(node.value.shape()));
      }
    }
    grads_.clear();
    return out;
  }

 private:
  struct Node {
    Array<T> value;
    bool tracked = false;
    bool is_leaf = false;
    Pullback pullback;
  };

  Var<T> push(Array<T> value, bool tracked, bool leaf, Pullback pullback) {
    nodes_.push_back(Node{std::move(value), tracked, leaf, std::move(pullback)});
    return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
  }

  Array<T>& slot_for(int id) {
    auto& slot = grads_[static_cast<std::size_t>(id)];
    if (!slot) slot = Array<T>::zeros(nodes_[static_cast<std::size_t>(id)].value.shape());
    return *slot;
  }

  std::vector<Node> nodes_;
  std::vector<std::optional<Array<T>>> grads_;
};

template <typename T>
bool bitwise_equal(const Array<T>& a, const Array<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

}  // namespace refine::nx
