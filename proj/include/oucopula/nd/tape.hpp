#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "oucopula/nd/tensor.hpp"

namespace oucopula::nd {

/// A trainable tensor with its accumulated gradient and a stable dotted path.
struct Parameter {
  std::string path;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string p, Tensor v) : path(std::move(p)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

class GradTape;

/// Handle to a value recorded on a GradTape.
struct Var {
  GradTape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Records differentiable ops in execution order; backward() replays them in reverse.
///
/// A tape built with `recording = false` still computes forward values but keeps no
/// backward closures, which is what evaluation uses.
class GradTape {
 public:
  using BackwardFn = std::function<void(GradTape&, const Tensor& out_grad)>;

  explicit GradTape(bool recording = true) : recording_(recording) {}
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, false});
    return {this, nodes_.size() - 1};
  }

  /// Leaf for a parameter; repeated calls for the same parameter return the same node.
  Var parameter(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    nodes_.push_back(Node{p.value, {}, nullptr, &p, recording_});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  /// Appends an op result. `fn` receives d(output) and must accumulate into its inputs.
  Var record(Tensor value, bool requires_grad, BackwardFn fn) {
    const bool keep = recording_ && requires_grad;
    nodes_.push_back(Node{std::move(value), {}, keep ? std::move(fn) : nullptr, nullptr, keep});
    return {this, nodes_.size() - 1};
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

  /// Gradient buffer of node `id`, zero-initialized on first access.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  /// Reverse sweep from a scalar output; parameter gradients are accumulated into
  /// their Parameter::grad.
  void backward(Var output) {
    if (output.tape != this) throw ShapeError("backward: variable belongs to another tape");
    const Tensor& out = nodes_.at(output.id).value;
    if (out.size() != 1) throw ShapeError("backward: output must be a scalar, got shape " + out.shape().str());
    if (!recording_) throw ShapeError("backward: tape was not recording");
    grad(output.id)[0] += 1.0;
    for (std::size_t id = output.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
    for (auto& [param, id] : param_nodes_) {
      const Tensor& g = nodes_[id].grad;
      if (g.size() == 0) continue;
      double* dst = param->grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  }

  /// Parameters that have a leaf on this tape, in first-use order.
  std::vector<const Parameter*> touched_parameters() const {
    std::vector<std::pair<std::size_t, const Parameter*>> order;
    for (auto& [p, id] : param_nodes_) order.emplace_back(id, p);
    std::sort(order.begin(), order.end());
    std::vector<const Parameter*> out;
    for (auto& [id, p] : order) out.push_back(p);
    return out;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Opt-in fingerprint of the activation pattern (ReLU masks, max-pool argmaxes).
  /// Two evaluations with equal fingerprints lie on the same smooth piece.
  void track_kinks(bool on) { track_kinks_ = on; }
  bool tracking_kinks() const { return track_kinks_; }
  void mix_kink(std::uint64_t v) {
    kink_hash_ ^= v + 0x9e3779b97f4a7c15ULL + (kink_hash_ << 6) + (kink_hash_ >> 2);
  }
  std::uint64_t kink_fingerprint() const { return kink_hash_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param;
    bool requires_grad;
  };

  bool recording_;
  bool track_kinks_ = false;
  std::uint64_t kink_hash_ = 0;
  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

}  // namespace oucopula::nd
