// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lrnn/errors.hpp"
#include "lrnn/tensor.hpp"

namespace lrnn {

/// Reverse-mode tape. Nodes are appended in execution order, so every node's
/// inputs precede it. Saved activations live inside each node's backward
/// closure as Tensor values (immutable, shared buffers).
///
/// A tape is confined to one thread. Data-parallel training gives each shard its
/// own tape and sums the leaf gradients afterwards.
template <typename T>
class Tape {
 public:
  /// Gradient buffers of a node's inputs, handed to its backward closure.
  class InputGrads {
   public:
    /// Accumulation buffer for input `k`; empty when that input needs no gradient.
    std::span<T> operator[](std::size_t k) {
      const auto id = ids_[k];
      if (!id) return {};
      return tape_.grad_buffer_(*id);
    }
    bool wants(std::size_t k) const { return ids_[k].has_value(); }

   private:
    friend class Tape;
    InputGrads(Tape& tape, const std::vector<std::optional<std::size_t>>& ids) : tape_(tape), ids_(ids) {}
    Tape& tape_;
    const std::vector<std::optional<std::size_t>>& ids_;
  };

  using BackwardFn = std::function<void(std::span<const T> grad_out, InputGrads& grads)>;

  Tape() : uid_(next_uid_()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a leaf. Only leaves created with requires_grad receive gradients.
  Tensor<T> leaf(Tensor<T> value, bool requires_grad = true) {
    Node node;
    node.op = "leaf";
    node.shape = value.shape();
    node.is_leaf = true;
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return stamp_(std::move(value), nodes_.size() - 1, requires_grad);
  }

  /// True when `t` belongs to this tape and gradients must flow into it.
  bool tracks(const Tensor<T>& t) const {
    return t.tape_uid_ == uid_ && t.tape_id_ && nodes_[*t.tape_id_].requires_grad;
  }

  template <typename... Ts>
  bool tracks_any(const Ts&... ts) const {
    return (tracks(ts) || ...);
  }

  /// Appends an op node when any input is tracked; otherwise returns `value` untouched.
  Tensor<T> record(std::string op, Tensor<T> value, const std::vector<const Tensor<T>*>& inputs,
                   BackwardFn backward) {
    if (consumed_) throw ContractError("tape: recording after backward()");
    Node node;
    node.op = std::move(op);
    node.shape = value.shape();
    bool any = false;
    for (const Tensor<T>* in : inputs) {
      if (tracks(*in)) {
        node.inputs.push_back(in->tape_id_);
        any = true;
      } else {
        node.inputs.push_back(std::nullopt);
      }
    }
    if (!any) return value.detached();
    node.requires_grad = true;
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return stamp_(std::move(value), nodes_.size() - 1, true);
  }

  /// Reverse accumulation from a scalar loss. A tape supports one backward pass.
  void backward(const Tensor<T>& loss) {
    if (consumed_) throw ContractError("tape: backward() already ran on this tape");
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (loss.tape_uid_ != uid_ || !loss.tape_id_) throw ContractError("backward: loss is not on this tape");
    consumed_ = true;
    grads_.assign(nodes_.size(), {});
    const std::size_t root = *loss.tape_id_;
    grad_buffer_(root)[0] = T{1};
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.is_leaf || grads_[i].empty() || !node.backward) continue;
      InputGrads in(*this, node.inputs);
      node.backward(std::span<const T>(grads_[i]), in);
      // intermediate gradients are no longer needed once propagated
      std::vector<T>().swap(grads_[i]);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].is_leaf && nodes_[i].requires_grad) grad_buffer_(i);
    }
  }

  /// Gradient of a requires_grad leaf after backward().
  Tensor<T> grad(const Tensor<T>& t) const {
    if (!consumed_) throw ContractError("grad: backward() has not run");
    if (t.tape_uid_ != uid_ || !t.tape_id_) throw ContractError("grad: tensor is not on this tape");
    const Node& node = nodes_[*t.tape_id_];
    if (!node.is_leaf || !node.requires_grad) throw ContractError("grad: tensor is not a requires_grad leaf");
    return Tensor<T>(node.shape, grads_[*t.tape_id_]);
  }

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }
  bool consumed() const { return consumed_; }

  /// Input node ids of node `id` (untracked inputs omitted).
  std::vector<std::size_t> inputs_of(std::size_t id) const {
    std::vector<std::size_t> out;
    for (const auto& in : nodes_.at(id).inputs)
      if (in) out.push_back(*in);
    return out;
  }

 private:
  struct Node {
    std::string op;
    Shape shape;
    std::vector<std::optional<std::size_t>> inputs;
    BackwardFn backward;
    bool is_leaf = false;
    bool requires_grad = false;
  };

  static std::uint64_t next_uid_() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  Tensor<T> stamp_(Tensor<T> value, std::size_t id, bool requires_grad) {
    value.tape_id_ = id;
    value.tape_uid_ = uid_;
    value.requires_grad_ = requires_grad;
    return value;
  }

  std::span<T> grad_buffer_(std::size_t id) {
    auto& g = grads_[id];
    if (g.empty()) g.assign(shape_numel(nodes_[id].shape), T{0});
    return g;
  }

  std::uint64_t uid_;
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  bool consumed_ = false;
};

}  // namespace lrnn
