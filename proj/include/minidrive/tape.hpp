#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "minidrive/tensor.hpp"

namespace minidrive {

/// Reverse-mode tape. Ops append one node per application; backward()
/// replays the nodes in exact reverse order. Gradient buffers are owned
/// by the tape and keyed by tensor identity, so concurrent tapes over
/// shared (read-only) parameter tensors never race.
template <class S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape<S>&)>;

  void record(const char* op, BackwardFn fn) {
    nodes_.push_back(Node{op, std::move(fn)});
  }

  size_t size() const { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 and accumulates gradients for every
  /// recorded op. `root` must be a scalar (one element).
  void backward(const TensorPtr<S>& root) {
    if (root->numel() != 1) throw DimError("backward root must be a scalar");
    grad_buf(root)[0] = S(1);
    visited_.clear();
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      visited_.push_back(it->op);
      it->fn(*this);
    }
  }

  /// Tape-owned gradient buffer for `t`, created zero-filled on first use.
  std::vector<S>& grad_buf(const TensorPtr<S>& t) {
    auto& buf = grads_[t.get()];
    if (buf.size() != t->data.size()) buf.assign(t->data.size(), S(0));
    return buf;
  }

  /// nullptr when no gradient ever reached `t`.
  const std::vector<S>* find_grad(const Tensor<S>* t) const {
    auto it = grads_.find(t);
    return it == grads_.end() ? nullptr : &it->second;
  }

  /// Copies tape gradients into Tensor::grad for every tensor that
  /// requires one (accumulating, as a training batch does).
  void export_grads(const std::vector<TensorPtr<S>>& tensors) {
    for (const auto& t : tensors) {
      if (!t->requires_grad) continue;
      auto* g = find_grad(t.get());
      auto& dst = t->ensure_grad();
      if (g)
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += (*g)[i];
    }
  }

  /// Op names in the order backward visited them (newest first).
  const std::vector<std::string>& visit_order() const { return visited_; }

 private:
  struct Node {
    const char* op;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<S>*, std::vector<S>> grads_;
  std::vector<std::string> visited_;
};

}  // namespace minidrive
