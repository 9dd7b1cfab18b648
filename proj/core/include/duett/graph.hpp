// Reverse-mode autodiff on a tape of recorded primitives.
//
// Nodes are appended in evaluation order, so the tape is already a
// topological order of the (acyclic) compute graph. Forward values are
// computed eagerly at node creation; backward() seeds the scalar loss with
// gradient one, marks the subgraph that reaches the loss, and sweeps the
// tape once in reverse. Every op checks its output for NaN/Inf and raises
// instead of propagating.

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "duett/error.hpp"
#include "duett/tensor.hpp"

namespace duett {

// Attention-matrix instrumentation: one record per attention call.
struct AttnRecord {
  std::string axis;       // "event" or "time"
  std::int64_t tokens;    // attention matrix is tokens x tokens
  std::int64_t heads;
  std::int64_t blocks;    // batch items sharing this shape
};

struct GraphStats {
  std::uint64_t matmul_flops = 0;
  std::vector<AttnRecord> attention;
};

// A learned tensor with a stable name. Gradients accumulate across graphs
// until zero_grad(); the optimizer consumes value/grad pairs.
enum class ParamGroup { Encoder, SslHead, ClsHead, RepToken, MaskToken, Buffer };

template <typename S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  ParamGroup group = ParamGroup::Encoder;
  bool trainable = true;

  void zero_grad() {
    auto g = grad.data();
    std::fill(g.begin(), g.end(), S(0));
  }
};

template <typename S>
class Graph;

template <typename S>
struct Var {
  Graph<S>* g = nullptr;
  int idx = -1;

  bool valid() const { return g != nullptr; }
  const Tensor<S>& val() const;
  const Shape& shape() const { return val().shape(); }
};

template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // allocated on demand during backward
  bool has_grad = false;
  bool differentiable = true;
  bool is_param = false;
  Param<S>* param = nullptr;
  const char* op = "";
  std::vector<int> parents;
  std::function<void(Graph<S>&, int)> backward;
};

template <typename S>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool check_finite = true;
  GraphStats* stats = nullptr;

  Node<S>& node(int i) { return *nodes_[static_cast<std::size_t>(i)]; }
  const Node<S>& node(int i) const { return *nodes_[static_cast<std::size_t>(i)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Constant leaf: values only, no gradient is ever requested from it.
  Var<S> input(Tensor<S> v, const char* name = "input") {
    return push(std::move(v), {}, nullptr, name, /*differentiable=*/true);
  }

  // Parameter leaf; one node per distinct Param per graph, so repeated use
  // (shared embeddings injected at every layer) accumulates naturally.
  Var<S> param(Param<S>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return {this, it->second};
    Var<S> v = push(p.value, {}, nullptr, p.name.c_str(), true);
    node(v.idx).is_param = true;
    node(v.idx).param = &p;
    param_nodes_.emplace(&p, v.idx);
    return v;
  }

  // Generic recorded op. `backward(graph, self)` must add into parents'
  // grads via add_grad().
  Var<S> push(Tensor<S> value, std::vector<int> parents,
              std::function<void(Graph<S>&, int)> backward, const char* op,
              bool differentiable = true) {
    if (check_finite && !value.all_finite())
      throw NumericError(std::string("non-finite values produced by op '") +
                         op + "'");
    auto n = std::make_unique<Node<S>>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    n->backward = std::move(backward);
    n->op = op;
    n->differentiable = differentiable;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  Tensor<S>& grad_buf(int i) {
    Node<S>& n = node(i);
    if (!n.has_grad) {
      n.grad = Tensor<S>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void add_grad(int i, const Tensor<S>& g) {
    Tensor<S>& buf = grad_buf(i);
    auto dst = buf.data();
    auto src = g.data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }

  // Reverse sweep from a scalar loss. Touches each reachable node once.
  void backward(Var<S> loss) {
    if (loss.g != this) throw Error("loss belongs to a different graph");
    if (node(loss.idx).value.numel() != 1)
      throw ShapeError("backward requires a scalar loss, got shape " +
                       shape_str(node(loss.idx).value.shape()));
    std::vector<char> reach(nodes_.size(), 0);
    std::vector<int> stack{loss.idx};
    reach[static_cast<std::size_t>(loss.idx)] = 1;
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      for (int p : node(i).parents) {
        if (!reach[static_cast<std::size_t>(p)]) {
          reach[static_cast<std::size_t>(p)] = 1;
          stack.push_back(p);
        }
      }
    }
    grad_buf(loss.idx).data()[0] = S(1);
    for (int i = loss.idx; i >= 0; --i) {
      if (!reach[static_cast<std::size_t>(i)]) continue;
      Node<S>& n = node(i);
      if (!n.differentiable && !n.parents.empty())
        throw Error(std::string("non-differentiable op '") + n.op +
                    "' on the path to the loss");
      if (n.backward && n.has_grad) n.backward(*this, i);
    }
  }

  // Accumulate parameter-leaf gradients into their Param structs, in
  // registration order (deterministic).
  void export_param_grads() {
    for (auto& [p, idx] : ordered_param_nodes()) {
      Node<S>& n = node(idx);
      if (!n.has_grad) continue;
      auto dst = p->grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }

  // grad of loss w.r.t. each listed parameter; zeros for parameters the
  // loss does not depend on.
  std::vector<Tensor<S>> grad(Var<S> loss, const std::vector<Param<S>*>& params) {
    backward(loss);
    std::vector<Tensor<S>> out;
    out.reserve(params.size());
    for (Param<S>* p : params) {
      auto it = param_nodes_.find(p);
      if (it == param_nodes_.end() || !node(it->second).has_grad)
        out.push_back(Tensor<S>(p->value.shape()));
      else
        out.push_back(node(it->second).grad.clone());
    }
    return out;
  }

 private:
  std::vector<std::unique_ptr<Node<S>>> nodes_;
  std::unordered_map<Param<S>*, int> param_nodes_;

  std::vector<std::pair<Param<S>*, int>> ordered_param_nodes() const {
    std::vector<std::pair<Param<S>*, int>> v(param_nodes_.begin(),
                                             param_nodes_.end());
    std::sort(v.begin(), v.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
    return v;
  }
};

template <typename S>
const Tensor<S>& Var<S>::val() const {
  return g->node(idx).value;
}

}  // namespace duett
