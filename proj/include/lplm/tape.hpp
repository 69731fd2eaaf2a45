#pragma once

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lplm/tensor.hpp"

namespace lplm::core {

class Tape;

// Lightweight handle to a tape node.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape. Nodes are recorded in creation order, which is a
// topological order of the graph; backward walks them once in reverse.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(const Tensor& value);
    Var leaf(Tensor&& value);

    const Tensor& value(Var v) const { return nodes_[check(v)].value; }
    const Tensor& grad(Var v) const;

    // Seeds d(root)=1 and accumulates gradients for every node at or below
    // root. root must be scalar (shape {1}). May be called repeatedly; each
    // call recomputes gradients from scratch.
    void backward(Var root);

    void set_check_finite(bool on) { check_finite_ = on; }
    size_t num_nodes() const { return nodes_.size(); }
    void clear();

    // --- used by op implementations ---
    Var make(Tensor value, std::function<void(Tape&, int)> bw, const char* op);
    Tensor& grad_mut(int id) { return nodes_[static_cast<size_t>(id)].grad; }
    const Tensor& value_at(int id) const { return nodes_[static_cast<size_t>(id)].value; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&, int)> backward;  // (tape, own id)
    };

    size_t check(Var v) const;

    // deque: references returned by value()/grad() stay valid as ops append
    std::deque<Node> nodes_;
    bool check_finite_ = false;
    bool grads_ready_ = false;
};

// ---- differentiable ops ----
// All matrices are rank-2 row-major; "vectors" passing through the graph are
// [1,d] matrices, while per-feature gains/biases are rank-1 [d].

Var add(Var a, Var b);                       // same shape
Var sub(Var a, Var b);                       // same shape
Var add_rows(Var mat, Var row);              // [L,d] + [d] broadcast over rows
Var scale_const(Var a, double s);
Var scale_var(Var a, Var alpha);             // alpha: scalar {1}
Var matmul(Var a, Var b);                    // [m,k] x [k,n]
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gelu(Var x);
Var softmax_rows(Var x, double temperature); // stable row softmax of x / tau
Var attention(Var q, Var k, Var v, int heads, bool causal);
Var cross_entropy(Var logits, std::span<const int> targets);  // scalar mean NLL
Var mean_rows(Var x);                        // [L,d] -> [1,d]
Var embedding(Var table, std::vector<int> ids);  // [V,d], ids -> [L,d]
Var append_row(Var mat, Var row);            // [m,d] + [1,d] -> [m+1,d]
Var stack_rows(std::span<const Var> rows);   // k x [1,d] -> [k,d]
Var slice_rows(Var mat, int begin, int count);

}  // namespace lplm::core
