// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors and a tape-based reverse-mode autodiff graph.

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace recon {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::size_t numel(const Shape & shape);
std::string shape_str(const Shape & shape);

// Row-major f64 tensor. `grad` is empty until something writes a gradient.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> values);

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rows() const;
    std::size_t cols() const;

    double & at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool has_grad() const { return !grad.empty(); }
    void zero_grad();
    void clear_grad() { grad.clear(); }
};

enum class OpKind {
    leaf,
    matmul,
    add,
    sub,
    mul,
    scale,
    transpose,
    softmax_lastdim,
    layernorm,
    rmsnorm,
    gelu,
    silu,
    embed_lookup,
    reshape,
    slice,
    mask_mul,
    sum,
    mean,
    mse_loss,
    cosine_loss,
    cross_entropy,
};

const char * op_name(OpKind kind);

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kRmsNormEps = 1e-6;

class Graph;

// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
struct Var {
    Graph * graph = nullptr;
    std::size_t id = 0;

    const Tensor & value() const;
    const Shape & shape() const { return value().shape; }
};

// Append-only tape. Nodes are created in topological order, so backward() is a
// single reverse sweep. Leaves bound with param() receive gradients in their
// own Tensor::grad (accumulating across backward calls); intermediate
// gradients are reset at the start of every backward().
class Graph {
public:
    Graph() = default;
    Graph(const Graph &) = delete;
    Graph & operator=(const Graph &) = delete;

    // Owned constant.
    Var constant(Tensor t);
    // Borrowed constant; `t` must outlive the graph.
    Var input(const Tensor & t);
    // Borrowed leaf; gradients flow into t.grad when t.requires_grad is set.
    Var param(Tensor & t);

    // [..., m, k] x [k, n] (shared rhs) or [..., m, k] x [..., k, n] (batched).
    // With transpose_rhs the rhs is given as [n, k] / [..., n, k].
    Var matmul(Var a, Var b, bool transpose_rhs = false);
    // Same shape, or a rank-1 bias broadcast along the last dimension.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var transpose(Var a, std::size_t axis0, std::size_t axis1);
    // Causal masking excludes entries j > i over the last two axes.
    Var softmax_lastdim(Var a, bool causal = false);
    Var layernorm(Var x, Var gamma, Var beta);
    Var rmsnorm(Var x, Var gamma);
    Var gelu(Var a);
    Var silu(Var a);
    Var embed_lookup(Var table, std::span<const int> ids);
    Var reshape(Var a, Shape shape);
    Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
    // `mask` is treated as a constant and must outlive the graph.
    Var mask_mul(Var w, const Tensor & mask);
    Var sum(Var a);
    Var mean(Var a);
    Var mse_loss(Var pred, Var target);
    // 1 - mean cosine similarity over rows of the last axis. Rows where either
    // side has zero norm count as orthogonal and increment `zero_rows`.
    Var cosine_loss(Var pred, Var target, std::size_t * zero_rows = nullptr);
    // Mean next-token NLL over logits [N, V]; targets equal to -1 are ignored.
    Var cross_entropy(Var logits, std::span<const int> targets);

    void backward(Var root);

    const Tensor & value(std::size_t id) const;
    OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
    bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
    const std::vector<std::size_t> & inputs(std::size_t id) const { return nodes_.at(id).inputs; }
    std::size_t size() const { return nodes_.size(); }

private:
    using BackwardFn = std::function<void(Graph &, std::size_t)>;

    struct Node {
        OpKind kind = OpKind::leaf;
        std::vector<std::size_t> inputs;
        Tensor out;
        const Tensor * borrowed = nullptr;
        Tensor * leaf = nullptr;
        bool needs_grad = false;
        std::vector<double> grad;
        BackwardFn backward;
    };

    Var push(OpKind kind, std::vector<std::size_t> inputs, Tensor out, BackwardFn fn);
    std::vector<double> & grad_of(std::size_t id);
    const std::vector<double> & upstream(std::size_t id) const { return nodes_[id].grad; }
    void check_owner(Var v, const char * op) const;

    std::vector<Node> nodes_;
};

}  // namespace recon
