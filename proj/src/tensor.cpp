// SPDX-License-Identifier: Apache-2.0

#include "recon/tensor.h"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace recon {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

[[noreturn]] void shape_fail(const char * op, const Shape & a, const Shape & b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_fail(const char * op, const Shape & a, const std::string & why) {
    throw ShapeError(std::string(op) + ": " + why + " (got " + shape_str(a) + ")");
}

std::size_t last_dim(const Tensor & t) { return t.shape.empty() ? 1 : t.shape.back(); }

void accumulate(std::vector<double> & dst, const std::vector<double> & src) {
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] += src[i];
    }
}

}  // namespace

std::size_t numel(const Shape & shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape & shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {
    if (std::find(shape.begin(), shape.end(), std::size_t{0}) != shape.end()) {
        throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
    }
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (numel(shape) != data.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                         " values");
    }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto & row : rows) {
        if (row.size() != c) {
            throw ShapeError("tensor: ragged matrix literal");
        }
        values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::rows() const {
    if (rank() != 2) {
        throw ShapeError("tensor: rows() on non-matrix " + shape_str(shape));
    }
    return shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) {
        throw ShapeError("tensor: cols() on non-matrix " + shape_str(shape));
    }
    return shape[1];
}

void Tensor::zero_grad() {
    grad.assign(data.size(), 0.0);
}

const char * op_name(OpKind kind) {
    switch (kind) {
        case OpKind::leaf: return "leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::transpose: return "transpose";
        case OpKind::softmax_lastdim: return "softmax-lastdim";
        case OpKind::layernorm: return "layernorm";
        case OpKind::rmsnorm: return "rmsnorm";
        case OpKind::gelu: return "gelu";
        case OpKind::silu: return "silu";
        case OpKind::embed_lookup: return "embed-lookup";
        case OpKind::reshape: return "reshape";
        case OpKind::slice: return "slice";
        case OpKind::mask_mul: return "mask-mul";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
        case OpKind::mse_loss: return "mse-loss";
        case OpKind::cosine_loss: return "cosine-loss";
        case OpKind::cross_entropy: return "cross-entropy";
    }
    return "?";
}

const Tensor & Var::value() const {
    return graph->value(id);
}

const Tensor & Graph::value(std::size_t id) const {
    const Node & n = nodes_.at(id);
    if (n.leaf) {
        return *n.leaf;
    }
    if (n.borrowed) {
        return *n.borrowed;
    }
    return n.out;
}

void Graph::check_owner(Var v, const char * op) const {
    if (v.graph != this || v.id >= nodes_.size()) {
        throw std::invalid_argument(std::string(op) + ": variable belongs to another graph");
    }
}

Var Graph::push(OpKind kind, std::vector<std::size_t> inputs, Tensor out, BackwardFn fn) {
    Node n;
    n.kind = kind;
    n.needs_grad = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].needs_grad; });
    n.inputs = std::move(inputs);
    n.out = std::move(out);
    if (n.needs_grad) {
        n.backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

std::vector<double> & Graph::grad_of(std::size_t id) {
    Node & n = nodes_[id];
    if (n.grad.empty()) {
        n.grad.assign(value(id).size(), 0.0);
    }
    return n.grad;
}

Var Graph::constant(Tensor t) {
    Node n;
    n.out = std::move(t);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Graph::input(const Tensor & t) {
    Node n;
    n.borrowed = &t;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Graph::param(Tensor & t) {
    Node n;
    n.leaf = &t;
    n.needs_grad = t.requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Graph::matmul(Var a, Var b, bool transpose_rhs) {
    check_owner(a, "matmul");
    check_owner(b, "matmul");
    const Tensor & A = a.value();
    const Tensor & B = b.value();
    if (A.rank() < 2 || B.rank() < 2) {
        shape_fail("matmul", A.shape, B.shape);
    }
    const std::size_t m = A.shape[A.rank() - 2];
    const std::size_t k = A.shape[A.rank() - 1];
    const std::size_t bk = transpose_rhs ? B.shape[B.rank() - 1] : B.shape[B.rank() - 2];
    const std::size_t n = transpose_rhs ? B.shape[B.rank() - 2] : B.shape[B.rank() - 1];
    if (bk != k) {
        shape_fail("matmul", A.shape, B.shape);
    }
    const bool shared = B.rank() == 2;
    if (!shared) {
        if (B.rank() != A.rank() || !std::equal(A.shape.begin(), A.shape.end() - 2, B.shape.begin())) {
            shape_fail("matmul", A.shape, B.shape);
        }
    }
    Shape out_shape = A.shape;
    out_shape.back() = n;
    Tensor out(out_shape);

    const std::size_t batch = shared ? 1 : A.size() / (m * k);
    const std::size_t rows = shared ? A.size() / k : m;
    const std::size_t a_stride = rows * k;
    const std::size_t b_stride = k * n;
    const std::size_t c_stride = rows * n;
    for (std::size_t bi = 0; bi < batch; ++bi) {
        ConstMap am(A.data.data() + bi * a_stride, rows, k);
        MutMap cm(out.data.data() + bi * c_stride, rows, n);
        if (transpose_rhs) {
            ConstMap bm(B.data.data() + bi * b_stride, n, k);
            cm.noalias() = am * bm.transpose();
        } else {
            ConstMap bm(B.data.data() + bi * b_stride, k, n);
            cm.noalias() = am * bm;
        }
    }

    const std::size_t ia = a.id;
    const std::size_t ib = b.id;
    return push(OpKind::matmul, {ia, ib}, std::move(out),
                [=](Graph & g, std::size_t self) {
                    const auto & dc = g.upstream(self);
                    const Tensor & A = g.value(ia);
                    const Tensor & B = g.value(ib);
                    if (g.nodes_[ia].needs_grad) {
                        auto & da = g.grad_of(ia);
                        for (std::size_t bi = 0; bi < batch; ++bi) {
                            ConstMap dcm(dc.data() + bi * c_stride, rows, n);
                            MutMap dam(da.data() + bi * a_stride, rows, k);
                            if (transpose_rhs) {
                                dam.noalias() += dcm * ConstMap(B.data.data() + bi * b_stride, n, k);
                            } else {
                                dam.noalias() += dcm * ConstMap(B.data.data() + bi * b_stride, k, n).transpose();
                            }
                        }
                    }
                    if (g.nodes_[ib].needs_grad) {
                        auto & db = g.grad_of(ib);
                        for (std::size_t bi = 0; bi < batch; ++bi) {
                            ConstMap dcm(dc.data() + bi * c_stride, rows, n);
                            ConstMap am(A.data.data() + bi * a_stride, rows, k);
                            const std::size_t off = shared ? 0 : bi * b_stride;
                            if (transpose_rhs) {
                                MutMap(db.data() + off, n, k).noalias() += dcm.transpose() * am;
                            } else {
                                MutMap(db.data() + off, k, n).noalias() += am.transpose() * dcm;
                            }
                        }
                    }
                });
}

Var Graph::add(Var a, Var b) {
    check_owner(a, "add");
    check_owner(b, "add");
    const Tensor & A = a.value();
    const Tensor & B = b.value();
    const bool bias = B.rank() == 1 && A.shape != B.shape;
    if (!bias && A.shape != B.shape) {
        shape_fail("add", A.shape, B.shape);
    }
    if (bias && B.size() != last_dim(A)) {
        shape_fail("add", A.shape, B.shape);
    }
    Tensor out(A.shape, A.data);
    const std::size_t width = B.size();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] += B.data[bias ? i % width : i];
    }
    const std::size_t ia = a.id;
    const std::size_t ib = b.id;
    return push(OpKind::add, {ia, ib}, std::move(out), [=](Graph & g, std::size_t self) {
        const auto & dy = g.upstream(self);
        if (g.nodes_[ia].needs_grad) {
            accumulate(g.grad_of(ia), dy);
        }
        if (g.nodes_[ib].needs_grad) {
            auto & db = g.grad_of(ib);
            for (std::size_t i = 0; i < dy.size(); ++i) {
                db[bias ? i % width : i] += dy[i];
            }
        }
    });
}

Var Graph::sub(Var a, Var b) {
    check_owner(a, "sub");
    check_owner(b, "sub");
    const Tensor & A = a.value();
    const Tensor & B = b.value();
    if (A.shape != B.shape) {
        shape_fail("sub", A.shape, B.shape);
    }
    Tensor out(A.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] = A.data[i] - B.data[i];
    }
    const std::size_t ia = a.id;
    const std::size_t ib = b.id;
    return push(OpKind::sub, {ia, ib}, std::move(out), [=](Graph & g, std::size_t self) {
        const auto & dy = g.upstream(self);
        if (g.nodes_[ia].needs_grad) {
            accumulate(g.grad_of(ia), dy);
        }
        if (g.nodes_[ib].needs_grad) {
            auto & db = g.grad_of(ib);
            for (std::size_t i = 0; i < dy.size(); ++i) {
                db[i] -= dy[i];
            }
        }
    });
}

Var Graph::mul(Var a, Var b) {
    check_owner(a, "mul");
    check_owner(b, "mul");
    const Tensor & A = a.value();
    const Tensor & B = b.value();
    if (A.shape != B.shape) {
        shape_fail("mul", A.shape, B.shape);
    }
    Tensor out(A.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] = A.data[i] * B.data[i];
    }
    const std::size_t ia = a.id;
    const std::size_t ib = b.id;
    return push(OpKind::mul, {ia, ib}, std::move(out), [=](Graph & g, std::size_t self) {
        const auto & dy = g.upstream(self);
        const Tensor & A = g.value(ia);
        const Tensor & B = g.value(ib);
        if (g.nodes_[ia].needs_grad) {
            auto & da = g.grad_of(ia);
            for (std::size_t i = 0; i < dy.size(); ++i) {
                da[i] += dy[i] * B.data[i];
            }
        }
        if (g.nodes_[ib].needs_grad) {
            auto & db = g.grad_of(ib);
            for (std::size_t i = 0; i < dy.size(); ++i) {
                db[i] += dy[i] * A.data[i];
            }
        }
    });
}

Var Graph::scale(Var a, double c) {
    check_owner(a, "scale");
    const Tensor & A = a.value();
    Tensor out(A.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] = A.data[i] * c;
    }
    const std::size_t ia = a.id;
    return push(OpKind::scale, {ia}, std::move(out), [=](Graph & g, std::size_t self) {
        const auto & dy = g.upstream(self);
        auto & da = g.grad_of(ia);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            da[i] += dy[i] * c;
        }
    });
}

Var Graph::transpose(Var a, std::size_t axis0, std::size_t axis1) {
    check_owner(a, "transpose");
    const Tensor & A = a.value();
    const std::size_t r = A.rank();
    if (axis0 >= r || axis1 >= r) {
        shape_fail("transpose", A.shape, "axis out of range");
    }
    Shape out_shape = A.shape;
    std::swap(out_shape[axis0], out_shape[axis1]);

    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) {
        in_strides[i - 1] = in_strides[i] * A.shape[i];
    }
    std::vector<std::size_t> strides = in_strides;
    std::swap(strides[axis0], strides[axis1]);

    // source offset of every output element
    std::vector<std::size_t> src(A.size());
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < src.size(); ++o) {
        std::size_t off = 0;
        for (std::size_t d = 0; d < r; ++d) {
            off += idx[d] * strides[d];
        }
        src[o] = off;
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < out_shape[d]) {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor out(out_shape);
    for (std::size_t o = 0; o < src.size(); ++o) {
        out.data[o] = A.data[src[o]];
    }
    const std::size_t ia = a.id;
    return push(OpKind::transpose, {ia}, std::move(out), [ia, src = std::move(src)](Graph & g, std::size_t self) {
        const auto & dy = g.upstream(self);
        auto & da = g.grad_of(ia);
        for (std::size_t o = 0; o < src.size(); ++o) {
            da[src[o]] += dy[o];
        }
    });
}

Var Graph::softmax_lastdim(Var a, bool causal) {
    check_owner(a, "softmax-lastdim");
    const Tensor & A = a.value();
    const std::size_t n = last_dim(A);
    std::size_t side = 0;
    if (causal) {
        if (A.rank() < 2 || A.shape[A.rank() - 2] != n) {
            shape_fail("softmax-lastdim", A.shape, "causal softmax needs square trailing axes");
        }
        side = n;
    }
    Tensor out(A.shape);
    const std::size_t rows = A.size() / n;
    for (std::size_t row = 0; row < rows; ++row) {
        const double * x = A.data.data() + row * n;
        double * y = out.data.data() + row * n;
        const std::size_t valid = causal ? row % side + 1 : n;
        double mx = x[0];
        for (std::size_t j = 1; j < valid; ++j) {
            mx = std::max(mx, x[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < valid; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < valid; ++j) {
            y[j] /= z;
        }
    }
    const std::size_t ia = a.id;
    return push(OpKind::softmax_lastdim, {ia}, std::move(out), [=](Graph & g, std::size_t self) {
        const auto & dy = g.upstream(self);
        const Tensor & Y = g.value(self);
        auto & da = g.grad_of(ia);
        for (std::size_t row = 0; row < rows; ++row) {
            const std::size_t base = row * n;
            const std::size_t valid = causal ? row % side + 1 : n;
            double dot = 0.0;
            for (std::size_t j = 0; j < valid; ++j) {
                dot += dy[base + j] * Y.data[base + j];
            }
            for (std::size_t j = 0; j < valid; ++j) {
                da[base + j] += Y.data[base + j] * (dy[base + j] - dot);
            }
        }
    });
}

Var Graph::layernorm(Var x, Var gamma, Var beta) {
    check_owner(x, "layernorm");
    check_owner(gamma, "layernorm");
    check_owner(beta, "layernorm");
    const Tensor & X = x.value();
    const Tensor & G = gamma.value();
    const Tensor & B = beta.value();
    const std::size_t d = last_dim(X);
    if (G.rank() != 1 || G.size() != d || B.shape != G.shape) {
        shape_fail("layernorm", X.shape, G.shape);
    }
    const std::size_t rows = X.size() / d;
    Tensor out(X.shape);
    std::vector<double> xhat(X.size());
    std::vector<double> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double * xr = X.data.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mu += xr[j];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            var += (xr[j] - mu) * (xr[j] - mu);
        }
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mu) * rstd[r];
            xhat[r * d + j] = h;
            out.data[r * d + j] = h * G.data[j] + B.data[j];
        }
    }
    const std::size_t ix = x.id;
    const std::size_t ig = gamma.id;
    const std::size_t ibeta = beta.id;
    return push(OpKind::layernorm, {ix, ig, ibeta}, std::move(out),
                [=, xhat = std::move(xhat), rstd = std::move(rstd)](Graph & g, std::size_t self) {
                    const auto & dy = g.upstream(self);
                    const Tensor & G = g.value(ig);
                    if (g.nodes_[ix].needs_grad) {
                        auto & dx = g.grad_of(ix);
                        for (std::size_t r = 0; r < rows; ++r) {
                            double m1 = 0.0;
                            double m2 = 0.0;
                            for (std::size_t j = 0; j < d; ++j) {
                                const double dh = dy[r * d + j] * G.data[j];
                                m1 += dh;
                                m2 += dh * xhat[r * d + j];
                            }
                            m1 /= static_cast<double>(d);
                            m2 /= static_cast<double>(d);
                            for (std::size_t j = 0; j < d; ++j) {
                                const double dh = dy[r * d + j] * G.data[j];
                                dx[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                            }
                        }
                    }
                    if (g.nodes_[ig].needs_grad) {
                        auto & dg = g.grad_of(ig);
                        for (std::size_t i = 0; i < dy.size(); ++i) {
                            dg[i % d] += dy[i] * xhat[i];
                        }
                    }
                    if (g.nodes_[ibeta].needs_grad) {
                        auto & db = g.grad_of(ibeta);
                        for (std::size_t i = 0; i < dy.size(); ++i) {
                            db[i % d] += dy[i];
                        }
                    }
                });
}

Var Graph::rmsnorm(Var x, Var gamma) {
    check_owner(x, "rmsnorm");
    check_owner(gamma, "rmsnorm");
    const Tensor & X = x.value();
    const Tensor & G = gamma.value();
    const std::size_t d = last_dim(X);
    if (G.rank() != 1 || G.size() != d) {
        shape_fail("rmsnorm", X.shape, G.shape);
    }
    const std::size_t rows = X.size() / d;
    Tensor out(X.shape);
    std::vector<double> rinv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double * xr = X.data.data() + r * d;
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            ms += xr[j] * xr[j];
        }
        ms /= static_cast<double>(d);
        rinv[r] = 1.0 / std::sqrt(ms + kRmsNormEps);
        for (std::size_t j = 0; j < d; ++j) {
            out.data[r * d + j] = xr[j] * rinv[r] * G.data[j];
        }
    }
    const std::size_t ix = x.id;
    const std::size_t ig = gamma.id;
    return push(OpKind::rmsnorm, {ix, ig}, std::move(out), [=, rinv = std::move(rinv)](Graph & g, std::size_t self) {
        const auto & dy = g.upstream(self);
        const Tensor & X = g.value(ix);
        const Tensor & G = g.value(ig);
        if (g.nodes_[ix].needs_grad) {
            auto & dx = g.grad_of(ix);
            for (std::size_t r = 0; r < rows; ++r) {
                const double * xr = X.data.data() + r * d;
                double m = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    m += dy[r * d + j] * G.data[j] * xr[j];
                }
                m /= static_cast<double>(d);
                const double r3 = rinv[r] * rinv[r] * rinv[r];
                for (std::size_t j = 0; j < d; ++j) {
                    dx[r * d + j] += rinv[r] * dy[r * d + j] * G.data[j] - r3 * xr[j] * m;
                }
            }
        }
        if (g.nodes_[ig].needs_grad) {
            auto & dg = g.grad_of(ig);
            for (std::size_t i = 0; i < dy.size(); ++i) {
                dg[i % d] += dy[i] * X.data[i] * rinv[i / d];
            }
        }
    });
}

Var Graph::gelu(Var a) {
    check_owner(a, "gelu");
    const Tensor & A = a.value();
    Tensor out(A.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = A.data[i];
        out.data[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    const std::size_t ia = a.id;
    return push(OpKind::gelu, {ia}, std::move(out), [=](Graph & g, std::size_t self) {
        const auto & dy = g.upstream(self);
        const Tensor & A = g.value(ia);
        auto & da = g.grad_of(ia);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            const double x = A.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            da[i] += dy[i] * (cdf + x * pdf);
        }
    });
}

Var Graph::silu(Var a) {
    check_owner(a, "silu");
    const Tensor & A = a.value();
    Tensor out(A.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = A.data[i];
        out.data[i] = x / (1.0 + std::exp(-x));
    }
    const std::size_t ia = a.id;
    return push(OpKind::silu, {ia}, std::move(out), [=](Graph & g, std::size_t self) {
        const auto & dy = g.upstream(self);
        const Tensor & A = g.value(ia);
        auto & da = g.grad_of(ia);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            const double x = A.data[i];
            const double s = 1.0 / (1.0 + std::exp(-x));
            da[i] += dy[i] * s * (1.0 + x * (1.0 - s));
        }
    });
}

Var Graph::embed_lookup(Var table, std::span<const int> ids) {
    check_owner(table, "embed-lookup");
    const Tensor & T = table.value();
    if (T.rank() != 2) {
        shape_fail("embed-lookup", T.shape, "table must be a matrix");
    }
    const std::size_t vocab = T.shape[0];
    const std::size_t d = T.shape[1];
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw std::out_of_range("embed-lookup: token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(vocab));
        }
    }
    if (ids.empty()) {
        throw ShapeError("embed-lookup: empty id list");
    }
    Tensor out({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        std::copy_n(T.data.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data.data() + r * d);
    }
    const std::size_t it = table.id;
    std::vector<int> rows(ids.begin(), ids.end());
    return push(OpKind::embed_lookup, {it}, std::move(out), [=, rows = std::move(rows)](Graph & g, std::size_t self) {
        const auto & dy = g.upstream(self);
        auto & dt = g.grad_of(it);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const std::size_t base = static_cast<std::size_t>(rows[r]) * d;
            for (std::size_t j = 0; j < d; ++j) {
                dt[base + j] += dy[r * d + j];
            }
        }
    });
}

Var Graph::reshape(Var a, Shape shape) {
    check_owner(a, "reshape");
    const Tensor & A = a.value();
    if (numel(shape) != A.size()) {
        shape_fail("reshape", A.shape, shape);
    }
    Tensor out(std::move(shape), A.data);
    const std::size_t ia = a.id;
    return push(OpKind::reshape, {ia}, std::move(out), [=](Graph & g, std::size_t self) {
        accumulate(g.grad_of(ia), g.upstream(self));
    });
}

Var Graph::slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
    check_owner(a, "slice");
    const Tensor & A = a.value();
    if (axis >= A.rank() || begin >= end || end > A.shape[axis]) {
        shape_fail("slice", A.shape,
                    "bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                        std::to_string(axis));
    }
    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) {
        outer *= A.shape[d];
    }
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < A.rank(); ++d) {
        inner *= A.shape[d];
    }
    const std::size_t len = end - begin;
    const std::size_t full = A.shape[axis];
    Shape out_shape = A.shape;
    out_shape[axis] = len;
    Tensor out(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(A.data.data() + (o * full + begin) * inner, len * inner, out.data.data() + o * len * inner);
    }
    const std::size_t ia = a.id;
    return push(OpKind::slice, {ia}, std::move(out), [=](Graph & g, std::size_t self) {
        const auto & dy = g.upstream(self);
        auto & da = g.grad_of(ia);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < len * inner; ++i) {
                da[(o * full + begin) * inner + i] += dy[o * len * inner + i];
            }
        }
    });
}

Var Graph::mask_mul(Var w, const Tensor & mask) {
    check_owner(w, "mask-mul");
    const Tensor & W = w.value();
    if (W.shape != mask.shape) {
        shape_fail("mask-mul", W.shape, mask.shape);
    }
    Tensor out(W.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] = mask.data[i] == 0.0 ? 0.0 : W.data[i] * mask.data[i];
    }
    const std::size_t iw = w.id;
    const Tensor * m = &mask;
    return push(OpKind::mask_mul, {iw}, std::move(out), [=](Graph & g, std::size_t self) {
        const auto & dy = g.upstream(self);
        auto & dw = g.grad_of(iw);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            if (m->data[i] != 0.0) {
                dw[i] += dy[i] * m->data[i];
            }
        }
    });
}

Var Graph::sum(Var a) {
    check_owner(a, "sum");
    const Tensor & A = a.value();
    double s = 0.0;
    for (double v : A.data) {
        s += v;
    }
    const std::size_t ia = a.id;
    return push(OpKind::sum, {ia}, Tensor::scalar(s), [=](Graph & g, std::size_t self) {
        const double dy = g.upstream(self)[0];
        for (auto & v : g.grad_of(ia)) {
            v += dy;
        }
    });
}

Var Graph::mean(Var a) {
    check_owner(a, "mean");
    const Tensor & A = a.value();
    double s = 0.0;
    for (double v : A.data) {
        s += v;
    }
    const double n = static_cast<double>(A.size());
    const std::size_t ia = a.id;
    return push(OpKind::mean, {ia}, Tensor::scalar(s / n), [=](Graph & g, std::size_t self) {
        const double dy = g.upstream(self)[0] / n;
        for (auto & v : g.grad_of(ia)) {
            v += dy;
        }
    });
}

Var Graph::mse_loss(Var pred, Var target) {
    check_owner(pred, "mse-loss");
    check_owner(target, "mse-loss");
    const Tensor & P = pred.value();
    const Tensor & T = target.value();
    if (P.shape != T.shape) {
        shape_fail("mse-loss", P.shape, T.shape);
    }
    double s = 0.0;
    for (std::size_t i = 0; i < P.size(); ++i) {
        const double e = P.data[i] - T.data[i];
        s += e * e;
    }
    const double n = static_cast<double>(P.size());
    const std::size_t ip = pred.id;
    const std::size_t it = target.id;
    return push(OpKind::mse_loss, {ip, it}, Tensor::scalar(s / n), [=](Graph & g, std::size_t self) {
        const double dy = g.upstream(self)[0];
        const Tensor & P = g.value(ip);
        const Tensor & T = g.value(it);
        const double c = 2.0 * dy / n;
        if (g.nodes_[ip].needs_grad) {
            auto & dp = g.grad_of(ip);
            for (std::size_t i = 0; i < dp.size(); ++i) {
                dp[i] += c * (P.data[i] - T.data[i]);
            }
        }
        if (g.nodes_[it].needs_grad) {
            auto & dt = g.grad_of(it);
            for (std::size_t i = 0; i < dt.size(); ++i) {
                dt[i] -= c * (P.data[i] - T.data[i]);
            }
        }
    });
}

Var Graph::cosine_loss(Var pred, Var target, std::size_t * zero_rows) {
    check_owner(pred, "cosine-loss");
    check_owner(target, "cosine-loss");
    const Tensor & P = pred.value();
    const Tensor & T = target.value();
    if (P.shape != T.shape) {
        shape_fail("cosine-loss", P.shape, T.shape);
    }
    const std::size_t d = last_dim(P);
    const std::size_t rows = P.size() / d;
    std::vector<double> cos(rows, 0.0);
    std::vector<double> np(rows, 0.0);
    std::vector<double> nt(rows, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double pp = 0.0;
        double tt = 0.0;
        double pt = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double p = P.data[r * d + j];
            const double t = T.data[r * d + j];
            pp += p * p;
            tt += t * t;
            pt += p * t;
        }
        np[r] = std::sqrt(pp);
        nt[r] = std::sqrt(tt);
        if (np[r] == 0.0 || nt[r] == 0.0) {
            if (zero_rows) {
                ++*zero_rows;
            }
        } else {
            cos[r] = pt / (np[r] * nt[r]);
        }
        total += 1.0 - cos[r];
    }
    const double n = static_cast<double>(rows);
    const std::size_t ip = pred.id;
    const std::size_t it = target.id;
    return push(OpKind::cosine_loss, {ip, it}, Tensor::scalar(total / n),
                [=, cos = std::move(cos), np = std::move(np), nt = std::move(nt)](Graph & g, std::size_t self) {
                    const double dy = g.upstream(self)[0];
                    const Tensor & P = g.value(ip);
                    const Tensor & T = g.value(it);
                    const bool gp = g.nodes_[ip].needs_grad;
                    const bool gt = g.nodes_[it].needs_grad;
                    for (std::size_t r = 0; r < rows; ++r) {
                        if (np[r] == 0.0 || nt[r] == 0.0) {
                            continue;
                        }
                        const double c = -dy / n;
                        const double inv = 1.0 / (np[r] * nt[r]);
                        for (std::size_t j = 0; j < d; ++j) {
                            const double p = P.data[r * d + j];
                            const double t = T.data[r * d + j];
                            if (gp) {
                                g.grad_of(ip)[r * d + j] += c * (t * inv - cos[r] * p / (np[r] * np[r]));
                            }
                            if (gt) {
                                g.grad_of(it)[r * d + j] += c * (p * inv - cos[r] * t / (nt[r] * nt[r]));
                            }
                        }
                    }
                });
}

Var Graph::cross_entropy(Var logits, std::span<const int> targets) {
    check_owner(logits, "cross-entropy");
    const Tensor & L = logits.value();
    if (L.rank() != 2 || L.shape[0] != targets.size()) {
        shape_fail("cross-entropy", L.shape, "logits must be [N, V] with N targets");
    }
    const std::size_t rows = L.shape[0];
    const std::size_t v = L.shape[1];
    std::vector<double> lse(rows, 0.0);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const int t = targets[r];
        if (t == -1) {
            continue;
        }
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw std::out_of_range("cross-entropy: target " + std::to_string(t) + " outside vocabulary");
        }
        const double * x = L.data.data() + r * v;
        const double mx = *std::max_element(x, x + v);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            z += std::exp(x[j] - mx);
        }
        lse[r] = mx + std::log(z);
        total += lse[r] - x[t];
        ++count;
    }
    const double n = count ? static_cast<double>(count) : 1.0;
    const std::size_t il = logits.id;
    std::vector<int> tgt(targets.begin(), targets.end());
    return push(OpKind::cross_entropy, {il}, Tensor::scalar(total / n),
                [=, lse = std::move(lse), tgt = std::move(tgt)](Graph & g, std::size_t self) {
                    const double dy = g.upstream(self)[0] / n;
                    const Tensor & L = g.value(il);
                    auto & dl = g.grad_of(il);
                    for (std::size_t r = 0; r < rows; ++r) {
                        if (tgt[r] == -1) {
                            continue;
                        }
                        for (std::size_t j = 0; j < v; ++j) {
                            dl[r * v + j] += dy * std::exp(L.data[r * v + j] - lse[r]);
                        }
                        dl[r * v + static_cast<std::size_t>(tgt[r])] -= dy;
                    }
                });
}

void Graph::backward(Var root) {
    check_owner(root, "backward");
    if (value(root.id).size() != 1) {
        throw std::invalid_argument("backward: root must be a scalar, got " + shape_str(value(root.id).shape));
    }
    for (auto & n : nodes_) {
        n.grad.clear();
    }
    if (!nodes_[root.id].needs_grad) {
        return;
    }
    nodes_[root.id].grad.assign(1, 1.0);
    for (std::size_t i = root.id + 1; i-- > 0;) {
        Node & n = nodes_[i];
        if (!n.needs_grad || n.grad.empty()) {
            continue;
        }
        if (n.leaf) {
            if (n.leaf->grad.empty()) {
                n.leaf->grad.assign(n.leaf->size(), 0.0);
            }
            accumulate(n.leaf->grad, n.grad);
        } else if (n.backward) {
            n.backward(*this, i);
        }
        if (i != root.id) {
            n.grad.clear();
            n.grad.shrink_to_fit();
        }
    }
}

}  // namespace recon
