#pragma once

// Reverse-mode differentiation over small dense tensors.
//
// A Var is a shared handle to a node holding a value buffer, a lazily
// allocated gradient buffer and, when any input requires gradients, a
// closure that pushes the node's gradient into its parents. Calling
// backward(root) runs the closures in reverse topological order. Graphs are
// freed when the last handle to the root goes away.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "udat/core_types.hpp"

namespace udat::ag {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
    [[nodiscard]] std::size_t size() const noexcept { return value.size(); }
    [[nodiscard]] int dim(std::size_t i) const { return shape.at(i); }
};

using Var = std::shared_ptr<Node>;

inline Var constant(Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size()) throw ShapeError("value count does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return n;
}

inline Var zeros(Shape shape) {
    const auto n = numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
}

inline Var scalar(double v) { return constant({1}, {v}); }

/// Leaf that accumulates gradients.
inline Var parameter(Shape shape, std::vector<double> values) {
    auto n = constant(std::move(shape), std::move(values));
    n->requires_grad = true;
    return n;
}

/// Copy of the value with no history.
inline Var detach(const Var& v) { return constant(v->shape, v->value); }

/// Creates an op node. `backward` receives the finished node and must add
/// into the gradients of those parents that require them.
template <class Backward>
Var make_op(Shape shape, std::vector<double> value, std::vector<Var> parents, Backward&& backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    const bool needs = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p->requires_grad; });
    if (needs) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::forward<Backward>(backward);
    }
    return n;
}

inline void backward(const Var& root, double seed = 1.0) {
    if (!root->requires_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && p->backward_fn && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    auto& g = root->ensure_grad();
    std::fill(g.begin(), g.end(), seed);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Eigen views
// ---------------------------------------------------------------------------

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

inline CMatMap cmat(const std::vector<double>& v, int rows, int cols) { return {v.data(), rows, cols}; }
inline MatMap mat(std::vector<double>& v, int rows, int cols) { return {v.data(), rows, cols}; }

inline void expect_rank(const Var& v, std::size_t rank, const char* op) {
    if (v->shape.size() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(v->shape));
}

inline void expect_same(const Var& a, const Var& b, const char* op) {
    if (a->shape != b->shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
}

// ---------------------------------------------------------------------------
// Element-wise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    expect_same(a, b, "add");
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
    return make_op(a->shape, std::move(out), {a, b}, [](Node& n) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *n.parents[k];
            if (!p.requires_grad) continue;
            auto& g = p.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    expect_same(a, b, "sub");
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
    return make_op(a->shape, std::move(out), {a, b}, [](Node& n) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *n.parents[k];
            if (!p.requires_grad) continue;
            auto& g = p.ensure_grad();
            const double s = k == 0 ? 1.0 : -1.0;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    expect_same(a, b, "mul");
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
    return make_op(a->shape, std::move(out), {a, b}, [](Node& n) {
        auto& A = *n.parents[0];
        auto& B = *n.parents[1];
        if (A.requires_grad) {
            auto& g = A.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * B.value[i];
        }
        if (B.requires_grad) {
            auto& g = B.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * A.value[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * s;
    return make_op(a->shape, std::move(out), {a}, [s](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
    });
}

inline Var add_scalar(const Var& a, double s) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + s;
    return make_op(a->shape, std::move(out), {a}, [](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

inline Var relu(const Var& a) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
    return make_op(a->shape, std::move(out), {a}, [](Node& n) {
        auto& p = *n.parents[0];
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p.value[i] > 0.0) g[i] += n.grad[i];
    });
}

/// exp(clamp(a, lo, hi)); the gradient is zero where the clamp is active.
inline Var exp_clamped(const Var& a, double lo, double hi) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(std::clamp(a->value[i], lo, hi));
    return make_op(a->shape, std::move(out), {a}, [lo, hi](Node& n) {
        auto& p = *n.parents[0];
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p.value[i] > lo && p.value[i] < hi) g[i] += n.grad[i] * n.value[i];
    });
}

/// Identity forward; backward multiplies the incoming gradient by -coeff.
inline Var gradient_reverse(const Var& a, double coeff = 1.0) {
    return make_op(a->shape, a->value, {a}, [coeff](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= coeff * n.grad[i];
    });
}

inline Var reshape(const Var& a, Shape shape) {
    if (numel(shape) != a->size()) throw ShapeError("reshape: " + shape_str(a->shape) + " -> " + shape_str(shape));
    return make_op(std::move(shape), a->value, {a}, [](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(const Var& a) {
    const double s = std::accumulate(a->value.begin(), a->value.end(), 0.0);
    return make_op({1}, {s}, {a}, [](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (double& x : g) x += n.grad[0];
    });
}

inline Var mean(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a->size());
    return scale(sum(a), inv);
}

/// Sum of a list of same-shaped vars.
inline Var add_n(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("add_n: empty input");
    Var acc = xs.front();
    for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
}

// ---------------------------------------------------------------------------
// Matrices ([rows, cols])
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    expect_rank(a, 2, "matmul");
    expect_rank(b, 2, "matmul");
    const int m = a->dim(0), k = a->dim(1), n = b->dim(1);
    if (b->dim(0) != k) throw ShapeError("matmul: " + shape_str(a->shape) + " x " + shape_str(b->shape));
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    mat(out, m, n).noalias() = cmat(a->value, m, k) * cmat(b->value, k, n);
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](Node& node) {
        auto& A = *node.parents[0];
        auto& B = *node.parents[1];
        const auto G = cmat(node.grad, m, n);
        if (A.requires_grad) mat(A.ensure_grad(), m, k).noalias() += G * cmat(B.value, k, n).transpose();
        if (B.requires_grad) mat(B.ensure_grad(), k, n).noalias() += cmat(A.value, m, k).transpose() * G;
    });
}

/// a · bᵀ for a [m,k], b [n,k].
inline Var matmul_nt(const Var& a, const Var& b) {
    expect_rank(a, 2, "matmul_nt");
    expect_rank(b, 2, "matmul_nt");
    const int m = a->dim(0), k = a->dim(1), n = b->dim(0);
    if (b->dim(1) != k) throw ShapeError("matmul_nt: " + shape_str(a->shape) + " x " + shape_str(b->shape) + "^T");
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    mat(out, m, n).noalias() = cmat(a->value, m, k) * cmat(b->value, n, k).transpose();
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](Node& node) {
        auto& A = *node.parents[0];
        auto& B = *node.parents[1];
        const auto G = cmat(node.grad, m, n);
        if (A.requires_grad) mat(A.ensure_grad(), m, k).noalias() += G * cmat(B.value, n, k);
        if (B.requires_grad) mat(B.ensure_grad(), n, k).noalias() += G.transpose() * cmat(A.value, m, k);
    });
}

/// x [T,D] + bias [D] broadcast over rows.
inline Var add_row(const Var& x, const Var& bias) {
    expect_rank(x, 2, "add_row");
    const int rows = x->dim(0), cols = x->dim(1);
    if (bias->size() != static_cast<std::size_t>(cols)) throw ShapeError("add_row: bias length mismatch");
    std::vector<double> out = x->value;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] += bias->value[c];
    return make_op(x->shape, std::move(out), {x, bias}, [rows, cols](Node& n) {
        auto& X = *n.parents[0];
        auto& B = *n.parents[1];
        if (X.requires_grad) {
            auto& g = X.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (B.requires_grad) {
            auto& g = B.ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) g[c] += n.grad[static_cast<std::size_t>(r) * cols + c];
        }
    });
}

/// x [T,D] ⊙ v [D] broadcast over rows.
inline Var mul_row(const Var& x, const Var& v) {
    expect_rank(x, 2, "mul_row");
    const int rows = x->dim(0), cols = x->dim(1);
    if (v->size() != static_cast<std::size_t>(cols)) throw ShapeError("mul_row: length mismatch");
    std::vector<double> out = x->value;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] *= v->value[c];
    return make_op(x->shape, std::move(out), {x, v}, [rows, cols](Node& n) {
        auto& X = *n.parents[0];
        auto& V = *n.parents[1];
        if (X.requires_grad) {
            auto& g = X.ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) {
                    const auto i = static_cast<std::size_t>(r) * cols + c;
                    g[i] += n.grad[i] * V.value[c];
                }
        }
        if (V.requires_grad) {
            auto& g = V.ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) {
                    const auto i = static_cast<std::size_t>(r) * cols + c;
                    g[c] += n.grad[i] * X.value[i];
                }
        }
    });
}

inline Var softmax_rows(const Var& x) {
    expect_rank(x, 2, "softmax_rows");
    const int rows = x->dim(0), cols = x->dim(1);
    std::vector<double> out(x->size());
    for (int r = 0; r < rows; ++r) {
        const double* in = &x->value[static_cast<std::size_t>(r) * cols];
        double* o = &out[static_cast<std::size_t>(r) * cols];
        const double peak = *std::max_element(in, in + cols);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - peak));
        for (int c = 0; c < cols; ++c) o[c] /= z;
    }
    return make_op(x->shape, std::move(out), {x}, [rows, cols](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const auto off = static_cast<std::size_t>(r) * cols;
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) dot += n.grad[off + c] * n.value[off + c];
            for (int c = 0; c < cols; ++c) g[off + c] += n.value[off + c] * (n.grad[off + c] - dot);
        }
    });
}

/// Row-wise layer normalization with affine gain and bias.
inline Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    expect_rank(x, 2, "layer_norm_rows");
    const int rows = x->dim(0), cols = x->dim(1);
    if (gain->size() != static_cast<std::size_t>(cols) || bias->size() != static_cast<std::size_t>(cols))
        throw ShapeError("layer_norm_rows: affine length mismatch");
    std::vector<double> out(x->size());
    auto normed = std::make_shared<std::vector<double>>(x->size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (int r = 0; r < rows; ++r) {
        const auto off = static_cast<std::size_t>(r) * cols;
        double mu = 0.0;
        for (int c = 0; c < cols; ++c) mu += x->value[off + c];
        mu /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) var += (x->value[off + c] - mu) * (x->value[off + c] - mu);
        var /= cols;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (int c = 0; c < cols; ++c) {
            const double xh = (x->value[off + c] - mu) * is;
            (*normed)[off + c] = xh;
            out[off + c] = xh * gain->value[c] + bias->value[c];
        }
    }
    return make_op(x->shape, std::move(out), {x, gain, bias}, [rows, cols, normed, inv_std](Node& n) {
        auto& X = *n.parents[0];
        auto& G = *n.parents[1];
        auto& B = *n.parents[2];
        const auto& xh = *normed;
        if (G.requires_grad || B.requires_grad) {
            auto& gg = G.ensure_grad();
            auto& gb = B.ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) {
                    const auto i = static_cast<std::size_t>(r) * cols + c;
                    gg[c] += n.grad[i] * xh[i];
                    gb[c] += n.grad[i];
                }
        }
        if (X.requires_grad) {
            auto& gx = X.ensure_grad();
            std::vector<double> dxh(cols);
            for (int r = 0; r < rows; ++r) {
                const auto off = static_cast<std::size_t>(r) * cols;
                double s1 = 0.0, s2 = 0.0;
                for (int c = 0; c < cols; ++c) {
                    dxh[c] = n.grad[off + c] * G.value[c];
                    s1 += dxh[c];
                    s2 += dxh[c] * xh[off + c];
                }
                const double k = (*inv_std)[r] / cols;
                for (int c = 0; c < cols; ++c) gx[off + c] += k * (cols * dxh[c] - s1 - xh[off + c] * s2);
            }
        }
    });
}

inline Var slice_cols(const Var& x, int start, int len) {
    expect_rank(x, 2, "slice_cols");
    const int rows = x->dim(0), cols = x->dim(1);
    if (start < 0 || len <= 0 || start + len > cols) throw ShapeError("slice_cols: range out of bounds");
    std::vector<double> out(static_cast<std::size_t>(rows) * len);
    for (int r = 0; r < rows; ++r)
        std::copy_n(&x->value[static_cast<std::size_t>(r) * cols + start], len, &out[static_cast<std::size_t>(r) * len]);
    return make_op({rows, len}, std::move(out), {x}, [rows, cols, start, len](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < len; ++c)
                g[static_cast<std::size_t>(r) * cols + start + c] += n.grad[static_cast<std::size_t>(r) * len + c];
    });
}

inline Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols: empty input");
    const int rows = xs[0]->dim(0);
    int cols = 0;
    for (const auto& x : xs) {
        expect_rank(x, 2, "concat_cols");
        if (x->dim(0) != rows) throw ShapeError("concat_cols: row count mismatch");
        cols += x->dim(1);
    }
    std::vector<double> out(static_cast<std::size_t>(rows) * cols);
    int off = 0;
    for (const auto& x : xs) {
        const int w = x->dim(1);
        for (int r = 0; r < rows; ++r)
            std::copy_n(&x->value[static_cast<std::size_t>(r) * w], w, &out[static_cast<std::size_t>(r) * cols + off]);
        off += w;
    }
    return make_op({rows, cols}, std::move(out), xs, [rows, cols](Node& n) {
        int off = 0;
        for (auto& pp : n.parents) {
            auto& p = *pp;
            const int w = p.dim(1);
            if (p.requires_grad) {
                auto& g = p.ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < w; ++c)
                        g[static_cast<std::size_t>(r) * w + c] += n.grad[static_cast<std::size_t>(r) * cols + off + c];
            }
            off += w;
        }
    });
}

/// Stacks along the leading axis; all trailing dimensions must agree.
inline Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_rows: empty input");
    Shape shape = xs[0]->shape;
    int lead = 0;
    for (const auto& x : xs) {
        if (x->shape.size() != shape.size() || !std::equal(x->shape.begin() + 1, x->shape.end(), shape.begin() + 1))
            throw ShapeError("concat_rows: trailing shape mismatch");
        lead += x->dim(0);
    }
    shape[0] = lead;
    std::vector<double> out;
    out.reserve(numel(shape));
    for (const auto& x : xs) out.insert(out.end(), x->value.begin(), x->value.end());
    return make_op(std::move(shape), std::move(out), xs, [](Node& n) {
        std::size_t off = 0;
        for (auto& pp : n.parents) {
            auto& p = *pp;
            if (p.requires_grad) {
                auto& g = p.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[off + i];
            }
            off += p.size();
        }
    });
}

inline Var select_row(const Var& x, int row) {
    expect_rank(x, 2, "select_row");
    const int cols = x->dim(1);
    if (row < 0 || row >= x->dim(0)) throw ShapeError("select_row: index out of range");
    std::vector<double> out(x->value.begin() + static_cast<std::ptrdiff_t>(row) * cols,
                            x->value.begin() + static_cast<std::ptrdiff_t>(row + 1) * cols);
    return make_op({1, cols}, std::move(out), {x}, [row, cols](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (int c = 0; c < cols; ++c) g[static_cast<std::size_t>(row) * cols + c] += n.grad[c];
    });
}

// ---------------------------------------------------------------------------
// Feature maps ([C,H,W])
// ---------------------------------------------------------------------------

/// [C,H,W] -> [H·W, C] tokens in raster order.
inline Var chw_to_tokens(const Var& x) {
    expect_rank(x, 3, "chw_to_tokens");
    const int C = x->dim(0), HW = x->dim(1) * x->dim(2);
    std::vector<double> out(x->size());
    mat(out, HW, C) = cmat(x->value, C, HW).transpose();
    return make_op({HW, C}, std::move(out), {x}, [C, HW](Node& n) {
        mat(n.parents[0]->ensure_grad(), C, HW) += cmat(n.grad, HW, C).transpose();
    });
}

inline Var tokens_to_chw(const Var& t, int H, int W) {
    expect_rank(t, 2, "tokens_to_chw");
    const int HW = t->dim(0), C = t->dim(1);
    if (HW != H * W) throw ShapeError("tokens_to_chw: token count does not match H*W");
    std::vector<double> out(t->size());
    mat(out, C, HW) = cmat(t->value, HW, C).transpose();
    return make_op({C, H, W}, std::move(out), {t}, [C, HW](Node& n) {
        mat(n.parents[0]->ensure_grad(), HW, C) += cmat(n.grad, C, HW).transpose();
    });
}

inline Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: empty input");
    for (const auto& x : xs) {
        expect_rank(x, 3, "concat_channels");
        if (x->dim(1) != xs[0]->dim(1) || x->dim(2) != xs[0]->dim(2))
            throw ShapeError("concat_channels: spatial size mismatch " + shape_str(x->shape) + " vs " +
                             shape_str(xs[0]->shape));
    }
    return concat_rows(xs);
}

/// 2-D convolution (cross-correlation form) of x [C,H,W] with weight
/// [O,C,k,k] and bias [O], via im2col.
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
    expect_rank(x, 3, "conv2d");
    expect_rank(weight, 4, "conv2d");
    const int C = x->dim(0), H = x->dim(1), W = x->dim(2);
    const int O = weight->dim(0), k = weight->dim(2);
    if (weight->dim(1) != C || weight->dim(3) != k)
        throw ShapeError("conv2d: weight " + shape_str(weight->shape) + " incompatible with input " + shape_str(x->shape));
    if (bias->size() != static_cast<std::size_t>(O)) throw ShapeError("conv2d: bias length mismatch");
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: input " + shape_str(x->shape) + " too small for kernel");
    const int K = C * k * k;
    const int P = Ho * Wo;
    auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(K) * P, 0.0);
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const std::size_t row = (static_cast<std::size_t>(c) * k + ky) * k + kx;
                double* dst = &(*cols)[row * P];
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) continue;
                        dst[oy * Wo + ox] = x->value[(static_cast<std::size_t>(c) * H + iy) * W + ix];
                    }
                }
            }
    std::vector<double> out(static_cast<std::size_t>(O) * P);
    auto Y = mat(out, O, P);
    Y.noalias() = cmat(weight->value, O, K) * cmat(*cols, K, P);
    for (int o = 0; o < O; ++o) Y.row(o).array() += bias->value[o];
    return make_op({O, Ho, Wo}, std::move(out), {x, weight, bias},
                   [=](Node& n) {
                       auto& X = *n.parents[0];
                       auto& Wt = *n.parents[1];
                       auto& B = *n.parents[2];
                       const auto G = cmat(n.grad, O, P);
                       if (Wt.requires_grad) mat(Wt.ensure_grad(), O, K).noalias() += G * cmat(*cols, K, P).transpose();
                       if (B.requires_grad) {
                           auto& gb = B.ensure_grad();
                           for (int o = 0; o < O; ++o) gb[o] += G.row(o).sum();
                       }
                       if (X.requires_grad) {
                           RowMat dcols = cmat(Wt.value, O, K).transpose() * G;
                           auto& gx = X.ensure_grad();
                           for (int c = 0; c < C; ++c)
                               for (int ky = 0; ky < k; ++ky)
                                   for (int kx = 0; kx < k; ++kx) {
                                       const int row = (c * k + ky) * k + kx;
                                       for (int oy = 0; oy < Ho; ++oy) {
                                           const int iy = oy * stride - pad + ky;
                                           if (iy < 0 || iy >= H) continue;
                                           for (int ox = 0; ox < Wo; ++ox) {
                                               const int ix = ox * stride - pad + kx;
                                               if (ix < 0 || ix >= W) continue;
                                               gx[(static_cast<std::size_t>(c) * H + iy) * W + ix] += dcols(row, oy * Wo + ox);
                                           }
                                       }
                                   }
                       }
                   });
}

/// Depth-wise cross-correlation: each template channel slides over the
/// matching search channel. Output [C, Hx-Hz+1, Wx-Wz+1].
inline Var depthwise_xcorr(const Var& tmpl, const Var& search) {
    expect_rank(tmpl, 3, "depthwise_xcorr");
    expect_rank(search, 3, "depthwise_xcorr");
    const int C = tmpl->dim(0), hz = tmpl->dim(1), wz = tmpl->dim(2);
    const int hx = search->dim(1), wx = search->dim(2);
    if (search->dim(0) != C) throw ShapeError("depthwise_xcorr: channel mismatch");
    if (hz > hx || wz > wx)
        throw ShapeError("depthwise_xcorr: template " + shape_str(tmpl->shape) + " larger than search " +
                         shape_str(search->shape));
    const int ho = hx - hz + 1, wo = wx - wz + 1;
    std::vector<double> out(static_cast<std::size_t>(C) * ho * wo, 0.0);
    for (int c = 0; c < C; ++c) {
        const double* z = &tmpl->value[static_cast<std::size_t>(c) * hz * wz];
        const double* s = &search->value[static_cast<std::size_t>(c) * hx * wx];
        double* o = &out[static_cast<std::size_t>(c) * ho * wo];
        for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j) {
                double acc = 0.0;
                for (int u = 0; u < hz; ++u)
                    for (int v = 0; v < wz; ++v) acc += z[u * wz + v] * s[(i + u) * wx + (j + v)];
                o[i * wo + j] = acc;
            }
    }
    return make_op({C, ho, wo}, std::move(out), {tmpl, search}, [=](Node& n) {
        auto& Z = *n.parents[0];
        auto& S = *n.parents[1];
        std::vector<double>* gz = Z.requires_grad ? &Z.ensure_grad() : nullptr;
        std::vector<double>* gs = S.requires_grad ? &S.ensure_grad() : nullptr;
        for (int c = 0; c < C; ++c) {
            const std::size_t zo = static_cast<std::size_t>(c) * hz * wz;
            const std::size_t so = static_cast<std::size_t>(c) * hx * wx;
            const double* g = &n.grad[static_cast<std::size_t>(c) * ho * wo];
            for (int i = 0; i < ho; ++i)
                for (int j = 0; j < wo; ++j) {
                    const double gij = g[i * wo + j];
                    if (gij == 0.0) continue;
                    for (int u = 0; u < hz; ++u)
                        for (int v = 0; v < wz; ++v) {
                            const std::size_t si = so + static_cast<std::size_t>(i + u) * wx + (j + v);
                            const std::size_t zi = zo + static_cast<std::size_t>(u) * wz + v;
                            if (gz) (*gz)[zi] += gij * S.value[si];
                            if (gs) (*gs)[si] += gij * Z.value[zi];
                        }
                }
        }
    });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy on logits against targets in [0,1].
inline Var bce_with_logits_mean(const Var& logits, std::span<const double> targets) {
    if (targets.size() != logits->size()) throw ShapeError("bce_with_logits_mean: target count mismatch");
    const double inv = 1.0 / static_cast<double>(logits->size());
    double total = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double z = logits->value[i];
        total += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    }
    std::vector<double> t(targets.begin(), targets.end());
    return make_op({1}, {total * inv}, {logits}, [t = std::move(t), inv](Node& n) {
        auto& p = *n.parents[0];
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-p.value[i]));
            g[i] += n.grad[0] * inv * (sig - t[i]);
        }
    });
}

/// mean((x - label)²) over all elements.
inline Var squared_error_mean(const Var& x, double label) {
    const double inv = 1.0 / static_cast<double>(x->size());
    double total = 0.0;
    for (double v : x->value) total += (v - label) * (v - label);
    return make_op({1}, {total * inv}, {x}, [label, inv](Node& n) {
        auto& p = *n.parents[0];
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * inv * 2.0 * (p.value[i] - label);
    });
}

/// Target side distances (left, top, right, bottom) for one map location.
struct SideOffsets {
    int index;  // flat spatial index into the [4,H,W] map
    double l, t, r, b;
};

/// Mean of 1 - IoU between predicted side distances reg [4,H,W] and target
/// side distances at the listed locations. Both boxes contain the location,
/// so IoU follows from the side distances alone.
inline Var iou_loss_mean(const Var& reg, std::vector<SideOffsets> targets) {
    expect_rank(reg, 3, "iou_loss_mean");
    if (reg->dim(0) != 4) throw ShapeError("iou_loss_mean: regression map needs 4 channels");
    if (targets.empty()) return constant({1}, {0.0});
    const std::size_t plane = static_cast<std::size_t>(reg->dim(1)) * reg->dim(2);
    const double inv = 1.0 / static_cast<double>(targets.size());
    double total = 0.0;
    for (const auto& tg : targets) {
        const double l = reg->value[tg.index], t = reg->value[plane + tg.index];
        const double r = reg->value[2 * plane + tg.index], b = reg->value[3 * plane + tg.index];
        const double ap = (l + r) * (t + b);
        const double ag = (tg.l + tg.r) * (tg.t + tg.b);
        const double inter = (std::min(l, tg.l) + std::min(r, tg.r)) * (std::min(t, tg.t) + std::min(b, tg.b));
        total += 1.0 - inter / (ap + ag - inter);
    }
    return make_op({1}, {total * inv}, {reg}, [targets = std::move(targets), plane, inv](Node& n) {
        auto& p = *n.parents[0];
        auto& g = p.ensure_grad();
        for (const auto& tg : targets) {
            const std::size_t il = tg.index, it = plane + tg.index, ir = 2 * plane + tg.index, ib = 3 * plane + tg.index;
            const double l = p.value[il], t = p.value[it], r = p.value[ir], b = p.value[ib];
            const double wi = std::min(l, tg.l) + std::min(r, tg.r);
            const double hi = std::min(t, tg.t) + std::min(b, tg.b);
            const double inter = wi * hi;
            const double ap = (l + r) * (t + b);
            const double ag = (tg.l + tg.r) * (tg.t + tg.b);
            const double uni = ap + ag - inter;
            // d iou / d side = (dI·(U + I) - I·dAp) / U².
            auto d = [&](double dI, double dAp) { return (dI * (uni + inter) - inter * dAp) / (uni * uni); };
            const double s = -n.grad[0] * inv;
            g[il] += s * d(l < tg.l ? hi : 0.0, t + b);
            g[ir] += s * d(r < tg.r ? hi : 0.0, t + b);
            g[it] += s * d(t < tg.t ? wi : 0.0, l + r);
            g[ib] += s * d(b < tg.b ? wi : 0.0, l + r);
        }
    });
}

}  // namespace udat::ag
