#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "peftkit/error.hpp"
#include "peftkit/rng.hpp"

namespace peftkit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) {
        n *= d;
    }
    return n;
}

inline std::string shape_string(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) {
            out += "x";
        }
    }
    out += "]";
    return out;
}

// Reverse-mode autodiff over dense row-major tensors.
//
// The scalar type is a template parameter: float is the working precision,
// double exists for gradient-check tests. Graphs are built eagerly by the op
// functions below; backward() walks the graph in reverse topological order.
// Gradients accumulate additively; callers zero them explicitly.
template <class S>
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<S> value;
        std::vector<S> grad; // allocated on first accumulation
        bool requires_grad = false;
        std::vector<Tensor> parents;
        std::function<void(Node&)> backprop; // pulls grad of this node into parents

        std::size_t numel() const { return value.size(); }
        std::vector<S>& ensure_grad() {
            if (grad.empty()) {
                grad.assign(value.size(), S(0));
            }
            return grad;
        }
    };

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return leaf(std::move(shape), {}, requires_grad);
    }

    static Tensor full(Shape shape, S v, bool requires_grad = false) {
        std::vector<S> data(shape_numel(shape), v);
        return leaf(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_string(shape));
        }
        return leaf(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor scalar(S v, bool requires_grad = false) {
        return leaf(Shape{}, std::vector<S>{v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double std_dev, bool requires_grad = false) {
        std::vector<S> data(shape_numel(shape));
        for (S& x : data) {
            x = static_cast<S>(rng.gauss() * std_dev);
        }
        return leaf(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor interior(Shape shape, std::vector<S> value, std::vector<Tensor> parents,
                           std::function<void(Node&)> backprop) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(value);
        bool track = false;
        for (const Tensor& p : parents) {
            track = track || p.requires_grad();
        }
        t.node_->requires_grad = track;
        if (track) {
            t.node_->parents = std::move(parents);
            t.node_->backprop = std::move(backprop);
        }
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<S>& values() const { return node_->value; }
    std::vector<S>& values_mut() { return node_->value; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<S>& grad() const {
        if (node_->grad.empty()) {
            throw UsageError("tensor has no gradient; run backward() first");
        }
        return node_->grad;
    }
    std::vector<S>& grad_mut() { return node_->ensure_grad(); }

    void zero_grad() {
        if (!node_->grad.empty()) {
            std::fill(node_->grad.begin(), node_->grad.end(), S(0));
        }
    }

    S item() const {
        if (numel() != 1) {
            throw UsageError("item() on tensor of shape " + shape_string(shape()));
        }
        return node_->value[0];
    }

    Node* node() const { return node_.get(); }

private:
    static Tensor leaf(Shape shape, std::vector<S> data, bool requires_grad) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        if (data.empty()) {
            data.assign(shape_numel(shape), S(0));
        }
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    std::shared_ptr<Node> node_;
};

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad tensor
// reachable from `loss`. Deterministic for a fixed graph: the traversal order
// depends only on graph structure.
template <class S>
void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1) {
        throw UsageError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
        return; // constant loss: all gradients are zero, nothing to do
    }

    using Node = typename Tensor<S>::Node;

    // iterative post-order DFS over parents
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next].node();
            ++next;
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad()[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backprop && !node->grad.empty()) {
            node->backprop(*node);
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
    }
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] + bv[i];
    }
    return Tensor<S>::interior(
        a.shape(), std::move(out), {a, b}, [a, b](typename Tensor<S>::Node& n) {
            if (a.requires_grad()) {
                auto& ga = a.node()->ensure_grad();
                for (std::size_t i = 0; i < ga.size(); ++i) {
                    ga[i] += n.grad[i];
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.node()->ensure_grad();
                for (std::size_t i = 0; i < gb.size(); ++i) {
                    gb[i] += n.grad[i];
                }
            }
        });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
    }
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] * bv[i];
    }
    return Tensor<S>::interior(
        a.shape(), std::move(out), {a, b}, [a, b](typename Tensor<S>::Node& n) {
            const auto& av = a.values();
            const auto& bv = b.values();
            if (a.requires_grad()) {
                auto& ga = a.node()->ensure_grad();
                for (std::size_t i = 0; i < ga.size(); ++i) {
                    ga[i] += n.grad[i] * bv[i];
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.node()->ensure_grad();
                for (std::size_t i = 0; i < gb.size(); ++i) {
                    gb[i] += n.grad[i] * av[i];
                }
            }
        });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] * c;
    }
    return Tensor<S>::interior(a.shape(), std::move(out), {a},
                               [a, c](typename Tensor<S>::Node& n) {
                                   auto& ga = a.node()->ensure_grad();
                                   for (std::size_t i = 0; i < ga.size(); ++i) {
                                       ga[i] += n.grad[i] * c;
                                   }
                               });
}

template <class S>
Tensor<S> silu(const Tensor<S>& a) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        S sig = S(1) / (S(1) + std::exp(-av[i]));
        out[i] = av[i] * sig;
    }
    return Tensor<S>::interior(
        a.shape(), std::move(out), {a}, [a](typename Tensor<S>::Node& n) {
            const auto& av = a.values();
            auto& ga = a.node()->ensure_grad();
            for (std::size_t i = 0; i < ga.size(); ++i) {
                S sig = S(1) / (S(1) + std::exp(-av[i]));
                ga[i] += n.grad[i] * sig * (S(1) + av[i] * (S(1) - sig));
            }
        });
}

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
    S total = 0;
    for (S v : a.values()) {
        total += v;
    }
    return Tensor<S>::interior(Shape{}, std::vector<S>{total}, {a},
                               [a](typename Tensor<S>::Node& n) {
                                   auto& ga = a.node()->ensure_grad();
                                   for (std::size_t i = 0; i < ga.size(); ++i) {
                                       ga[i] += n.grad[0];
                                   }
                               });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul: needs 2-d operands, got " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
    }
    std::vector<S> out(m * n, S(0));
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const S aip = av[i * k + p];
            if (aip == S(0)) {
                continue;
            }
            const S* brow = &bv[p * n];
            S* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += aip * brow[j];
            }
        }
    }
    return Tensor<S>::interior(
        Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](typename Tensor<S>::Node& node) {
            const auto& av = a.values();
            const auto& bv = b.values();
            const auto& g = node.grad;
            if (a.requires_grad()) {
                // dA = G B^T
                auto& ga = a.node()->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        S acc = 0;
                        const S* grow = &g[i * n];
                        const S* brow = &bv[p * n];
                        for (std::size_t j = 0; j < n; ++j) {
                            acc += grow[j] * brow[j];
                        }
                        ga[i * k + p] += acc;
                    }
                }
            }
            if (b.requires_grad()) {
                // dB = A^T G
                auto& gb = b.node()->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    const S* grow = &g[i * n];
                    for (std::size_t p = 0; p < k; ++p) {
                        const S aip = av[i * k + p];
                        if (aip == S(0)) {
                            continue;
                        }
                        S* gbrow = &gb[p * n];
                        for (std::size_t j = 0; j < n; ++j) {
                            gbrow[j] += aip * grow[j];
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void softmax_slice(const S* in, S* out, std::size_t n, std::size_t stride) {
    S mx = in[0];
    for (std::size_t i = 1; i < n; ++i) {
        mx = std::max(mx, in[i * stride]);
    }
    S total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        S e = std::exp(in[i * stride] - mx);
        out[i * stride] = e;
        total += e;
    }
    for (std::size_t i = 0; i < n; ++i) {
        out[i * stride] /= total;
    }
}

// dL/ds_i = y_i * (g_i - sum_j g_j y_j)
template <class S>
void softmax_backward_slice(const S* y, const S* g, S* ds, std::size_t n, std::size_t stride) {
    S dot = 0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += g[i * stride] * y[i * stride];
    }
    for (std::size_t i = 0; i < n; ++i) {
        ds[i * stride] += y[i * stride] * (g[i * stride] - dot);
    }
}

} // namespace detail

template <class S>
Tensor<S> softmax(const Tensor<S>& a, int axis = -1) {
    if (a.rank() == 0) {
        throw ShapeError("softmax: scalar input has no axis");
    }
    const std::size_t r = a.rank();
    const int norm_axis = axis < 0 ? axis + static_cast<int>(r) : axis;
    if (norm_axis < 0 || norm_axis >= static_cast<int>(r)) {
        throw ShapeError("softmax: axis out of range for shape " + shape_string(a.shape()));
    }
    const std::size_t ax = static_cast<std::size_t>(norm_axis);
    const std::size_t n = a.dim(ax);
    if (n == 0) {
        throw ShapeError("softmax: empty axis in shape " + shape_string(a.shape()));
    }
    // stride of the axis and number of independent slices
    std::size_t stride = 1;
    for (std::size_t i = ax + 1; i < r; ++i) {
        stride *= a.dim(i);
    }
    const std::size_t block = stride * n;
    const std::size_t outer = a.numel() / block;

    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t s = 0; s < stride; ++s) {
            detail::softmax_slice(&av[o * block + s], &out[o * block + s], n, stride);
        }
    }
    return Tensor<S>::interior(
        a.shape(), std::move(out), {a},
        [a, n, stride, block, outer](typename Tensor<S>::Node& node) {
            auto& ga = a.node()->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t s = 0; s < stride; ++s) {
                    detail::softmax_backward_slice(&node.value[o * block + s],
                                                   &node.grad[o * block + s],
                                                   &ga[o * block + s], n, stride);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// rmsnorm
// ---------------------------------------------------------------------------

// out[i, :] = x[i, :] / sqrt(mean(x[i, :]^2) + eps) * weight
template <class S>
Tensor<S> rmsnorm(const Tensor<S>& x, const Tensor<S>& weight, S eps) {
    if (eps <= S(0)) {
        throw UsageError("rmsnorm: eps must be positive");
    }
    if (x.rank() == 0 || weight.rank() != 1 || x.dim(x.rank() - 1) != weight.dim(0)) {
        throw ShapeError("rmsnorm: input " + shape_string(x.shape()) +
                         " incompatible with weight " + shape_string(weight.shape()));
    }
    const std::size_t c = weight.dim(0);
    const std::size_t rows = x.numel() / c;
    std::vector<S> out(x.numel());
    std::vector<S> inv_rms(rows);
    const auto& xv = x.values();
    const auto& wv = weight.values();
    for (std::size_t i = 0; i < rows; ++i) {
        S ms = 0;
        const S* row = &xv[i * c];
        for (std::size_t j = 0; j < c; ++j) {
            ms += row[j] * row[j];
        }
        ms = ms / static_cast<S>(c) + eps;
        const S inv = S(1) / std::sqrt(ms);
        inv_rms[i] = inv;
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = row[j] * inv * wv[j];
        }
    }
    return Tensor<S>::interior(
        x.shape(), std::move(out), {x, weight},
        [x, weight, c, rows, inv_rms = std::move(inv_rms)](typename Tensor<S>::Node& node) {
            const auto& xv = x.values();
            const auto& wv = weight.values();
            const auto& g = node.grad;
            if (x.requires_grad()) {
                auto& gx = x.node()->ensure_grad();
                for (std::size_t i = 0; i < rows; ++i) {
                    const S inv = inv_rms[i];
                    const S* row = &xv[i * c];
                    const S* grow = &g[i * c];
                    S dot = 0; // sum_j g_j w_j x_j
                    for (std::size_t j = 0; j < c; ++j) {
                        dot += grow[j] * wv[j] * row[j];
                    }
                    const S k = dot * inv * inv * inv / static_cast<S>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        gx[i * c + j] += grow[j] * wv[j] * inv - k * row[j];
                    }
                }
            }
            if (weight.requires_grad()) {
                auto& gw = weight.node()->ensure_grad();
                for (std::size_t i = 0; i < rows; ++i) {
                    const S inv = inv_rms[i];
                    for (std::size_t j = 0; j < c; ++j) {
                        gw[j] += node.grad[i * c + j] * xv[i * c + j] * inv;
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// embedding
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> embedding(const Tensor<S>& table, std::span<const int> ids) {
    if (table.rank() != 2) {
        throw ShapeError("embedding: table must be 2-d, got " + shape_string(table.shape()));
    }
    const std::size_t v = table.dim(0), c = table.dim(1);
    std::vector<S> out(ids.size() * c);
    const auto& tv = table.values();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw ValidationError("embedding: token id " + std::to_string(id) +
                                  " outside vocabulary of size " + std::to_string(v));
        }
        std::copy_n(&tv[static_cast<std::size_t>(id) * c], c, &out[i * c]);
    }
    std::vector<int> ids_copy(ids.begin(), ids.end());
    return Tensor<S>::interior(
        Shape{ids.size(), c}, std::move(out), {table},
        [table, c, ids_copy = std::move(ids_copy)](typename Tensor<S>::Node& node) {
            auto& gt = table.node()->ensure_grad();
            for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                const std::size_t id = static_cast<std::size_t>(ids_copy[i]);
                for (std::size_t j = 0; j < c; ++j) {
                    gt[id * c + j] += node.grad[i * c + j];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

// Mean negative log-likelihood over the positions whose target is not
// ignore_index. With every position ignored the loss is exactly 0 and no
// gradient flows.
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> targets, int ignore_index) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy: logits must be 2-d, got " + shape_string(logits.shape()));
    }
    const std::size_t m = logits.dim(0), v = logits.dim(1);
    if (targets.size() != m) {
        throw UsageError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(m) + " rows");
    }
    const auto& lv = logits.values();
    std::size_t valid = 0;
    S total = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const int t = targets[i];
        if (t == ignore_index) {
            continue;
        }
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw ValidationError("cross_entropy: target " + std::to_string(t) +
                                  " outside vocabulary of size " + std::to_string(v));
        }
        const S* row = &lv[i * v];
        S mx = row[0];
        for (std::size_t j = 1; j < v; ++j) {
            mx = std::max(mx, row[j]);
        }
        S sum_exp = 0;
        for (std::size_t j = 0; j < v; ++j) {
            sum_exp += std::exp(row[j] - mx);
        }
        total += std::log(sum_exp) + mx - row[static_cast<std::size_t>(t)];
        ++valid;
    }
    const S loss = valid == 0 ? S(0) : total / static_cast<S>(valid);
    if (valid == 0) {
        // no differentiable dependence on the logits
        return Tensor<S>::interior(Shape{}, std::vector<S>{S(0)}, {},
                                   [](typename Tensor<S>::Node&) {});
    }
    std::vector<int> tgt(targets.begin(), targets.end());
    return Tensor<S>::interior(
        Shape{}, std::vector<S>{loss}, {logits},
        [logits, m, v, valid, ignore_index, tgt = std::move(tgt)](typename Tensor<S>::Node& node) {
            const S g = node.grad[0] / static_cast<S>(valid);
            const auto& lv = logits.values();
            auto& gl = logits.node()->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                const int t = tgt[i];
                if (t == ignore_index) {
                    continue;
                }
                const S* row = &lv[i * v];
                S mx = row[0];
                for (std::size_t j = 1; j < v; ++j) {
                    mx = std::max(mx, row[j]);
                }
                S sum_exp = 0;
                for (std::size_t j = 0; j < v; ++j) {
                    sum_exp += std::exp(row[j] - mx);
                }
                for (std::size_t j = 0; j < v; ++j) {
                    S p = std::exp(row[j] - mx) / sum_exp;
                    gl[i * v + j] += g * (p - (j == static_cast<std::size_t>(t) ? S(1) : S(0)));
                }
            }
        });
}

// ---------------------------------------------------------------------------
// rotary position encoding
// ---------------------------------------------------------------------------

// Rotates adjacent pairs within each head by position-dependent angles.
// Row i is treated as position pos_offset + i. The backward pass applies the
// inverse rotation (the map is orthogonal).
template <class S>
Tensor<S> rope(const Tensor<S>& x, std::size_t n_heads, double base, std::size_t pos_offset = 0) {
    if (x.rank() != 2) {
        throw ShapeError("rope: input must be 2-d, got " + shape_string(x.shape()));
    }
    const std::size_t m = x.dim(0), c = x.dim(1);
    if (n_heads == 0 || c % n_heads != 0 || (c / n_heads) % 2 != 0) {
        throw ShapeError("rope: feature dim " + std::to_string(c) + " not divisible into " +
                         std::to_string(n_heads) + " even-sized heads");
    }
    const std::size_t hd = c / n_heads;
    std::vector<S> out(x.numel());
    const auto& xv = x.values();

    auto rotate = [m, c, hd, n_heads, base, pos_offset](const std::vector<S>& src,
                                                        std::vector<S>& dst, bool inverse) {
        for (std::size_t i = 0; i < m; ++i) {
            const double pos = static_cast<double>(pos_offset + i);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t off = i * c + h * hd;
                for (std::size_t j = 0; j < hd / 2; ++j) {
                    const double freq = std::pow(base, -2.0 * static_cast<double>(j) /
                                                           static_cast<double>(hd));
                    const double angle = pos * freq;
                    const S cs = static_cast<S>(std::cos(angle));
                    const S sn = static_cast<S>(inverse ? -std::sin(angle) : std::sin(angle));
                    const S x0 = src[off + 2 * j];
                    const S x1 = src[off + 2 * j + 1];
                    dst[off + 2 * j] = x0 * cs - x1 * sn;
                    dst[off + 2 * j + 1] = x0 * sn + x1 * cs;
                }
            }
        }
    };
    rotate(xv, out, false);
    return Tensor<S>::interior(x.shape(), std::move(out), {x},
                               [x, rotate](typename Tensor<S>::Node& node) {
                                   std::vector<S> dx(node.grad.size());
                                   rotate(node.grad, dx, true);
                                   auto& gx = x.node()->ensure_grad();
                                   for (std::size_t i = 0; i < gx.size(); ++i) {
                                       gx[i] += dx[i];
                                   }
                               });
}

// ---------------------------------------------------------------------------
// causal attention (optionally with gated prefix prompts)
// ---------------------------------------------------------------------------

// Forward-only capture of attention weights, for invariant checks.
struct AttentionTrace {
    struct Call {
        std::size_t n_heads = 0;
        std::size_t seq_len = 0;
        std::size_t prefix_len = 0;
        // per head: seq_len x (prefix_len + seq_len), prefix columns first;
        // causally masked entries stay exactly 0.
        std::vector<double> weights;
        std::vector<double> gates; // one per head (empty without prefix)

        double weight(std::size_t head, std::size_t row, std::size_t col) const {
            const std::size_t w = prefix_len + seq_len;
            return weights[(head * seq_len + row) * w + col];
        }
    };
    std::vector<Call> calls;
};

// Causal multi-head attention over pre-projected q/k/v of shape [M x C].
// Scores use 1/sqrt(head_dim). When prefix keys/values are given, the prefix
// segment and the causal segment are softmaxed independently; the prefix
// weights are multiplied by the per-head gate before mixing values, so each
// combined row carries mass 1 + gate.
template <class S>
Tensor<S> causal_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                           std::size_t n_heads, const Tensor<S>& prefix_k = {},
                           const Tensor<S>& prefix_v = {}, const Tensor<S>& gates = {},
                           AttentionTrace* trace = nullptr) {
    if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape()) {
        throw ShapeError("attention: q/k/v must share a 2-d shape, got " +
                         shape_string(q.shape()) + ", " + shape_string(k.shape()) + ", " +
                         shape_string(v.shape()));
    }
    const std::size_t m = q.dim(0), c = q.dim(1);
    if (n_heads == 0 || c % n_heads != 0) {
        throw ShapeError("attention: feature dim " + std::to_string(c) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
    }
    const std::size_t hd = c / n_heads;
    const S inv_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

    const bool prefixed = prefix_k.defined();
    std::size_t kp = 0;
    bool per_head_gate = false;
    if (prefixed) {
        if (!prefix_v.defined() || !gates.defined() || prefix_k.rank() != 2 ||
            prefix_k.dim(1) != c || prefix_v.shape() != prefix_k.shape()) {
            throw ShapeError("attention: prefix k/v must be [K x C] with matching gates");
        }
        kp = prefix_k.dim(0);
        if (gates.numel() == n_heads) {
            per_head_gate = true;
        } else if (gates.numel() != 1) {
            throw ShapeError("attention: gates must hold 1 or n_heads values");
        }
    }

    // softmax weights are kept for the backward pass:
    //   probs: per head, dense m x m lower-triangular rows
    //   pprobs: per head, m x kp
    auto probs = std::make_shared<std::vector<S>>(n_heads * m * m, S(0));
    auto pprobs = std::make_shared<std::vector<S>>(prefixed ? n_heads * m * kp : 0, S(0));

    std::vector<S> out(m * c, S(0));
    const auto& qv = q.values();
    const auto& kv = k.values();
    const auto& vv = v.values();

    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * hd;
        const S gate = prefixed ? gates.values()[per_head_gate ? h : 0] : S(0);
        for (std::size_t i = 0; i < m; ++i) {
            const S* qrow = &qv[i * c + off];
            // causal segment, softmax over keys 0..i
            std::vector<S> s(i + 1);
            for (std::size_t j = 0; j <= i; ++j) {
                const S* krow = &kv[j * c + off];
                S dot = 0;
                for (std::size_t d = 0; d < hd; ++d) {
                    dot += qrow[d] * krow[d];
                }
                s[j] = dot * inv_scale;
            }
            detail::softmax_slice(s.data(), s.data(), i + 1, 1);
            S* prow = &(*probs)[(h * m + i) * m];
            S* orow = &out[i * c + off];
            for (std::size_t j = 0; j <= i; ++j) {
                prow[j] = s[j];
                const S* vrow = &vv[j * c + off];
                for (std::size_t d = 0; d < hd; ++d) {
                    orow[d] += s[j] * vrow[d];
                }
            }
            // prefix segment, softmaxed on its own and scaled by the gate
            if (prefixed && kp > 0) {
                const auto& pkv = prefix_k.values();
                const auto& pvv = prefix_v.values();
                std::vector<S> sp(kp);
                for (std::size_t p = 0; p < kp; ++p) {
                    const S* krow = &pkv[p * c + off];
                    S dot = 0;
                    for (std::size_t d = 0; d < hd; ++d) {
                        dot += qrow[d] * krow[d];
                    }
                    sp[p] = dot * inv_scale;
                }
                detail::softmax_slice(sp.data(), sp.data(), kp, 1);
                S* pprow = &(*pprobs)[(h * m + i) * kp];
                for (std::size_t p = 0; p < kp; ++p) {
                    pprow[p] = sp[p];
                    const S w = gate * sp[p];
                    const S* vrow = &pvv[p * c + off];
                    for (std::size_t d = 0; d < hd; ++d) {
                        orow[d] += w * vrow[d];
                    }
                }
            }
        }
    }

    if (trace != nullptr) {
        typename AttentionTrace::Call call;
        call.n_heads = n_heads;
        call.seq_len = m;
        call.prefix_len = kp;
        call.weights.assign(n_heads * m * (kp + m), 0.0);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const S gate = prefixed ? gates.values()[per_head_gate ? h : 0] : S(0);
            if (prefixed) {
                call.gates.push_back(static_cast<double>(gate));
            }
            for (std::size_t i = 0; i < m; ++i) {
                double* row = &call.weights[(h * m + i) * (kp + m)];
                for (std::size_t p = 0; p < kp; ++p) {
                    row[p] = static_cast<double>(gate * (*pprobs)[(h * m + i) * kp + p]);
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    row[kp + j] = static_cast<double>((*probs)[(h * m + i) * m + j]);
                }
            }
        }
        trace->calls.push_back(std::move(call));
    }

    std::vector<Tensor<S>> parents{q, k, v};
    if (prefixed) {
        parents.push_back(prefix_k);
        parents.push_back(prefix_v);
        parents.push_back(gates);
    }
    return Tensor<S>::interior(
        q.shape(), std::move(out), std::move(parents),
        [q, k, v, prefix_k, prefix_v, gates, n_heads, m, c, hd, kp, prefixed,
         per_head_gate, inv_scale, probs, pprobs](typename Tensor<S>::Node& node) {
            const auto& qv = q.values();
            const auto& kv = k.values();
            const auto& vv = v.values();
            const auto& g = node.grad;

            auto& gq = q.requires_grad() ? q.node()->ensure_grad() : q.node()->grad;
            auto& gk = k.requires_grad() ? k.node()->ensure_grad() : k.node()->grad;
            auto& gv = v.requires_grad() ? v.node()->ensure_grad() : v.node()->grad;

            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t off = h * hd;
                const S gate = prefixed ? gates.values()[per_head_gate ? h : 0] : S(0);
                for (std::size_t i = 0; i < m; ++i) {
                    const S* grow = &g[i * c + off];
                    const S* qrow = &qv[i * c + off];
                    const S* prow = &(*probs)[(h * m + i) * m];

                    // causal segment
                    std::vector<S> da(i + 1);
                    for (std::size_t j = 0; j <= i; ++j) {
                        const S* vrow = &vv[j * c + off];
                        S dot = 0;
                        for (std::size_t d = 0; d < hd; ++d) {
                            dot += grow[d] * vrow[d];
                        }
                        da[j] = dot;
                        if (v.requires_grad()) {
                            S* gvrow = &gv[j * c + off];
                            for (std::size_t d = 0; d < hd; ++d) {
                                gvrow[d] += prow[j] * grow[d];
                            }
                        }
                    }
                    std::vector<S> ds(i + 1, S(0));
                    detail::softmax_backward_slice(prow, da.data(), ds.data(), i + 1, 1);
                    for (std::size_t j = 0; j <= i; ++j) {
                        const S dsj = ds[j] * inv_scale;
                        const S* krow = &kv[j * c + off];
                        if (q.requires_grad()) {
                            S* gqrow = &gq[i * c + off];
                            for (std::size_t d = 0; d < hd; ++d) {
                                gqrow[d] += dsj * krow[d];
                            }
                        }
                        if (k.requires_grad()) {
                            S* gkrow = &gk[j * c + off];
                            for (std::size_t d = 0; d < hd; ++d) {
                                gkrow[d] += dsj * qrow[d];
                            }
                        }
                    }

                    // prefix segment
                    if (prefixed && kp > 0) {
                        const auto& pkv = prefix_k.values();
                        const auto& pvv = prefix_v.values();
                        const S* pprow = &(*pprobs)[(h * m + i) * kp];
                        std::vector<S> db(kp);
                        S dgate_i = 0;
                        for (std::size_t p = 0; p < kp; ++p) {
                            const S* vrow = &pvv[p * c + off];
                            S dot = 0;
                            for (std::size_t d = 0; d < hd; ++d) {
                                dot += grow[d] * vrow[d];
                            }
                            db[p] = gate * dot;
                            dgate_i += pprow[p] * dot;
                            if (prefix_v.requires_grad()) {
                                auto& gpv = prefix_v.node()->ensure_grad();
                                S* gvrow = &gpv[p * c + off];
                                const S w = gate * pprow[p];
                                for (std::size_t d = 0; d < hd; ++d) {
                                    gvrow[d] += w * grow[d];
                                }
                            }
                        }
                        if (gates.requires_grad()) {
                            auto& gg = gates.node()->ensure_grad();
                            gg[per_head_gate ? h : 0] += dgate_i;
                        }
                        std::vector<S> dsp(kp, S(0));
                        detail::softmax_backward_slice(pprow, db.data(), dsp.data(), kp, 1);
                        for (std::size_t p = 0; p < kp; ++p) {
                            const S dspp = dsp[p] * inv_scale;
                            const S* krow = &pkv[p * c + off];
                            if (q.requires_grad()) {
                                S* gqrow = &gq[i * c + off];
                                for (std::size_t d = 0; d < hd; ++d) {
                                    gqrow[d] += dspp * krow[d];
                                }
                            }
                            if (prefix_k.requires_grad()) {
                                auto& gpk = prefix_k.node()->ensure_grad();
                                S* gkrow = &gpk[p * c + off];
                                for (std::size_t d = 0; d < hd; ++d) {
                                    gkrow[d] += dspp * qrow[d];
                                }
                            }
                        }
                    }
                }
            }
        });
}

} // namespace peftkit
