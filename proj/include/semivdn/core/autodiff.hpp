#pragma once

// Reverse-mode automatic differentiation on Tensor<T>. A Var wraps a node in
// an implicit tape; ops build the graph eagerly and record a backward closure.
// Gradients are checked against central finite differences in the test suite,
// so every op here must be exact, not approximate.

#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "semivdn/core/tensor.hpp"

namespace semivdn {
namespace ad {

template <typename T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward; // scatters node.grad into parents

    void ensure_grad() {
        if (!grad_alloc) {
            grad = Tensor<T>(val.shape(), T(0));
            grad_alloc = true;
        }
    }
};

template <typename T>
class Var {
public:
    Var() = default;

    static Var constant(Tensor<T> v) {
        Var out;
        out.n_ = std::make_shared<Node<T>>();
        out.n_->val = std::move(v);
        return out;
    }

    static Var leaf(Tensor<T> v) {
        Var out;
        out.n_ = std::make_shared<Node<T>>();
        out.n_->val = std::move(v);
        out.n_->requires_grad = true;
        return out;
    }

    bool valid() const { return static_cast<bool>(n_); }
    const Tensor<T>& val() const { return n_->val; }
    Tensor<T>& mutable_val() { return n_->val; }
    const Tensor<T>& grad() const { return n_->grad; }
    bool has_grad() const { return n_->grad_alloc; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    std::shared_ptr<Node<T>> node() const { return n_; }

    T scalar() const { return n_->val[0]; }

private:
    std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward) {
    bool needs = false;
    for (const auto& p : parents)
        if (p.requires_grad()) needs = true;
    Var<T> out = Var<T>::constant(std::move(value));
    if (needs) {
        auto n = out.node();
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return out;
}

template <typename T>
Tensor<T>& pgrad(Node<T>& n, std::size_t i) {
    n.parents[i]->ensure_grad();
    return n.parents[i]->grad;
}

template <typename T>
bool pneeds(const Node<T>& n, std::size_t i) {
    return n.parents[i]->requires_grad;
}

} // namespace detail

// Runs reverse accumulation from a scalar (or any) node, seeding with ones.
template <typename T>
void backward(const Var<T>& root) {
    auto r = root.node();
    if (!r || !r->requires_grad) return;

    // Iterative post-order topological sort.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(r.get(), 0);
    visited.insert(r.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    r->ensure_grad();
    r->grad.fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && n->grad_alloc) n->backward(*n);
    }
}

// Clears gradients and detaches the graph below a leaf set is not needed:
// tapes are rebuilt per step, so dropping the root frees everything.

// ---------------------------------------------------------------------------
// Elementwise ops (same shape).

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val(), b.val(), "add");
    Tensor<T> out = a.val();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] += b.val()[i];
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& nd) {
        for (std::size_t k = 0; k < 2; ++k)
            if (detail::pneeds(nd, k)) {
                auto& g = detail::pgrad(nd, k);
                for (std::size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
            }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val(), b.val(), "sub");
    Tensor<T> out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.val()[i];
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& nd) {
        if (detail::pneeds(nd, 0)) {
            auto& g = detail::pgrad(nd, 0);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
        }
        if (detail::pneeds(nd, 1)) {
            auto& g = detail::pgrad(nd, 1);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= nd.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val(), b.val(), "mul");
    Tensor<T> out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& nd) {
        const Tensor<T>& av = nd.parents[0]->val;
        const Tensor<T>& bv = nd.parents[1]->val;
        if (detail::pneeds(nd, 0)) {
            auto& g = detail::pgrad(nd, 0);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i] * bv[i];
        }
        if (detail::pneeds(nd, 1)) {
            auto& g = detail::pgrad(nd, 1);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i] * av[i];
        }
    });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val(), b.val(), "div");
    Tensor<T> out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= b.val()[i];
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& nd) {
        const Tensor<T>& av = nd.parents[0]->val;
        const Tensor<T>& bv = nd.parents[1]->val;
        if (detail::pneeds(nd, 0)) {
            auto& g = detail::pgrad(nd, 0);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i] / bv[i];
        }
        if (detail::pneeds(nd, 1)) {
            auto& g = detail::pgrad(nd, 1);
            for (std::size_t i = 0; i < g.numel(); ++i)
                g[i] -= nd.grad[i] * av[i] / (bv[i] * bv[i]);
        }
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
    Tensor<T> out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += s;
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T s) {
    Tensor<T> out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return detail::make_op<T>(std::move(out), {a}, [s](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i] * s;
    });
}

template <typename T>
Var<T> neg(const Var<T>& a) { return mul_scalar(a, T(-1)); }

namespace detail {
template <typename T, typename FwdFn, typename DerivFn>
Var<T> unary(const Var<T>& a, FwdFn f, DerivFn df) {
    Tensor<T> out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(out[i]);
    return make_op<T>(std::move(out), {a}, [df](Node<T>& nd) {
        const Tensor<T>& x = nd.parents[0]->val;
        const Tensor<T>& y = nd.val;
        auto& g = pgrad(nd, 0);
        for (std::size_t i = 0; i < g.numel(); ++i)
            g[i] += nd.grad[i] * df(x[i], y[i]);
    });
}
} // namespace detail

template <typename T>
Var<T> square(const Var<T>& a) {
    return detail::unary(a, [](T x) { return x * x; },
                         [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> sqrt_(const Var<T>& a) {
    return detail::unary(a, [](T x) { return std::sqrt(x); },
                         [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <typename T>
Var<T> abs_(const Var<T>& a) {
    return detail::unary(a, [](T x) { return std::abs(x); },
                         [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> exp_(const Var<T>& a) {
    return detail::unary(a, [](T x) { return std::exp(x); },
                         [](T, T y) { return y; });
}

template <typename T>
Var<T> log_(const Var<T>& a) {
    return detail::unary(a, [](T x) { return std::log(x); },
                         [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    return detail::unary(a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
                         [](T, T y) { return y * (T(1) - y); });
}

// Exact (erf-based) GELU; smooth everywhere, which keeps finite-difference
// checks clean.
template <typename T>
Var<T> gelu(const Var<T>& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary(
        a,
        [](T x) {
            return static_cast<T>(0.5 * static_cast<double>(x) *
                                  (1.0 + std::erf(static_cast<double>(x) * inv_sqrt2)));
        },
        [](T x, T) {
            const double xd = static_cast<double>(x);
            const double cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
            return static_cast<T>(cdf + xd * pdf);
        });
}

template <typename T>
Var<T> detach(const Var<T>& a) { return Var<T>::constant(a.val()); }

// ---------------------------------------------------------------------------
// Matrix ops (rank 2).

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const int m = a.val().rows(), k = a.val().cols();
    const int k2 = b.val().rows(), n = b.val().cols();
    if (k != k2) throw std::invalid_argument("matmul: inner dimension mismatch");
    Tensor<T> out({m, n});
    out.mat().noalias() = a.val().mat() * b.val().mat();
    return detail::make_op<T>(std::move(out), {a, b}, [m, k, n](Node<T>& nd) {
        const auto av = nd.parents[0]->val.mat(m, k);
        const auto bv = nd.parents[1]->val.mat(k, n);
        const auto gv = nd.grad.mat(m, n);
        if (detail::pneeds(nd, 0))
            detail::pgrad(nd, 0).mat(m, k).noalias() += gv * bv.transpose();
        if (detail::pneeds(nd, 1))
            detail::pgrad(nd, 1).mat(k, n).noalias() += av.transpose() * gv;
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    const int r = a.val().rows(), c = a.val().cols();
    Tensor<T> out({c, r});
    out.mat() = a.val().mat().transpose();
    return detail::make_op<T>(std::move(out), {a}, [r, c](Node<T>& nd) {
        detail::pgrad(nd, 0).mat(r, c) += nd.grad.mat(c, r).transpose();
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
    Tensor<T> out = a.val().reshaped(shape);
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    });
}

template <typename T>
Var<T> rows_slice(const Var<T>& a, int r0, int rows) {
    const int r = a.val().rows(), c = a.val().cols();
    if (r0 < 0 || r0 + rows > r) throw std::invalid_argument("rows_slice: out of range");
    Tensor<T> out({rows, c});
    std::copy_n(a.val().data() + static_cast<std::size_t>(r0) * c,
                static_cast<std::size_t>(rows) * c, out.data());
    return detail::make_op<T>(std::move(out), {a}, [r0, c](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        const std::size_t off = static_cast<std::size_t>(r0) * c;
        for (std::size_t i = 0; i < nd.grad.numel(); ++i) g[off + i] += nd.grad[i];
    });
}

template <typename T>
Var<T> cols_slice(const Var<T>& a, int c0, int cols) {
    const int r = a.val().rows(), c = a.val().cols();
    if (c0 < 0 || c0 + cols > c) throw std::invalid_argument("cols_slice: out of range");
    Tensor<T> out({r, cols});
    out.mat() = a.val().mat().middleCols(c0, cols);
    return detail::make_op<T>(std::move(out), {a}, [r, c, c0, cols](Node<T>& nd) {
        detail::pgrad(nd, 0).mat(r, c).middleCols(c0, cols) += nd.grad.mat(r, cols);
    });
}

template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
    const int r = a.val().rows(), ca = a.val().cols(), cb = b.val().cols();
    if (b.val().rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
    Tensor<T> out({r, ca + cb});
    out.mat().leftCols(ca) = a.val().mat();
    out.mat().rightCols(cb) = b.val().mat();
    return detail::make_op<T>(std::move(out), {a, b}, [r, ca, cb](Node<T>& nd) {
        if (detail::pneeds(nd, 0))
            detail::pgrad(nd, 0).mat(r, ca) += nd.grad.mat(r, ca + cb).leftCols(ca);
        if (detail::pneeds(nd, 1))
            detail::pgrad(nd, 1).mat(r, cb) += nd.grad.mat(r, ca + cb).rightCols(cb);
    });
}

template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
    const int ra = a.val().rows(), rb = b.val().rows(), c = a.val().cols();
    if (b.val().cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
    Tensor<T> out({ra + rb, c});
    std::copy_n(a.val().data(), a.val().numel(), out.data());
    std::copy_n(b.val().data(), b.val().numel(), out.data() + a.val().numel());
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& nd) {
        if (detail::pneeds(nd, 0)) {
            auto& g = detail::pgrad(nd, 0);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
        }
        if (detail::pneeds(nd, 1)) {
            auto& g = detail::pgrad(nd, 1);
            const std::size_t off = nd.parents[0]->val.numel();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[off + i];
        }
    });
}

// out[i] = x[idx[i]]; idx entries may repeat. Backward scatter-adds, so this
// expresses any permutation / gather layout change (patchify and friends).
template <typename T>
Var<T> gather(const Var<T>& x, std::shared_ptr<const std::vector<std::size_t>> idx,
              std::vector<int> out_shape) {
    Tensor<T> out(std::move(out_shape));
    if (out.numel() != idx->size())
        throw std::invalid_argument("gather: index count does not match output shape");
    for (std::size_t i = 0; i < idx->size(); ++i) out[i] = x.val()[(*idx)[i]];
    return detail::make_op<T>(std::move(out), {x}, [idx](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (std::size_t i = 0; i < idx->size(); ++i) g[(*idx)[i]] += nd.grad[i];
    });
}

// Softmax across each row (normalizes over columns).
template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
    const int r = a.val().rows(), c = a.val().cols();
    if (!a.val().all_finite()) throw NumericError("softmax_rows: non-finite logits");
    Tensor<T> out({r, c});
    for (int i = 0; i < r; ++i) {
        const T* x = a.val().data() + static_cast<std::size_t>(i) * c;
        T* y = out.data() + static_cast<std::size_t>(i) * c;
        T mx = x[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        T s = T(0);
        for (int j = 0; j < c; ++j) s += (y[j] = std::exp(x[j] - mx));
        for (int j = 0; j < c; ++j) y[j] /= s;
    }
    return detail::make_op<T>(std::move(out), {a}, [r, c](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (int i = 0; i < r; ++i) {
            const T* y = nd.val.data() + static_cast<std::size_t>(i) * c;
            const T* dy = nd.grad.data() + static_cast<std::size_t>(i) * c;
            T dot = T(0);
            for (int j = 0; j < c; ++j) dot += dy[j] * y[j];
            T* gx = g.data() + static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) gx[j] += y[j] * (dy[j] - dot);
        }
    });
}

// Softmax across each column (normalizes over rows).
template <typename T>
Var<T> softmax_cols(const Var<T>& a) {
    const int r = a.val().rows(), c = a.val().cols();
    if (!a.val().all_finite()) throw NumericError("softmax_cols: non-finite logits");
    Tensor<T> out({r, c});
    for (int j = 0; j < c; ++j) {
        T mx = a.val()(0, j);
        for (int i = 1; i < r; ++i) mx = std::max(mx, a.val()(i, j));
        T s = T(0);
        for (int i = 0; i < r; ++i) s += (out(i, j) = std::exp(a.val()(i, j) - mx));
        for (int i = 0; i < r; ++i) out(i, j) /= s;
    }
    return detail::make_op<T>(std::move(out), {a}, [r, c](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (int j = 0; j < c; ++j) {
            T dot = T(0);
            for (int i = 0; i < r; ++i) dot += nd.grad(i, j) * nd.val(i, j);
            for (int i = 0; i < r; ++i)
                g(i, j) += nd.val(i, j) * (nd.grad(i, j) - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts.

template <typename T>
Var<T> sum_all(const Var<T>& a) {
    T s = T(0);
    for (std::size_t i = 0; i < a.val().numel(); ++i) s += a.val()[i];
    return detail::make_op<T>(Tensor<T>::scalar(s), {a}, [](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        const T gv = nd.grad[0];
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += gv;
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
    const std::size_t n = a.val().numel();
    return mul_scalar(sum_all(a), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> max_all(const Var<T>& a) {
    std::size_t arg = 0;
    T mx = a.val()[0];
    for (std::size_t i = 1; i < a.val().numel(); ++i)
        if (a.val()[i] > mx) { mx = a.val()[i]; arg = i; }
    return detail::make_op<T>(Tensor<T>::scalar(mx), {a}, [arg](Node<T>& nd) {
        detail::pgrad(nd, 0)[arg] += nd.grad[0];
    });
}

template <typename T>
Var<T> rows_mean(const Var<T>& a) {
    const int r = a.val().rows(), c = a.val().cols();
    Tensor<T> out({r, 1});
    for (int i = 0; i < r; ++i) {
        T s = T(0);
        for (int j = 0; j < c; ++j) s += a.val()(i, j);
        out(i, 0) = s / static_cast<T>(c);
    }
    return detail::make_op<T>(std::move(out), {a}, [r, c](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        const T inv = T(1) / static_cast<T>(c);
        for (int i = 0; i < r; ++i) {
            const T gv = nd.grad(i, 0) * inv;
            for (int j = 0; j < c; ++j) g(i, j) += gv;
        }
    });
}

// R×1 -> R×C.
template <typename T>
Var<T> bcast_cols(const Var<T>& a, int cols) {
    const int r = a.val().rows();
    Tensor<T> out({r, cols});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < cols; ++j) out(i, j) = a.val()(i, 0);
    return detail::make_op<T>(std::move(out), {a}, [r, cols](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (int i = 0; i < r; ++i) {
            T s = T(0);
            for (int j = 0; j < cols; ++j) s += nd.grad(i, j);
            g(i, 0) += s;
        }
    });
}

// 1×C -> R×C.
template <typename T>
Var<T> bcast_rows(const Var<T>& a, int rows) {
    const int c = a.val().cols();
    Tensor<T> out({rows, c});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < c; ++j) out(i, j) = a.val()(0, j);
    return detail::make_op<T>(std::move(out), {a}, [rows, c](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (int j = 0; j < c; ++j) {
            T s = T(0);
            for (int i = 0; i < rows; ++i) s += nd.grad(i, j);
            g(0, j) += s;
        }
    });
}

// {1} -> arbitrary shape.
template <typename T>
Var<T> bcast_scalar(const Var<T>& a, std::vector<int> shape) {
    Tensor<T> out(shape, a.val()[0]);
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& nd) {
        T s = T(0);
        for (std::size_t i = 0; i < nd.grad.numel(); ++i) s += nd.grad[i];
        detail::pgrad(nd, 0)[0] += s;
    });
}

} // namespace ad
} // namespace semivdn
