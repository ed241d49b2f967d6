#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>

#include <Eigen/Dense>

#include "amt/common.hpp"

namespace amt {

/// When false, ops do not record parents/backward rules. Used for inference
/// and for the frozen-network forward of the u-update phase.
inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
    ~NoGradGuard() { g_grad_enabled = prev; }
};

template <class S>
struct Node {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // sized lazily; persists on leaves (accumulate semantics)
    bool requires_grad = false;
    bool leaf = true;
    std::string name;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    int64_t size() const { return static_cast<int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
    void accumulate(const S* g, int64_t n) {
        ensure_grad();
        for (int64_t i = 0; i < n; ++i) grad[i] += g[i];
    }
};

/// Value-semantics handle to a graph node. Copying shares the node.
template <class S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }
    static Tensor filled(Shape shape, S value, bool requires_grad = false) {
        auto n = std::make_shared<Node<S>>();
        n->shape = std::move(shape);
        n->data.assign(static_cast<size_t>(numel(n->shape)), value);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }
    static Tensor from(Shape shape, std::vector<S> data, bool requires_grad = false) {
        require(numel(shape) == static_cast<int64_t>(data.size()),
                "tensor: data length " + std::to_string(data.size()) +
                    " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node<S>>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }
    static Tensor scalar(S value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t size() const { return n_->size(); }
    int64_t dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    std::vector<S>& data() { return n_->data; }
    const std::vector<S>& data() const { return n_->data; }
    std::vector<S>& grad() { return n_->grad; }
    const std::vector<S>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    bool is_leaf() const { return n_->leaf; }
    const std::string& name() const { return n_->name; }
    Tensor& set_name(std::string name) {
        n_->name = std::move(name);
        return *this;
    }
    std::shared_ptr<Node<S>> node() const { return n_; }

    S item() const {
        require(size() == 1, "item(): tensor has " + std::to_string(size()) + " elements");
        return n_->data[0];
    }
    S at(int64_t i) const { return n_->data[static_cast<size_t>(i)]; }

    void zero_grad() { n_->grad.assign(n_->data.size(), S(0)); }

    bool all_finite() const {
        for (S v : n_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    /// Reverse-mode sweep from a scalar loss. Leaf grads accumulate across
    /// calls; intermediate grads are per-sweep temporaries.
    void backward() const;

private:
    std::shared_ptr<Node<S>> n_;
};

namespace detail {

template <class S>
Tensor<S> make_op(Shape shape, std::string name, std::vector<Tensor<S>> inputs,
                  std::function<void(Node<S>&)> backward_fn) {
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->data.assign(static_cast<size_t>(numel(n->shape)), S(0));
    n->name = std::move(name);
    n->leaf = false;
    if (g_grad_enabled) {
        bool rg = false;
        for (const auto& t : inputs) rg = rg || t.requires_grad();
        if (rg) {
            n->requires_grad = true;
            for (const auto& t : inputs) n->parents.push_back(t.node());
            n->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor<S>(n);
}

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<EMat<S>>;
template <class S>
using CMapMat = Eigen::Map<const EMat<S>>;

}  // namespace detail

template <class S>
void Tensor<S>::backward() const {
    require(size() == 1, "backward: loss must be scalar, got " + shape_str(shape()));
    require(n_->requires_grad, "backward: loss does not require grad");

    // post-order DFS; reversed list visits consumers before producers
    std::vector<Node<S>*> topo;
    std::unordered_set<Node<S>*> visited;
    std::vector<std::pair<Node<S>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    visited.insert(n_.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<S>* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    // seed dL/dL = 1 (non-leaf intermediates start each sweep from zero)
    for (Node<S>* node : topo) {
        if (!node->leaf) node->grad.assign(node->data.size(), S(0));
    }
    n_->ensure_grad();
    n_->grad[0] += S(1);

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node<S>* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
        if (!node->leaf) node->grad.clear();  // release sweep temporaries
    }
}

// ---------------------------------------------------------------------------
// elementwise and scalar ops
// ---------------------------------------------------------------------------

template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "add");
    auto out = detail::make_op<S>(
        a.shape(), "add", {a, b}, [pa = a.node(), pb = b.node()](Node<S>& n) {
            if (pa->requires_grad) pa->accumulate(n.grad.data(), n.size());
            if (pb->requires_grad) pb->accumulate(n.grad.data(), n.size());
        });
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "sub");
    auto out = detail::make_op<S>(
        a.shape(), "sub", {a, b}, [pa = a.node(), pb = b.node()](Node<S>& n) {
            if (pa->requires_grad) pa->accumulate(n.grad.data(), n.size());
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int64_t i = 0; i < n.size(); ++i) pb->grad[i] -= n.grad[i];
            }
        });
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "mul");
    auto out = detail::make_op<S>(
        a.shape(), "mul", {a, b}, [pa = a.node(), pb = b.node()](Node<S>& n) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (int64_t i = 0; i < n.size(); ++i) pa->grad[i] += n.grad[i] * pb->data[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int64_t i = 0; i < n.size(); ++i) pb->grad[i] += n.grad[i] * pa->data[i];
            }
        });
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "div");
    auto out = detail::make_op<S>(
        a.shape(), "div", {a, b}, [pa = a.node(), pb = b.node()](Node<S>& n) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (int64_t i = 0; i < n.size(); ++i) pa->grad[i] += n.grad[i] / pb->data[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int64_t i = 0; i < n.size(); ++i)
                    pb->grad[i] -= n.grad[i] * pa->data[i] / (pb->data[i] * pb->data[i]);
            }
        });
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] / b.data()[i];
    return out;
}

template <class S>
Tensor<S> smul(const Tensor<S>& a, double cd) {
    const S c = static_cast<S>(cd);
    auto out = detail::make_op<S>(a.shape(), "smul", {a}, [pa = a.node(), c](Node<S>& n) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n.size(); ++i) pa->grad[i] += c * n.grad[i];
    });
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = c * a.data()[i];
    return out;
}

template <class S>
Tensor<S> sadd(const Tensor<S>& a, double cd) {
    const S c = static_cast<S>(cd);
    auto out = detail::make_op<S>(a.shape(), "sadd", {a}, [pa = a.node()](Node<S>& n) {
        pa->accumulate(n.grad.data(), n.size());
    });
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] + c;
    return out;
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
    return smul(a, -1.0);
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
    auto out = detail::make_op<S>(a.shape(), "relu", {a}, [pa = a.node()](Node<S>& n) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n.size(); ++i)
            if (pa->data[i] > S(0)) pa->grad[i] += n.grad[i];
    });
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = std::max(a.data()[i], S(0));
    return out;
}

template <class S>
Tensor<S> exp_op(const Tensor<S>& a) {
    auto out = detail::make_op<S>(a.shape(), "exp", {a}, [pa = a.node()](Node<S>& n) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n.size(); ++i) pa->grad[i] += n.grad[i] * n.data[i];
    });
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = std::exp(a.data()[i]);
    return out;
}

template <class S>
Tensor<S> log_op(const Tensor<S>& a) {
    auto out = detail::make_op<S>(a.shape(), "log", {a}, [pa = a.node()](Node<S>& n) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n.size(); ++i) pa->grad[i] += n.grad[i] / pa->data[i];
    });
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = std::log(a.data()[i]);
    return out;
}

template <class S>
Tensor<S> sqrt_op(const Tensor<S>& a) {
    auto out = detail::make_op<S>(a.shape(), "sqrt", {a}, [pa = a.node()](Node<S>& n) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n.size(); ++i)
            pa->grad[i] += n.grad[i] * S(0.5) / n.data[i];
    });
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = std::sqrt(a.data()[i]);
    return out;
}

template <class S>
Tensor<S> square(const Tensor<S>& a) {
    auto out = detail::make_op<S>(a.shape(), "square", {a}, [pa = a.node()](Node<S>& n) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n.size(); ++i)
            pa->grad[i] += n.grad[i] * S(2) * pa->data[i];
    });
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * a.data()[i];
    return out;
}

template <class S>
Tensor<S> clamp_min(const Tensor<S>& a, double floor_d) {
    const S floor = static_cast<S>(floor_d);
    auto out = detail::make_op<S>(a.shape(), "clamp_min", {a}, [pa = a.node(), floor](Node<S>& n) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n.size(); ++i)
            if (pa->data[i] > floor) pa->grad[i] += n.grad[i];
    });
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = std::max(a.data()[i], floor);
    return out;
}

/// Stop-gradient: value copy detached from the graph.
template <class S>
Tensor<S> detach(const Tensor<S>& a) {
    auto n = std::make_shared<Node<S>>();
    n->shape = a.shape();
    n->data = a.data();
    n->name = "detach";
    return Tensor<S>(n);
}

// ---------------------------------------------------------------------------
// reductions, broadcasts, reshapes
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
    auto out = detail::make_op<S>({1}, "sum", {a}, [pa = a.node()](Node<S>& n) {
        pa->ensure_grad();
        const S g = n.grad[0];
        for (auto& v : pa->grad) v += g;
    });
    S acc = S(0);
    for (S v : a.data()) acc += v;
    out.data()[0] = acc;
    return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
    const S inv = S(1) / static_cast<S>(a.size());
    return smul(sum_all(a), inv);
}

/// Row/column sums of a matrix. axis=0 collapses rows (result length n),
/// axis=1 collapses columns (result length m).
template <class S>
Tensor<S> sum_axis2d(const Tensor<S>& a, int axis) {
    require(a.shape().size() == 2, "sum_axis2d: expected matrix, got " + shape_str(a.shape()));
    const int64_t m = a.dim(0), n = a.dim(1);
    const Shape out_shape = axis == 0 ? Shape{n} : Shape{m};
    auto out = detail::make_op<S>(out_shape, "sum_axis", {a}, [pa = a.node(), m, n, axis](Node<S>& nd) {
        pa->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
                pa->grad[i * n + j] += nd.grad[axis == 0 ? j : i];
    });
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            out.data()[axis == 0 ? j : i] += a.data()[i * n + j];
    return out;
}

/// (m) -> (m, n): replicate a column vector across n columns.
template <class S>
Tensor<S> expand_cols(const Tensor<S>& v, int64_t n) {
    require(v.shape().size() == 1, "expand_cols: expected vector");
    const int64_t m = v.dim(0);
    auto out = detail::make_op<S>({m, n}, "expand_cols", {v}, [pv = v.node(), m, n](Node<S>& nd) {
        pv->ensure_grad();
        for (int64_t i = 0; i < m; ++i) {
            S acc = S(0);
            for (int64_t j = 0; j < n; ++j) acc += nd.grad[i * n + j];
            pv->grad[i] += acc;
        }
    });
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data()[i * n + j] = v.data()[i];
    return out;
}

/// (n) -> (m, n): replicate a row vector across m rows.
template <class S>
Tensor<S> expand_rows(const Tensor<S>& v, int64_t m) {
    require(v.shape().size() == 1, "expand_rows: expected vector");
    const int64_t n = v.dim(0);
    auto out = detail::make_op<S>({m, n}, "expand_rows", {v}, [pv = v.node(), m, n](Node<S>& nd) {
        pv->ensure_grad();
        for (int64_t j = 0; j < n; ++j) {
            S acc = S(0);
            for (int64_t i = 0; i < m; ++i) acc += nd.grad[i * n + j];
            pv->grad[j] += acc;
        }
    });
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data()[i * n + j] = v.data()[j];
    return out;
}

/// Multiply every element by a 1-element tensor (scale participates in autodiff).
template <class S>
Tensor<S> scale_by(const Tensor<S>& a, const Tensor<S>& s) {
    require(s.size() == 1, "scale_by: scale must be a 1-element tensor");
    auto out = detail::make_op<S>(
        a.shape(), "scale_by", {a, s}, [pa = a.node(), ps = s.node()](Node<S>& n) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                const S c = ps->data[0];
                for (int64_t i = 0; i < n.size(); ++i) pa->grad[i] += c * n.grad[i];
            }
            if (ps->requires_grad) {
                ps->ensure_grad();
                S acc = S(0);
                for (int64_t i = 0; i < n.size(); ++i) acc += n.grad[i] * pa->data[i];
                ps->grad[0] += acc;
            }
        });
    const S c = s.data()[0];
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = c * a.data()[i];
    return out;
}

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    require(numel(shape) == a.size(), "reshape: " + shape_str(a.shape()) + " -> " +
                                          shape_str(shape) + " changes element count");
    auto out = detail::make_op<S>(shape, "reshape", {a}, [pa = a.node()](Node<S>& n) {
        pa->accumulate(n.grad.data(), n.size());
    });
    out.data() = a.data();
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(0),
            "matmul: incompatible shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = detail::make_op<S>(
        {m, n}, "matmul", {a, b}, [pa = a.node(), pb = b.node(), m, k, n](Node<S>& nd) {
            detail::CMapMat<S> G(nd.grad.data(), m, n);
            if (pa->requires_grad) {
                pa->ensure_grad();
                detail::CMapMat<S> B(pb->data.data(), k, n);
                detail::MapMat<S> dA(pa->grad.data(), m, k);
                dA.noalias() += G * B.transpose();
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                detail::CMapMat<S> A(pa->data.data(), m, k);
                detail::MapMat<S> dB(pb->grad.data(), k, n);
                dB.noalias() += A.transpose() * G;
            }
        });
    detail::CMapMat<S> A(a.data().data(), m, k);
    detail::CMapMat<S> B(b.data().data(), k, n);
    detail::MapMat<S> O(out.data().data(), m, n);
    O.noalias() = A * B;
    return out;
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& a) {
    require(a.shape().size() == 2, "transpose2d: expected matrix");
    const int64_t m = a.dim(0), n = a.dim(1);
    auto out = detail::make_op<S>({n, m}, "transpose", {a}, [pa = a.node(), m, n](Node<S>& nd) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < m; ++j) pa->grad[j * n + i] += nd.grad[i * m + j];
    });
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    return out;
}

/// out[i,j] = sum_c (A[i,c] - B[j,c])^2. Shared kernel for the Euclidean
/// metric on pooled vectors and on per-patch vectors.
template <class S>
Tensor<S> pairwise_sqeuclidean(const Tensor<S>& a, const Tensor<S>& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(1),
            "pairwise_sqeuclidean: shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    const int64_t m = a.dim(0), n = b.dim(0), c = a.dim(1);
    auto out = detail::make_op<S>(
        {m, n}, "pairwise_sqeuclidean", {a, b},
        [pa = a.node(), pb = b.node(), m, n, c](Node<S>& nd) {
            if (pa->requires_grad) pa->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) {
                    const S g2 = S(2) * nd.grad[i * n + j];
                    if (g2 == S(0)) continue;
                    for (int64_t k = 0; k < c; ++k) {
                        const S d = pa->data[i * c + k] - pb->data[j * c + k];
                        if (pa->requires_grad) pa->grad[i * c + k] += g2 * d;
                        if (pb->requires_grad) pb->grad[j * c + k] -= g2 * d;
                    }
                }
        });
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            S acc = S(0);
            for (int64_t k = 0; k < c; ++k) {
                const S d = a.data()[i * c + k] - b.data()[j * c + k];
                acc += d * d;
            }
            out.data()[i * n + j] = acc;
        }
    return out;
}

// ---------------------------------------------------------------------------
// batch manipulation
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> concat_batch(const std::vector<Tensor<S>>& parts) {
    require(!parts.empty(), "concat_batch: no inputs");
    Shape rest(parts[0].shape().begin() + 1, parts[0].shape().end());
    int64_t total = 0;
    for (const auto& p : parts) {
        Shape r(p.shape().begin() + 1, p.shape().end());
        require(r == rest, "concat_batch: trailing shape mismatch");
        total += p.dim(0);
    }
    Shape out_shape{total};
    out_shape.insert(out_shape.end(), rest.begin(), rest.end());
    const int64_t stride = numel(rest);

    std::vector<std::shared_ptr<Node<S>>> srcs;
    for (const auto& p : parts) srcs.push_back(p.node());
    auto out = detail::make_op<S>(out_shape, "concat_batch", parts, [srcs, stride](Node<S>& nd) {
        int64_t off = 0;
        for (const auto& p : srcs) {
            const int64_t len = p->size();
            if (p->requires_grad) p->accumulate(nd.grad.data() + off, len);
            off += len;
        }
    });
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
        off += p.size();
    }
    (void)stride;
    return out;
}

template <class S>
Tensor<S> slice_batch(const Tensor<S>& a, int64_t begin, int64_t end) {
    require(!a.shape().empty() && begin >= 0 && end <= a.dim(0) && begin < end,
            "slice_batch: invalid range");
    Shape out_shape = a.shape();
    out_shape[0] = end - begin;
    const int64_t stride = a.size() / a.dim(0);
    auto out = detail::make_op<S>(out_shape, "slice_batch", {a},
                                  [pa = a.node(), begin, stride](Node<S>& nd) {
                                      pa->ensure_grad();
                                      const int64_t off = begin * stride;
                                      for (int64_t i = 0; i < nd.size(); ++i)
                                          pa->grad[off + i] += nd.grad[i];
                                  });
    std::copy(a.data().begin() + begin * stride, a.data().begin() + end * stride,
              out.data().begin());
    return out;
}

/// [x0..xN] -> [x0..xN, x0..xN, ...] (t blocks).
template <class S>
Tensor<S> repeat_batch(const Tensor<S>& a, int64_t t) {
    Shape out_shape = a.shape();
    out_shape[0] *= t;
    const int64_t len = a.size();
    auto out = detail::make_op<S>(out_shape, "repeat_batch", {a}, [pa = a.node(), t, len](Node<S>& nd) {
        pa->ensure_grad();
        for (int64_t b = 0; b < t; ++b)
            for (int64_t i = 0; i < len; ++i) pa->grad[i] += nd.grad[b * len + i];
    });
    for (int64_t b = 0; b < t; ++b)
        std::copy(a.data().begin(), a.data().end(), out.data().begin() + b * len);
    return out;
}

/// [x0..xN] -> [x0 x0.. x1 x1..] (each sample t consecutive times).
template <class S>
Tensor<S> repeat_interleave_batch(const Tensor<S>& a, int64_t t) {
    Shape out_shape = a.shape();
    out_shape[0] *= t;
    const int64_t n = a.dim(0);
    const int64_t stride = a.size() / n;
    auto out = detail::make_op<S>(out_shape, "repeat_interleave", {a},
                                  [pa = a.node(), t, n, stride](Node<S>& nd) {
                                      pa->ensure_grad();
                                      for (int64_t i = 0; i < n; ++i)
                                          for (int64_t b = 0; b < t; ++b)
                                              for (int64_t k = 0; k < stride; ++k)
                                                  pa->grad[i * stride + k] +=
                                                      nd.grad[(i * t + b) * stride + k];
                                  });
    for (int64_t i = 0; i < n; ++i)
        for (int64_t b = 0; b < t; ++b)
            std::copy(a.data().begin() + i * stride, a.data().begin() + (i + 1) * stride,
                      out.data().begin() + (i * t + b) * stride);
    return out;
}

// ---------------------------------------------------------------------------
// spatial ops (NCHW)
// ---------------------------------------------------------------------------

template <class S>
void check_nchw(const Tensor<S>& x, const char* op) {
    require(x.shape().size() == 4, std::string(op) + ": expected NCHW tensor, got " +
                                       shape_str(x.shape()));
}

/// Channel concat of two NCHW tensors.
template <class S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
    check_nchw(a, "concat_channels");
    check_nchw(b, "concat_channels");
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            "concat_channels: shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    const int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    auto out = detail::make_op<S>(
        {n, ca + cb, a.dim(2), a.dim(3)}, "concat_channels", {a, b},
        [pa = a.node(), pb = b.node(), n, ca, cb, hw](Node<S>& nd) {
            if (pa->requires_grad) pa->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const int64_t src = i * (ca + cb) * hw;
                if (pa->requires_grad)
                    for (int64_t k = 0; k < ca * hw; ++k)
                        pa->grad[i * ca * hw + k] += nd.grad[src + k];
                if (pb->requires_grad)
                    for (int64_t k = 0; k < cb * hw; ++k)
                        pb->grad[i * cb * hw + k] += nd.grad[src + ca * hw + k];
            }
        });
    for (int64_t i = 0; i < n; ++i) {
        std::copy(a.data().begin() + i * ca * hw, a.data().begin() + (i + 1) * ca * hw,
                  out.data().begin() + i * (ca + cb) * hw);
        std::copy(b.data().begin() + i * cb * hw, b.data().begin() + (i + 1) * cb * hw,
                  out.data().begin() + i * (ca + cb) * hw + ca * hw);
    }
    return out;
}

/// NCHW -> (N*H*W, C): one row per spatial position. Used by the patch-wise
/// classifiers.
template <class S>
Tensor<S> flatten_patches(const Tensor<S>& x) {
    check_nchw(x, "flatten_patches");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t hw = h * w;
    auto out = detail::make_op<S>({n * hw, c}, "flatten_patches", {x},
                                  [px = x.node(), n, c, hw](Node<S>& nd) {
                                      px->ensure_grad();
                                      for (int64_t i = 0; i < n; ++i)
                                          for (int64_t k = 0; k < c; ++k)
                                              for (int64_t p = 0; p < hw; ++p)
                                                  px->grad[(i * c + k) * hw + p] +=
                                                      nd.grad[(i * hw + p) * c + k];
                                  });
    for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < c; ++k)
            for (int64_t p = 0; p < hw; ++p)
                out.data()[(i * hw + p) * c + k] = x.data()[(i * c + k) * hw + p];
    return out;
}

/// Global average pool NCHW -> (N, C).
template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
    check_nchw(x, "global_avg_pool");
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const S inv = S(1) / static_cast<S>(hw);
    auto out = detail::make_op<S>({n, c}, "global_avg_pool", {x},
                                  [px = x.node(), n, c, hw, inv](Node<S>& nd) {
                                      px->ensure_grad();
                                      for (int64_t i = 0; i < n * c; ++i) {
                                          const S g = nd.grad[i] * inv;
                                          for (int64_t p = 0; p < hw; ++p)
                                              px->grad[i * hw + p] += g;
                                      }
                                  });
    for (int64_t i = 0; i < n * c; ++i) {
        S acc = S(0);
        for (int64_t p = 0; p < hw; ++p) acc += x.data()[i * hw + p];
        out.data()[i] = acc * inv;
    }
    return out;
}

/// Rotation by k*90 degrees clockwise, exact index permutation.
template <class S>
Tensor<S> rot90(const Tensor<S>& x, int k) {
    check_nchw(x, "rot90");
    require(x.dim(2) == x.dim(3), "rot90: image must be square, got " + shape_str(x.shape()));
    k = ((k % 4) + 4) % 4;
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2);
    // one clockwise step reads dst(r, q) from src(h-1-q, r)
    auto map_index = [h](int k_, int64_t r, int64_t q) {
        for (int i = 0; i < k_; ++i) {
            const int64_t nr = h - 1 - q;
            q = r;
            r = nr;
        }
        return std::pair<int64_t, int64_t>(r, q);
    };
    auto out = detail::make_op<S>(x.shape(), "rot90", {x},
                                  [px = x.node(), n, c, h, k, map_index](Node<S>& nd) {
                                      px->ensure_grad();
                                      for (int64_t i = 0; i < n * c; ++i)
                                          for (int64_t r = 0; r < h; ++r)
                                              for (int64_t q = 0; q < h; ++q) {
                                                  auto [sr, sq] = map_index(k, r, q);
                                                  px->grad[(i * h + sr) * h + sq] +=
                                                      nd.grad[(i * h + r) * h + q];
                                              }
                                  });
    for (int64_t i = 0; i < n * c; ++i)
        for (int64_t r = 0; r < h; ++r)
            for (int64_t q = 0; q < h; ++q) {
                auto [sr, sq] = map_index(k, r, q);
                out.data()[(i * h + r) * h + q] = x.data()[(i * h + sr) * h + sq];
            }
    return out;
}

/// 2x2 max pool, stride 2, floor semantics on odd extents.
template <class S>
Tensor<S> max_pool2x2(const Tensor<S>& x) {
    check_nchw(x, "max_pool2x2");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t oh = h / 2, ow = w / 2;
    require(oh >= 1 && ow >= 1, "max_pool2x2: input too small " + shape_str(x.shape()));
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * c * oh * ow));
    auto out = detail::make_op<S>({n, c, oh, ow}, "max_pool2x2", {x},
                                  [px = x.node(), argmax](Node<S>& nd) {
                                      px->ensure_grad();
                                      for (int64_t i = 0; i < nd.size(); ++i)
                                          px->grad[(*argmax)[i]] += nd.grad[i];
                                  });
    for (int64_t i = 0; i < n * c; ++i)
        for (int64_t r = 0; r < oh; ++r)
            for (int64_t q = 0; q < ow; ++q) {
                int64_t best = (i * h + 2 * r) * w + 2 * q;
                S bv = x.data()[best];
                for (int dr = 0; dr < 2; ++dr)
                    for (int dq = 0; dq < 2; ++dq) {
                        const int64_t idx = (i * h + 2 * r + dr) * w + 2 * q + dq;
                        if (x.data()[idx] > bv) {
                            bv = x.data()[idx];
                            best = idx;
                        }
                    }
                out.data()[(i * oh + r) * ow + q] = bv;
                (*argmax)[(i * oh + r) * ow + q] = best;
            }
    return out;
}

// ---------------------------------------------------------------------------
// convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void im2col(const S* src, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t oh, int64_t ow, S* cols) {
    // cols: (c*kh*kw) x (oh*ow)
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t fr = 0; fr < kh; ++fr)
            for (int64_t fq = 0; fq < kw; ++fq) {
                S* dst = cols + ((ch * kh + fr) * kw + fq) * oh * ow;
                for (int64_t r = 0; r < oh; ++r) {
                    const int64_t sr = r * stride + fr - pad;
                    if (sr < 0 || sr >= h) {
                        std::fill(dst + r * ow, dst + (r + 1) * ow, S(0));
                        continue;
                    }
                    for (int64_t q = 0; q < ow; ++q) {
                        const int64_t sq = q * stride + fq - pad;
                        dst[r * ow + q] =
                            (sq < 0 || sq >= w) ? S(0) : src[(ch * h + sr) * w + sq];
                    }
                }
            }
}

template <class S>
void col2im_add(const S* cols, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t oh, int64_t ow, S* dst) {
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t fr = 0; fr < kh; ++fr)
            for (int64_t fq = 0; fq < kw; ++fq) {
                const S* src = cols + ((ch * kh + fr) * kw + fq) * oh * ow;
                for (int64_t r = 0; r < oh; ++r) {
                    const int64_t sr = r * stride + fr - pad;
                    if (sr < 0 || sr >= h) continue;
                    for (int64_t q = 0; q < ow; ++q) {
                        const int64_t sq = q * stride + fq - pad;
                        if (sq >= 0 && sq < w) dst[(ch * h + sr) * w + sq] += src[r * ow + q];
                    }
                }
            }
}

}  // namespace detail

/// conv2d(x: N x C x H x W, weight: O x C x kh x kw, bias: O) with zero padding.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 int64_t stride = 1, int64_t pad = 0) {
    check_nchw(x, "conv2d");
    check_nchw(weight, "conv2d weight");
    require(x.dim(1) == weight.dim(1),
            "conv2d: input channels " + shape_str(x.shape()) + " do not match weight " +
                shape_str(weight.shape()));
    require(bias.shape() == Shape{weight.dim(0)}, "conv2d: bias shape mismatch");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    const int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const int64_t ow = (w + 2 * pad - kw) / stride + 1;
    require(oh >= 1 && ow >= 1, "conv2d: kernel larger than padded input");

    const int64_t ck = c * kh * kw;
    auto out = detail::make_op<S>(
        {n, o, oh, ow}, "conv2d", {x, weight, bias},
        [px = x.node(), pw = weight.node(), pb = bias.node(), n, c, h, w, o, kh, kw, stride,
         pad, oh, ow, ck](Node<S>& nd) {
            std::vector<S> cols(static_cast<size_t>(ck * oh * ow));
            std::vector<S> dcols(static_cast<size_t>(ck * oh * ow));
            if (px->requires_grad) px->ensure_grad();
            if (pw->requires_grad) pw->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            detail::CMapMat<S> W(pw->data.data(), o, ck);
            for (int64_t i = 0; i < n; ++i) {
                detail::CMapMat<S> G(nd.grad.data() + i * o * oh * ow, o, oh * ow);
                if (pb->requires_grad)
                    for (int64_t j = 0; j < o; ++j) {
                        // serial reduction: Eigen's .sum() splits by pointer
                        // alignment and would break bit reproducibility
                        S acc = S(0);
                        const S* g = nd.grad.data() + (i * o + j) * oh * ow;
                        for (int64_t p = 0; p < oh * ow; ++p) acc += g[p];
                        pb->grad[j] += acc;
                    }
                if (pw->requires_grad) {
                    detail::im2col(px->data.data() + i * c * h * w, c, h, w, kh, kw, stride,
                                   pad, oh, ow, cols.data());
                    detail::CMapMat<S> C(cols.data(), ck, oh * ow);
                    detail::MapMat<S> dW(pw->grad.data(), o, ck);
                    dW.noalias() += G * C.transpose();
                }
                if (px->requires_grad) {
                    detail::MapMat<S> dC(dcols.data(), ck, oh * ow);
                    dC.noalias() = W.transpose() * G;
                    detail::col2im_add(dcols.data(), c, h, w, kh, kw, stride, pad, oh, ow,
                                       px->grad.data() + i * c * h * w);
                }
            }
        });

    std::vector<S> cols(static_cast<size_t>(ck * oh * ow));
    detail::CMapMat<S> W(weight.data().data(), o, ck);
    for (int64_t i = 0; i < n; ++i) {
        detail::im2col(x.data().data() + i * c * h * w, c, h, w, kh, kw, stride, pad, oh, ow,
                       cols.data());
        detail::CMapMat<S> C(cols.data(), ck, oh * ow);
        detail::MapMat<S> O(out.data().data() + i * o * oh * ow, o, oh * ow);
        O.noalias() = W * C;
        for (int64_t j = 0; j < o; ++j) O.row(j).array() += bias.data()[j];
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

/// Per-channel batch norm over N,H,W. In training mode normalizes by batch
/// statistics and (optionally) updates the running buffers in place; in eval
/// mode uses the running buffers. Running buffers are plain data tensors and
/// never part of the graph.
template <class S>
Tensor<S> batch_norm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                       Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                       bool update_stats = true, S momentum = S(0.1), S eps = S(1e-5)) {
    check_nchw(x, "batch_norm2d");
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    require(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
            "batch_norm2d: gamma/beta must have shape [" + std::to_string(c) + "]");
    const int64_t m = n * hw;

    auto mean = std::make_shared<std::vector<S>>(static_cast<size_t>(c), S(0));
    auto var = std::make_shared<std::vector<S>>(static_cast<size_t>(c), S(0));
    if (training) {
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                const S* src = x.data().data() + (i * c + ch) * hw;
                S acc = S(0);
                for (int64_t p = 0; p < hw; ++p) acc += src[p];
                (*mean)[ch] += acc;
            }
        for (int64_t ch = 0; ch < c; ++ch) (*mean)[ch] /= static_cast<S>(m);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                const S* src = x.data().data() + (i * c + ch) * hw;
                S acc = S(0);
                for (int64_t p = 0; p < hw; ++p) {
                    const S d = src[p] - (*mean)[ch];
                    acc += d * d;
                }
                (*var)[ch] += acc;
            }
        for (int64_t ch = 0; ch < c; ++ch) (*var)[ch] /= static_cast<S>(m);
        if (update_stats) {
            for (int64_t ch = 0; ch < c; ++ch) {
                running_mean.data()[ch] =
                    (S(1) - momentum) * running_mean.data()[ch] + momentum * (*mean)[ch];
                running_var.data()[ch] =
                    (S(1) - momentum) * running_var.data()[ch] + momentum * (*var)[ch];
            }
        }
    } else {
        *mean = running_mean.data();
        *var = running_var.data();
    }

    auto out = detail::make_op<S>(
        x.shape(), "batch_norm2d", {x, gamma, beta},
        [px = x.node(), pg = gamma.node(), pbeta = beta.node(), mean, var, n, c, hw, m, eps,
         training](Node<S>& nd) {
            if (px->requires_grad) px->ensure_grad();
            if (pg->requires_grad) pg->ensure_grad();
            if (pbeta->requires_grad) pbeta->ensure_grad();
            for (int64_t ch = 0; ch < c; ++ch) {
                const S mu = (*mean)[ch];
                const S inv_std = S(1) / std::sqrt((*var)[ch] + eps);
                const S g = pg->data[ch];
                // channel-wise reductions of upstream grad
                S sum_g = S(0), sum_gx = S(0);
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t base = (i * c + ch) * hw;
                    for (int64_t p = 0; p < hw; ++p) {
                        const S go = nd.grad[base + p];
                        sum_g += go;
                        sum_gx += go * (px->data[base + p] - mu) * inv_std;
                    }
                }
                if (pg->requires_grad) pg->grad[ch] += sum_gx;
                if (pbeta->requires_grad) pbeta->grad[ch] += sum_g;
                if (!px->requires_grad) continue;
                if (training) {
                    const S inv_m = S(1) / static_cast<S>(m);
                    for (int64_t i = 0; i < n; ++i) {
                        const int64_t base = (i * c + ch) * hw;
                        for (int64_t p = 0; p < hw; ++p) {
                            const S xh = (px->data[base + p] - mu) * inv_std;
                            px->grad[base + p] +=
                                g * inv_std * (nd.grad[base + p] - inv_m * sum_g - inv_m * xh * sum_gx);
                        }
                    }
                } else {
                    for (int64_t i = 0; i < n; ++i) {
                        const int64_t base = (i * c + ch) * hw;
                        for (int64_t p = 0; p < hw; ++p)
                            px->grad[base + p] += nd.grad[base + p] * g * inv_std;
                    }
                }
            }
        });
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const S mu = (*mean)[ch];
            const S inv_std = S(1) / std::sqrt((*var)[ch] + eps);
            const S g = gamma.data()[ch], b = beta.data()[ch];
            const int64_t base = (i * c + ch) * hw;
            for (int64_t p = 0; p < hw; ++p)
                out.data()[base + p] = (x.data()[base + p] - mu) * inv_std * g + b;
        }
    return out;
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

/// Row-wise softmax over the last axis of a matrix, max-shifted for stability.
template <class S>
Tensor<S> softmax(const Tensor<S>& logits) {
    require(logits.shape().size() == 2, "softmax: expected matrix, got " +
                                            shape_str(logits.shape()));
    const int64_t m = logits.dim(0), n = logits.dim(1);
    auto out = detail::make_op<S>(logits.shape(), "softmax", {logits},
                                  [pl = logits.node(), m, n](Node<S>& nd) {
                                      pl->ensure_grad();
                                      for (int64_t i = 0; i < m; ++i) {
                                          S dot = S(0);
                                          for (int64_t j = 0; j < n; ++j)
                                              dot += nd.grad[i * n + j] * nd.data[i * n + j];
                                          for (int64_t j = 0; j < n; ++j)
                                              pl->grad[i * n + j] +=
                                                  nd.data[i * n + j] * (nd.grad[i * n + j] - dot);
                                      }
                                  });
    for (int64_t i = 0; i < m; ++i) {
        S mx = logits.data()[i * n];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, logits.data()[i * n + j]);
        S z = S(0);
        for (int64_t j = 0; j < n; ++j) {
            const S e = std::exp(logits.data()[i * n + j] - mx);
            out.data()[i * n + j] = e;
            z += e;
        }
        for (int64_t j = 0; j < n; ++j) out.data()[i * n + j] /= z;
    }
    return out;
}

/// Row-wise log-softmax; the numerically safe path for cross-entropy.
template <class S>
Tensor<S> log_softmax(const Tensor<S>& logits) {
    require(logits.shape().size() == 2, "log_softmax: expected matrix");
    const int64_t m = logits.dim(0), n = logits.dim(1);
    auto out = detail::make_op<S>(logits.shape(), "log_softmax", {logits},
                                  [pl = logits.node(), m, n](Node<S>& nd) {
                                      pl->ensure_grad();
                                      for (int64_t i = 0; i < m; ++i) {
                                          S sum_g = S(0);
                                          for (int64_t j = 0; j < n; ++j)
                                              sum_g += nd.grad[i * n + j];
                                          for (int64_t j = 0; j < n; ++j)
                                              pl->grad[i * n + j] +=
                                                  nd.grad[i * n + j] -
                                                  std::exp(nd.data[i * n + j]) * sum_g;
                                      }
                                  });
    for (int64_t i = 0; i < m; ++i) {
        S mx = logits.data()[i * n];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, logits.data()[i * n + j]);
        S z = S(0);
        for (int64_t j = 0; j < n; ++j) z += std::exp(logits.data()[i * n + j] - mx);
        const S lz = std::log(z) + mx;
        for (int64_t j = 0; j < n; ++j) out.data()[i * n + j] = logits.data()[i * n + j] - lz;
    }
    return out;
}

// ---------------------------------------------------------------------------
// composite helpers
// ---------------------------------------------------------------------------

/// y = x W^T + b with W: (out, in), matching the usual linear-layer layout.
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    auto y = matmul(x, transpose2d(w));
    const int64_t m = y.dim(0);
    return add(y, expand_rows(b, m));
}

template <class S>
Tensor<S> one_hot(const std::vector<int64_t>& labels, int64_t n_classes) {
    Tensor<S> t = Tensor<S>::zeros({static_cast<int64_t>(labels.size()), n_classes});
    for (size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] >= 0 && labels[i] < n_classes,
                "one_hot: label " + std::to_string(labels[i]) + " out of [0," +
                    std::to_string(n_classes) + ")");
        t.data()[i * n_classes + labels[i]] = S(1);
    }
    return t;
}

/// Summed cross-entropy -sum_i log softmax(logits)[i, label_i].
template <class S>
Tensor<S> cross_entropy_sum(const Tensor<S>& logits, const std::vector<int64_t>& labels) {
    require(logits.dim(0) == static_cast<int64_t>(labels.size()),
            "cross_entropy_sum: " + std::to_string(labels.size()) + " labels for " +
                std::to_string(logits.dim(0)) + " rows");
    auto lsm = log_softmax(logits);
    auto mask = one_hot<S>(labels, logits.dim(1));
    return neg(sum_all(mul(lsm, mask)));
}

/// Summed cross-entropy from probability rows (used on fused distributions).
template <class S>
Tensor<S> cross_entropy_from_probs_sum(const Tensor<S>& probs,
                                       const std::vector<int64_t>& labels) {
    require(probs.dim(0) == static_cast<int64_t>(labels.size()),
            "cross_entropy_from_probs_sum: label count mismatch");
    auto mask = one_hot<S>(labels, probs.dim(1));
    return neg(sum_all(mul(log_op(clamp_min(probs, S(1e-12))), mask)));
}

/// Summed KL(p || q) over rows, q clamped at 1e-12. Gradient flows through p
/// (and q if it is attached; pass a detached teacher for stop-gradient).
template <class S>
Tensor<S> kl_div_sum(const Tensor<S>& p, const Tensor<S>& q) {
    check_same_shape(p, q, "kl_div_sum");
    auto pc = clamp_min(p, S(1e-12));
    auto qc = clamp_min(q, S(1e-12));
    return sum_all(mul(p, sub(log_op(pc), log_op(qc))));
}

}  // namespace amt
