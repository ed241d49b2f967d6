#pragma once

#include <functional>
#include <string>
#include <vector>

#include "amt/tensor.hpp"

namespace amt::gradcheck {

struct CheckResult {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass() const { return max_rel_err < tolerance; }
};

/// Central finite differences vs reverse-mode gradients, in double.
/// `forward` must rebuild the graph from the leaf data on every call
/// (no hidden state; batch-norm running-stat updates must be disabled).
inline double max_rel_error(std::vector<Tensor<double>> leaves,
                            const std::function<Tensor<double>()>& forward,
                            double eps = 1e-4) {
    for (auto& leaf : leaves) leaf.zero_grad();
    auto loss = forward();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& leaf : leaves) {
        leaf.grad().resize(leaf.data().size(), 0.0);
        analytic.push_back(leaf.grad());
        leaf.zero_grad();
    }

    double worst = 0.0;
    NoGradGuard ng;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& x = leaves[li].data();
        for (size_t i = 0; i < x.size(); ++i) {
            const double saved = x[i];
            x[i] = saved + eps;
            const double fp = forward().item();
            x[i] = saved - eps;
            const double fm = forward().item();
            x[i] = saved;
            const double fd = (fp - fm) / (2.0 * eps);
            const double g = analytic[li][i];
            const double denom = std::max(1e-8, std::max(std::abs(fd), std::abs(g)));
            worst = std::max(worst, std::abs(fd - g) / denom);
        }
    }
    return worst;
}

namespace detail {

inline Tensor<double> rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                                  bool requires_grad = true) {
    std::vector<double> data(static_cast<size_t>(numel(shape)));
    for (auto& v : data) v = rng.uniform(lo, hi);
    return Tensor<double>::from(std::move(shape), std::move(data), requires_grad);
}

/// Wrap an op so that every output component feeds the scalar loss through
/// fixed random weights (drawn once, so the wrapped function stays pure).
inline std::function<Tensor<double>()> contracted(const std::function<Tensor<double>()>& op,
                                                  Rng& rng) {
    Tensor<double> w;
    {
        NoGradGuard ng;
        w = rand_tensor(op().shape(), rng, 0.25, 1.0, false);
    }
    return [op, w]() { return sum_all(mul(op(), w)); };
}

}  // namespace detail

/// Gradient fidelity of every registered primitive (64-bit, random inputs).
inline std::vector<CheckResult> primitive_suite(uint64_t seed = 7, double tol = 1e-6) {
    std::vector<CheckResult> results;
    Rng rng(seed);
    using detail::contracted;
    using detail::rand_tensor;
    using T = Tensor<double>;

    auto run = [&](const std::string& name, std::vector<T> leaves,
                   std::function<Tensor<double>()> op) {
        results.push_back(
            {name, max_rel_error(std::move(leaves), detail::contracted(op, rng)), tol});
    };
    auto run_scalar = [&](const std::string& name, std::vector<T> leaves,
                          std::function<Tensor<double>()> op) {
        results.push_back({name, max_rel_error(std::move(leaves), op), tol});
    };

    {
        auto a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
        run("add", {a, b}, [=] { return add(a, b); });
        run("sub", {a, b}, [=] { return sub(a, b); });
        run("mul", {a, b}, [=] { return mul(a, b); });
    }
    {
        auto a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng, 0.5, 1.5);
        run("div", {a, b}, [=] { return div(a, b); });
    }
    {
        auto a = rand_tensor({2, 5}, rng);
        run("smul", {a}, [=] { return smul(a, 1.7); });
        run("sadd", {a}, [=] { return sadd(a, -0.3); });
        run("neg", {a}, [=] { return neg(a); });
    }
    {
        // keep relu/clamp inputs away from the kink
        auto a = rand_tensor({4, 4}, rng);
        for (auto& v : a.data())
            if (std::abs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
        run("relu", {a}, [=] { return relu(a); });
        run("clamp_min", {a}, [=] { return clamp_min(a, 0.0); });
    }
    {
        auto a = rand_tensor({3, 3}, rng);
        run("exp", {a}, [=] { return exp_op(a); });
        run("square", {a}, [=] { return square(a); });
    }
    {
        auto a = rand_tensor({3, 3}, rng, 0.2, 2.0);
        run("log", {a}, [=] { return log_op(a); });
        run("sqrt", {a}, [=] { return sqrt_op(a); });
    }
    {
        auto a = rand_tensor({2, 3, 4}, rng);
        run_scalar("sum_all", {a}, [=] { return sum_all(a); });
        run_scalar("mean_all", {a}, [=] { return mean_all(a); });
        run("reshape", {a}, [=] { return reshape(a, {4, 6}); });
    }
    {
        auto a = rand_tensor({3, 5}, rng);
        run("sum_axis2d/0", {a}, [=] { return sum_axis2d(a, 0); });
        run("sum_axis2d/1", {a}, [=] { return sum_axis2d(a, 1); });
        run("transpose2d", {a}, [=] { return transpose2d(a); });
    }
    {
        auto v = rand_tensor({4}, rng);
        run("expand_cols", {v}, [=] { return expand_cols(v, 3); });
        run("expand_rows", {v}, [=] { return expand_rows(v, 3); });
    }
    {
        auto a = rand_tensor({2, 6}, rng);
        auto s = rand_tensor({1}, rng, 0.5, 1.5);
        run("scale_by", {a, s}, [=] { return scale_by(a, s); });
    }
    {
        auto a = rand_tensor({3, 4}, rng), b = rand_tensor({4, 2}, rng);
        run("matmul", {a, b}, [=] { return matmul(a, b); });
    }
    {
        auto a = rand_tensor({3, 5}, rng), b = rand_tensor({4, 5}, rng);
        run("pairwise_sqeuclidean", {a, b}, [=] { return pairwise_sqeuclidean(a, b); });
    }
    {
        auto a = rand_tensor({2, 3, 2, 2}, rng), b = rand_tensor({3, 3, 2, 2}, rng);
        run("concat_batch", {a, b}, [=] { return concat_batch<double>({a, b}); });
        run("slice_batch", {a}, [=] { return slice_batch(a, 0, 1); });
        run("repeat_batch", {a}, [=] { return repeat_batch(a, 3); });
        run("repeat_interleave_batch", {a}, [=] { return repeat_interleave_batch(a, 3); });
    }
    {
        auto a = rand_tensor({2, 2, 3, 3}, rng), b = rand_tensor({2, 3, 3, 3}, rng);
        run("concat_channels", {a, b}, [=] { return concat_channels(a, b); });
        run("flatten_patches", {a}, [=] { return flatten_patches(a); });
        run("global_avg_pool", {a}, [=] { return global_avg_pool(a); });
        run("rot90", {a}, [=] { return rot90(a, 1); });
        run("rot90/3", {a}, [=] { return rot90(a, 3); });
    }
    {
        // distinct values so max-pool argmax is stable under the FD step
        auto a = rand_tensor({2, 2, 4, 4}, rng);
        for (size_t i = 0; i < a.data().size(); ++i)
            a.data()[i] += 0.01 * static_cast<double>(i);
        run("max_pool2x2", {a}, [=] { return max_pool2x2(a); });
    }
    {
        auto x = rand_tensor({2, 3, 5, 5}, rng);
        auto w = rand_tensor({4, 3, 3, 3}, rng, -0.5, 0.5);
        auto b = rand_tensor({4}, rng, -0.2, 0.2);
        run("conv2d/pad1", {x, w, b}, [=] { return conv2d(x, w, b, 1, 1); });
        run("conv2d/stride2", {x, w, b}, [=] { return conv2d(x, w, b, 2, 1); });
    }
    {
        auto x = rand_tensor({5, 6}, rng);
        auto w = rand_tensor({3, 6}, rng);
        auto b = rand_tensor({3}, rng);
        run("linear", {x, w, b}, [=] { return linear(x, w, b); });
    }
    {
        auto x = rand_tensor({3, 4, 3, 3}, rng);
        auto g = rand_tensor({4}, rng, 0.5, 1.5);
        auto b = rand_tensor({4}, rng, -0.3, 0.3);
        auto rm = Tensor<double>::zeros({4});
        auto rv = Tensor<double>::filled({4}, 1.0);
        run("batch_norm2d/train", {x, g, b}, [=]() mutable {
            return batch_norm2d(x, g, b, rm, rv, true, /*update_stats=*/false);
        });
        auto rm3 = rand_tensor({4}, rng, -0.2, 0.2, false);
        auto rv3 = rand_tensor({4}, rng, 0.5, 1.5, false);
        run("batch_norm2d/eval", {x, g, b}, [=]() mutable {
            return batch_norm2d(x, g, b, rm3, rv3, false);
        });
    }
    {
        auto a = rand_tensor({4, 5}, rng, -2.0, 2.0);
        run("softmax", {a}, [=] { return softmax(a); });
        run("log_softmax", {a}, [=] { return log_softmax(a); });
    }
    {
        auto logits = rand_tensor({4, 5}, rng, -2.0, 2.0);
        std::vector<int64_t> labels = {0, 2, 4, 1};
        run_scalar("cross_entropy_sum", {logits},
                   [=] { return cross_entropy_sum(logits, labels); });
    }
    {
        auto pl = rand_tensor({3, 4}, rng, -1.0, 1.0);
        auto ql = rand_tensor({3, 4}, rng, -1.0, 1.0);
        run_scalar("kl_div_sum", {pl, ql},
                   [=] { return kl_div_sum(softmax(pl), softmax(ql)); });
    }
    return results;
}

}  // namespace amt::gradcheck
