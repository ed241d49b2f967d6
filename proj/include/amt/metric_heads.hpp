#pragma once

#include "amt/optim.hpp"
#include "amt/tensor.hpp"

namespace amt {

enum class MetricId { relation = 0, euclidean = 1, cosine = 2 };
constexpr int kNumMetrics = 3;

inline const char* to_string(MetricId m) {
    switch (m) {
        case MetricId::relation: return "relation";
        case MetricId::euclidean: return "euclidean";
        case MetricId::cosine: return "cosine";
    }
    return "?";
}

/// Learnable similarity module: two [conv3x3 -> bn -> relu] blocks
/// (2c->64, 64->64) over the channel concat of (prototype, query),
/// then GAP and a linear map to one relation score per pair.
template <class S>
class RelationHead {
public:
    static constexpr int64_t kHidden = 64;

    RelationHead() = default;
    RelationHead(int64_t feature_channels, Rng& rng) : in_ch_(2 * feature_channels) {
        auto he_conv = [&](int64_t out_c, int64_t in_c) {
            const double he = std::sqrt(2.0 / static_cast<double>(in_c * 9));
            std::vector<S> w(static_cast<size_t>(out_c * in_c * 9));
            for (auto& v : w) v = static_cast<S>(rng.normal(0.0, he));
            return Tensor<S>::from({out_c, in_c, 3, 3}, std::move(w), true);
        };
        conv1_w = he_conv(kHidden, in_ch_);
        conv1_b = Tensor<S>::zeros({kHidden}, true);
        bn1_gamma = Tensor<S>::filled({kHidden}, S(1), true);
        bn1_beta = Tensor<S>::zeros({kHidden}, true);
        bn1_mean = Tensor<S>::zeros({kHidden});
        bn1_var = Tensor<S>::filled({kHidden}, S(1));
        conv2_w = he_conv(kHidden, kHidden);
        conv2_b = Tensor<S>::zeros({kHidden}, true);
        bn2_gamma = Tensor<S>::filled({kHidden}, S(1), true);
        bn2_beta = Tensor<S>::zeros({kHidden}, true);
        bn2_mean = Tensor<S>::zeros({kHidden});
        bn2_var = Tensor<S>::filled({kHidden}, S(1));
        std::vector<S> fw(kHidden);
        for (auto& v : fw) v = static_cast<S>(rng.normal(0.0, std::sqrt(2.0 / kHidden)));
        fc_w = Tensor<S>::from({1, kHidden}, std::move(fw), true);
        fc_b = Tensor<S>::zeros({1}, true);
    }

    /// pairs: (n_pairs, 2c, h, w) -> relation scores (n_pairs).
    Tensor<S> scores(const Tensor<S>& pairs, bool training, bool update_stats) {
        require(pairs.dim(1) == in_ch_, "relation head: expected " + std::to_string(in_ch_) +
                                            " channels, got " + shape_str(pairs.shape()));
        auto y = conv2d(pairs, conv1_w, conv1_b, 1, 1);
        y = relu(batch_norm2d(y, bn1_gamma, bn1_beta, bn1_mean, bn1_var, training, update_stats));
        y = conv2d(y, conv2_w, conv2_b, 1, 1);
        y = relu(batch_norm2d(y, bn2_gamma, bn2_beta, bn2_mean, bn2_var, training, update_stats));
        auto pooled = global_avg_pool(y);            // (n_pairs, 64)
        auto s = linear(pooled, fc_w, fc_b);         // (n_pairs, 1)
        return reshape(s, {pairs.dim(0)});
    }

    void register_params(std::vector<Parameter<S>>& out, const std::string& prefix) {
        out.emplace_back(conv1_w, prefix + ".conv1.weight");
        out.emplace_back(conv1_b, prefix + ".conv1.bias");
        out.emplace_back(bn1_gamma, prefix + ".bn1_gamma");
        out.emplace_back(bn1_beta, prefix + ".bn1_beta");
        out.emplace_back(conv2_w, prefix + ".conv2.weight");
        out.emplace_back(conv2_b, prefix + ".conv2.bias");
        out.emplace_back(bn2_gamma, prefix + ".bn2_gamma");
        out.emplace_back(bn2_beta, prefix + ".bn2_beta");
        out.emplace_back(fc_w, prefix + ".fc.weight");
        out.emplace_back(fc_b, prefix + ".fc.bias");
    }
    void register_buffers(std::vector<std::pair<std::string, Tensor<S>*>>& out,
                          const std::string& prefix) {
        out.emplace_back(prefix + ".bn1_mean", &bn1_mean);
        out.emplace_back(prefix + ".bn1_var", &bn1_var);
        out.emplace_back(prefix + ".bn2_mean", &bn2_mean);
        out.emplace_back(prefix + ".bn2_var", &bn2_var);
    }

    Tensor<S> conv1_w, conv1_b, bn1_gamma, bn1_beta, bn1_mean, bn1_var;
    Tensor<S> conv2_w, conv2_b, bn2_gamma, bn2_beta, bn2_mean, bn2_var;
    Tensor<S> fc_w, fc_b;

private:
    int64_t in_ch_ = 128;
};

/// Squared Euclidean distance between pooled vectors, divided by the channel
/// count so exp(-d) stays well scaled. rows(a) x rows(b) -> (m, n).
template <class S>
Tensor<S> euclidean_distances(const Tensor<S>& a, const Tensor<S>& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(1),
            "euclidean_distances: shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    return smul(pairwise_sqeuclidean(a, b), 1.0 / static_cast<double>(a.dim(1)));
}

/// -gamma * cos(a_i, b_j); smaller means more similar, uniform with exp(-d).
template <class S>
Tensor<S> cosine_distances(const Tensor<S>& a, const Tensor<S>& b, double gamma) {
    require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(1),
            "cosine_distances: shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    auto normalize = [](const Tensor<S>& x, const char* which) {
        auto norms = sqrt_op(sum_axis2d(square(x), 1));
        for (int64_t i = 0; i < norms.size(); ++i)
            require(norms.at(i) >= S(1e-8), std::string("cosine_distances: ") + which + " row " +
                                                std::to_string(i) + " has near-zero norm");
        return div(x, expand_cols(norms, x.dim(1)));
    };
    auto cos = matmul(normalize(a, "query"), transpose2d(normalize(b, "prototype")));
    return smul(cos, -gamma);
}

/// Negated relation scores for all (query, prototype) pairs.
/// q_maps: (m, c, h, w), p_maps: (n, c, h, w) -> (m, n).
template <class S>
Tensor<S> relation_distances(const Tensor<S>& q_maps, const Tensor<S>& p_maps,
                             RelationHead<S>& head, bool training, bool update_stats) {
    require(q_maps.shape().size() == 4 && p_maps.shape().size() == 4 &&
                Shape(q_maps.shape().begin() + 1, q_maps.shape().end()) ==
                    Shape(p_maps.shape().begin() + 1, p_maps.shape().end()),
            "relation_distances: feature shape mismatch " + shape_str(q_maps.shape()) + " vs " +
                shape_str(p_maps.shape()));
    const int64_t m = q_maps.dim(0), n = p_maps.dim(0);
    // pair (i, k) lands at row i*n + k
    auto q_rep = repeat_interleave_batch(q_maps, n);
    auto p_rep = repeat_batch(p_maps, m);
    auto pairs = concat_channels(p_rep, q_rep);
    auto s = head.scores(pairs, training, update_stats);
    return neg(reshape(s, {m, n}));
}

/// Probability rows softmax(-d_j(Q, P^k)) over the N ways.
template <class S>
Tensor<S> predict_from_distances(const Tensor<S>& distances) {
    require(distances.dim(1) >= 2, "metric_predict: need at least 2 ways");
    return softmax(neg(distances));
}

/// Distance matrix for one metric on the global (pooled) path.
template <class S>
Tensor<S> metric_distances(MetricId metric, const Tensor<S>& q_maps, const Tensor<S>& p_maps,
                           RelationHead<S>* head, double gamma, bool training = false,
                           bool update_stats = false) {
    switch (metric) {
        case MetricId::euclidean:
            return euclidean_distances(global_avg_pool(q_maps), global_avg_pool(p_maps));
        case MetricId::cosine:
            return cosine_distances(global_avg_pool(q_maps), global_avg_pool(p_maps), gamma);
        case MetricId::relation:
            require(head != nullptr, "metric_distances: relation metric needs a head");
            return relation_distances(q_maps, p_maps, *head, training, update_stats);
    }
    throw ContractViolation("metric_distances: unknown metric");
}

template <class S>
Tensor<S> metric_predict(MetricId metric, const Tensor<S>& q_maps, const Tensor<S>& p_maps,
                         RelationHead<S>* head, double gamma, bool training = false,
                         bool update_stats = false) {
    return predict_from_distances(
        metric_distances(metric, q_maps, p_maps, head, gamma, training, update_stats));
}

enum class Reduction { sum, mean };

/// Metric classification loss: -sum_i log y_hat(y_i | Q_i). The paper's sum
/// convention is canonical; mean is exposed for reporting.
template <class S>
Tensor<S> metric_loss(const Tensor<S>& probs, const std::vector<int64_t>& labels,
                      Reduction red = Reduction::sum) {
    for (int64_t y : labels)
        require(y >= 0 && y < probs.dim(1), "metric_loss: label " + std::to_string(y) +
                                                " out of [0," + std::to_string(probs.dim(1)) + ")");
    auto loss = cross_entropy_from_probs_sum(probs, labels);
    if (red == Reduction::mean) loss = smul(loss, 1.0 / static_cast<double>(labels.size()));
    return loss;
}

/// Per-position predictions: rows are (query, patch) pairs in query-major
/// order, classified against GAP'd prototypes.
template <class S>
struct PatchPredictions {
    Tensor<S> probs;  // (n_q * h * w, N)
    int64_t n_queries = 0, patches = 0;
};

template <class S>
PatchPredictions<S> patchwise_predict(MetricId metric, const Tensor<S>& q_maps,
                                      const Tensor<S>& p_maps, RelationHead<S>* head,
                                      double gamma, bool training = false,
                                      bool update_stats = false) {
    const int64_t n_q = q_maps.dim(0), hw = q_maps.dim(2) * q_maps.dim(3);
    auto patch_rows = flatten_patches(q_maps);   // (n_q*hw, c)
    auto proto_rows = global_avg_pool(p_maps);   // (N, c)
    Tensor<S> d;
    switch (metric) {
        case MetricId::euclidean: d = euclidean_distances(patch_rows, proto_rows); break;
        case MetricId::cosine: d = cosine_distances(patch_rows, proto_rows, gamma); break;
        case MetricId::relation: {
            require(head != nullptr, "patchwise_predict: relation metric needs a head");
            const int64_t c = q_maps.dim(1);
            auto q11 = reshape(patch_rows, {n_q * hw, c, 1, 1});
            auto p11 = reshape(proto_rows, {p_maps.dim(0), c, 1, 1});
            d = relation_distances(q11, p11, *head, training, update_stats);
            break;
        }
    }
    return {predict_from_distances(d), n_q, hw};
}

/// Patch-wise loss: -sum_queries sum_patches log y_hat(y | Q_n).
template <class S>
Tensor<S> patchwise_metric_loss(const PatchPredictions<S>& preds,
                                const std::vector<int64_t>& labels) {
    require(static_cast<int64_t>(labels.size()) == preds.n_queries,
            "patchwise_metric_loss: label count mismatch");
    std::vector<int64_t> tiled;
    tiled.reserve(static_cast<size_t>(preds.n_queries * preds.patches));
    for (int64_t i = 0; i < preds.n_queries; ++i)
        for (int64_t p = 0; p < preds.patches; ++p) tiled.push_back(labels[i]);
    return metric_loss(preds.probs, tiled);
}

}  // namespace amt
