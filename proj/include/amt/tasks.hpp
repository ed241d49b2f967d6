#pragma once

#include "amt/fusion.hpp"
#include "amt/optim.hpp"
#include "amt/tensor.hpp"

namespace amt {

/// Rotated query batch: blocks [0deg | 90deg | 180deg | 270deg], each of the
/// original n_q queries, so each rotation label appears exactly n_q times.
template <class S>
struct RotatedQueries {
    Tensor<S> images;                     // (4*n_q, c, h, w)
    std::vector<int64_t> rotation_labels; // block index 0..3
};

template <class S>
RotatedQueries<S> rotate_queries(const Tensor<S>& queries) {
    check_nchw(queries, "rotate_queries");
    require(queries.dim(2) == queries.dim(3),
            "rotate_queries: images must be square, got " + shape_str(queries.shape()));
    const int64_t n_q = queries.dim(0);
    std::vector<Tensor<S>> blocks;
    RotatedQueries<S> out;
    for (int k = 0; k < 4; ++k) {
        blocks.push_back(rot90(queries, k));
        for (int64_t i = 0; i < n_q; ++i) out.rotation_labels.push_back(k);
    }
    out.images = concat_batch(blocks);
    return out;
}

/// Few-shot / global labels for the rotated copies: each block repeats the
/// original labels (rotation-invariant supervision).
inline std::vector<int64_t> tile_labels(const std::vector<int64_t>& labels, int64_t times) {
    std::vector<int64_t> out;
    out.reserve(labels.size() * static_cast<size_t>(times));
    for (int64_t t = 0; t < times; ++t) out.insert(out.end(), labels.begin(), labels.end());
    return out;
}

/// Linear map applied per spatial patch (Appendix's W), for the Global
/// (C-way) and Rotation (4-way) classifiers.
template <class S>
struct ClassifierHead {
    Tensor<S> weight, bias;  // (classes, c), (classes)

    ClassifierHead() = default;
    ClassifierHead(int64_t classes, int64_t channels, Rng& rng) {
        std::vector<S> w(static_cast<size_t>(classes * channels));
        const double he = std::sqrt(2.0 / static_cast<double>(channels));
        for (auto& v : w) v = static_cast<S>(rng.normal(0.0, he));
        weight = Tensor<S>::from({classes, channels}, std::move(w), true);
        bias = Tensor<S>::zeros({classes}, true);
    }

    int64_t classes() const { return weight.dim(0); }

    /// (n, c, h, w) -> logits (n*h*w, classes)
    Tensor<S> patch_logits(const Tensor<S>& features) const {
        return linear(flatten_patches(features), weight, bias);
    }

    void register_params(std::vector<Parameter<S>>& out, const std::string& prefix) {
        out.emplace_back(weight, prefix + ".weight");
        out.emplace_back(bias, prefix + ".bias");
    }
};

/// Patch-wise cross entropy of a linear head over feature maps:
/// -sum_queries sum_patches log softmax(W Q_n)[label].
template <class S>
Tensor<S> patchwise_head_loss(const ClassifierHead<S>& head, const Tensor<S>& features,
                              const std::vector<int64_t>& labels) {
    require(features.dim(0) == static_cast<int64_t>(labels.size()),
            "patchwise_head_loss: label count mismatch");
    const int64_t hw = features.dim(2) * features.dim(3);
    std::vector<int64_t> tiled;
    tiled.reserve(labels.size() * static_cast<size_t>(hw));
    for (int64_t lab : labels) {
        require(lab >= 0 && lab < head.classes(),
                "patchwise_head_loss: label " + std::to_string(lab) + " out of [0," +
                    std::to_string(head.classes()) + ")");
        for (int64_t p = 0; p < hw; ++p) tiled.push_back(lab);
    }
    return cross_entropy_sum(head.patch_logits(features), tiled);
}

template <class S>
Tensor<S> global_loss(const ClassifierHead<S>& head, const Tensor<S>& features,
                      const std::vector<int64_t>& global_labels) {
    return patchwise_head_loss(head, features, global_labels);
}

template <class S>
Tensor<S> rotation_loss(const ClassifierHead<S>& head, const Tensor<S>& features,
                        const std::vector<int64_t>& rotation_labels) {
    require(head.classes() == 4, "rotation_loss: head must be 4-way");
    return patchwise_head_loss(head, features, rotation_labels);
}

/// Eq.13 parameters: learnable auxiliary temperatures plus the base bias
/// lambda that keeps the auxiliary weights above the fixed w_M = 1/2.
template <class S>
struct GalParams {
    Tensor<S> log_theta_sq_G, log_theta_sq_R;
    double lambda = 0.5;

    GalParams() {
        log_theta_sq_G = Tensor<S>::zeros({1}, true);
        log_theta_sq_R = Tensor<S>::zeros({1}, true);
    }

    double w_value(bool global) const {
        const auto& lt = global ? log_theta_sq_G : log_theta_sq_R;
        return std::exp(-static_cast<double>(lt.item())) + lambda;
    }

    void register_params(std::vector<Parameter<S>>& out) {
        out.emplace_back(log_theta_sq_G, "gal.log_theta_sq_G", /*decay=*/false);
        out.emplace_back(log_theta_sq_R, "gal.log_theta_sq_R", /*decay=*/false);
    }
};

/// Eq.13: L = 1/2 L_M + sum_z ( w_z L_z + log(1/w_z) ), w_z = 1/theta_z^2 + lambda.
/// Either auxiliary loss may be absent (undefined tensor); with both absent
/// this reduces exactly to 1/2 L_M.
template <class S>
Tensor<S> gal_loss(const Tensor<S>& l_m, const Tensor<S>& l_g, const Tensor<S>& l_r,
                   GalParams<S>& params) {
    auto total = smul(l_m, 0.5);
    auto aux = [&](const Tensor<S>& l_z, Tensor<S>& log_theta) {
        auto w = sadd(exp_op(neg(log_theta)), params.lambda);
        return sub(scale_by(l_z, w), log_op(w));
    };
    if (l_g.defined()) total = add(total, aux(l_g, params.log_theta_sq_G));
    if (l_r.defined()) total = add(total, aux(l_r, params.log_theta_sq_R));
    return total;
}

/// Teacher-side distributions for Eq.14, produced in eval mode and detached.
template <class S>
struct KdTargets {
    Tensor<S> fused;                              // teacher Y^t (n_q, N)
    std::array<Tensor<S>, kNumMetrics> metric;    // unused fields may stay undefined
    Tensor<S> global_probs;                       // (rows, C) patch-wise
    Tensor<S> rotation_probs;                     // (rows, 4) patch-wise
};

/// Eq.14 distillation term:
/// sum_j KL(Y_j || Y^t_fused) + sum_z KL(Y_z || Y^t_z), scaled by beta.
/// Teacher tensors must be detached; class-count mismatches are rejected.
template <class S>
Tensor<S> kd_loss(const MetricOutputs<S>& student, const Tensor<S>& student_global_probs,
                  const Tensor<S>& student_rotation_probs, const KdTargets<S>& teacher,
                  double beta) {
    require(beta >= 0, "kd_loss: beta must be nonnegative");
    auto teacher_fused = detach(teacher.fused);
    Tensor<S> total;
    for (MetricId id : {MetricId::relation, MetricId::euclidean, MetricId::cosine}) {
        const auto& y = student.pred(id);
        require(y.defined(), "kd_loss: student is missing a metric prediction");
        require(y.shape() == teacher_fused.shape(),
                "kd_loss: student/teacher way count mismatch " + shape_str(y.shape()) + " vs " +
                    shape_str(teacher_fused.shape()));
        auto term = kl_div_sum(y, teacher_fused);
        total = total.defined() ? add(total, term) : term;
    }
    auto task_term = [&](const Tensor<S>& s, const Tensor<S>& t, const char* what) {
        require(s.shape() == t.shape(), std::string("kd_loss: ") + what +
                                            " class count mismatch " + shape_str(s.shape()) +
                                            " vs " + shape_str(t.shape()));
        return kl_div_sum(s, detach(t));
    };
    if (student_global_probs.defined() && teacher.global_probs.defined())
        total = add(total, task_term(student_global_probs, teacher.global_probs, "global"));
    if (student_rotation_probs.defined() && teacher.rotation_probs.defined())
        total = add(total, task_term(student_rotation_probs, teacher.rotation_probs, "rotation"));
    return smul(total, beta);
}

}  // namespace amt
