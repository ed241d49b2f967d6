#pragma once

#include <array>
#include <limits>
#include <optional>

#include "amt/metric_heads.hpp"
#include "amt/optim.hpp"
#include "amt/tensor.hpp"

namespace amt {

/// Rows of Table 4: which prediction-fusion rule and which loss-fusion rule
/// the metric module uses.
enum class FusionVariant {
    individual_relation,
    individual_euclidean,
    individual_cosine,
    coupled,
    nmm,
    amm_v1,
    amm_v2,
    amm,
};

inline const char* to_string(FusionVariant v) {
    switch (v) {
        case FusionVariant::individual_relation: return "relation";
        case FusionVariant::individual_euclidean: return "euclidean";
        case FusionVariant::individual_cosine: return "cosine";
        case FusionVariant::coupled: return "coupled";
        case FusionVariant::nmm: return "nmm";
        case FusionVariant::amm_v1: return "amm-v1";
        case FusionVariant::amm_v2: return "amm-v2";
        case FusionVariant::amm: return "amm";
    }
    return "?";
}

inline FusionVariant parse_variant(const std::string& s) {
    for (FusionVariant v :
         {FusionVariant::individual_relation, FusionVariant::individual_euclidean,
          FusionVariant::individual_cosine, FusionVariant::coupled, FusionVariant::nmm,
          FusionVariant::amm_v1, FusionVariant::amm_v2, FusionVariant::amm})
        if (s == to_string(v)) return v;
    throw ContractViolation("unknown fusion variant '" + s + "'");
}

inline bool variant_uses_all_metrics(FusionVariant v) {
    return v != FusionVariant::individual_relation && v != FusionVariant::individual_euclidean &&
           v != FusionVariant::individual_cosine;
}
inline bool variant_has_u(FusionVariant v) {
    return v == FusionVariant::amm_v2 || v == FusionVariant::amm;
}
inline bool variant_has_theta(FusionVariant v) {
    return v == FusionVariant::amm_v1 || v == FusionVariant::amm_v2 || v == FusionVariant::amm;
}
inline std::optional<MetricId> individual_metric(FusionVariant v) {
    switch (v) {
        case FusionVariant::individual_relation: return MetricId::relation;
        case FusionVariant::individual_euclidean: return MetricId::euclidean;
        case FusionVariant::individual_cosine: return MetricId::cosine;
        default: return std::nullopt;
    }
}

/// Learnable fusion state: prediction weights u_j (residual, init 0) and
/// uncertainty scales parameterized as log theta^2 so positivity needs no
/// projection and the Eq.10 penalty is linear in the raw parameter.
template <class S>
struct FusionParams {
    std::array<Tensor<S>, kNumMetrics> u;
    std::array<Tensor<S>, kNumMetrics> log_theta_sq;
    double alpha = 0.1;

    FusionParams() {
        for (int j = 0; j < kNumMetrics; ++j) {
            u[j] = Tensor<S>::zeros({1}, true);
            log_theta_sq[j] = Tensor<S>::zeros({1}, true);
        }
    }

    Tensor<S>& u_of(MetricId m) { return u[static_cast<int>(m)]; }
    Tensor<S>& log_theta_of(MetricId m) { return log_theta_sq[static_cast<int>(m)]; }
    double theta_sq_value(MetricId m) const {
        return std::exp(static_cast<double>(log_theta_sq[static_cast<int>(m)].item()));
    }

    void register_params(std::vector<Parameter<S>>& out) {
        const char* names[3] = {"r", "e", "c"};
        for (int j = 0; j < kNumMetrics; ++j) {
            out.emplace_back(u[j], std::string("fusion.u_") + names[j], /*decay=*/false);
            out.emplace_back(log_theta_sq[j], std::string("fusion.log_theta_sq_") + names[j],
                             /*decay=*/false);
        }
    }
};

namespace detail {

template <class S>
Tensor<S> renormalize_rows(const Tensor<S>& raw) {
    auto z = sum_axis2d(raw, 1);
    for (int64_t i = 0; i < z.size(); ++i)
        require(z.at(i) > S(1e-8), "fusion: degenerate fused distribution, row " +
                                       std::to_string(i) + " sums to ~0");
    return div(raw, expand_cols(z, raw.dim(1)));
}

}  // namespace detail

/// Eq.7: unweighted sum of the three metric predictions, renormalized to a
/// distribution per query.
template <class S>
Tensor<S> nmm_fuse(const Tensor<S>& y_r, const Tensor<S>& y_e, const Tensor<S>& y_c) {
    check_same_shape(y_r, y_e, "nmm_fuse");
    check_same_shape(y_r, y_c, "nmm_fuse");
    return detail::renormalize_rows(add(add(y_r, y_e), y_c));
}

/// Eq.8: plain sum of the three metric losses.
template <class S>
Tensor<S> nmm_loss(const Tensor<S>& l_r, const Tensor<S>& l_e, const Tensor<S>& l_c) {
    return add(add(l_r, l_e), l_c);
}

/// Eq.9: residual-weighted prediction fusion sum_j (1+u_j) * Y_j,
/// renormalized per query.
template <class S>
Tensor<S> amm_fuse(const Tensor<S>& y_r, const Tensor<S>& y_e, const Tensor<S>& y_c,
                   FusionParams<S>& params) {
    check_same_shape(y_r, y_e, "amm_fuse");
    check_same_shape(y_r, y_c, "amm_fuse");
    auto w = [&](MetricId m) { return sadd(params.u_of(m), 1.0); };
    auto raw = add(add(scale_by(y_r, w(MetricId::relation)), scale_by(y_e, w(MetricId::euclidean))),
                   scale_by(y_c, w(MetricId::cosine)));
    return detail::renormalize_rows(raw);
}

/// Eq.5: cross-entropy of the fused distribution.
template <class S>
Tensor<S> fused_ce(const Tensor<S>& fused, const std::vector<int64_t>& labels) {
    return metric_loss(fused, labels);
}

/// Eq.10: sum_j ( L_j / theta_j^2 + log theta_j^2 ), theta^2 = exp(raw).
template <class S>
Tensor<S> uncertainty_fusion(const Tensor<S>& l_r, const Tensor<S>& l_e, const Tensor<S>& l_c,
                             FusionParams<S>& params) {
    auto term = [&](const Tensor<S>& l, MetricId m) {
        auto& lt = params.log_theta_of(m);
        return add(scale_by(l, exp_op(neg(lt))), lt);
    };
    return add(add(term(l_r, MetricId::relation), term(l_e, MetricId::euclidean)),
               term(l_c, MetricId::cosine));
}

/// Appendix Eq.15/16 oracle: the exact cross-entropy of the temperature-scaled
/// softmax, -log softmax(-d/theta^2)[label]. At theta^2 = 1 this is exactly
/// the Eq.3 path on logits.
template <class S>
Tensor<S> exact_scaled_likelihood_loss(const Tensor<S>& distances,
                                       const std::vector<int64_t>& labels, double theta_sq) {
    require(theta_sq > 0, "exact_scaled_likelihood_loss: theta^2 must be positive");
    auto logits = smul(neg(distances), 1.0 / theta_sq);
    return cross_entropy_sum(logits, labels);
}

/// Eq.11 regularizer: alpha * sum_j KL(Y_j || stopgrad(Y_fused)). The fused
/// prediction acts as the teacher; no gradient flows through it.
template <class S>
Tensor<S> kl_regularizer(const Tensor<S>& y_r, const Tensor<S>& y_e, const Tensor<S>& y_c,
                         const Tensor<S>& fused, double alpha) {
    auto teacher = detach(fused);
    auto kl = add(add(kl_div_sum(y_r, teacher), kl_div_sum(y_e, teacher)),
                  kl_div_sum(y_c, teacher));
    return smul(kl, alpha);
}

/// Per-metric head outputs feeding the fusion module. For individual variants
/// only the selected metric needs to be present.
template <class S>
struct MetricOutputs {
    std::array<Tensor<S>, kNumMetrics> preds;   // (n_q, N) probability rows
    std::array<Tensor<S>, kNumMetrics> losses;  // scalar L_j

    Tensor<S>& pred(MetricId m) { return preds[static_cast<int>(m)]; }
    Tensor<S>& loss(MetricId m) { return losses[static_cast<int>(m)]; }
    const Tensor<S>& pred(MetricId m) const { return preds[static_cast<int>(m)]; }
    const Tensor<S>& loss(MetricId m) const { return losses[static_cast<int>(m)]; }
};

template <class S>
struct LossBundle {
    Tensor<S> L_r, L_e, L_c, L_y, L_KL, L_M, L_G, L_R, L_KD, L_total;

    static double value_of(const Tensor<S>& t) {
        return t.defined() ? static_cast<double>(t.item())
                           : std::numeric_limits<double>::quiet_NaN();
    }
    void check_finite() const {
        for (const Tensor<S>* t : {&L_r, &L_e, &L_c, &L_y, &L_KL, &L_M, &L_G, &L_R, &L_KD, &L_total})
            if (t->defined())
                require(t->all_finite(), "loss bundle contains a non-finite value");
    }
};

template <class S>
struct FusionResult {
    Tensor<S> fused;        // the variant's prediction-fusion output
    LossBundle<S> losses;   // L_r/L_e/L_c passthrough, L_y, L_KL, L_M per variant
};

/// Dispatch one Table 4 row: selects the (Y rule, L_M rule) pair. L_y is
/// always computed from the fused distribution but never folded into L_M;
/// the training loop optimizes the two in separate phases.
template <class S>
FusionResult<S> metric_module_loss(FusionVariant variant, const MetricOutputs<S>& m,
                                   const std::vector<int64_t>& labels, FusionParams<S>& params) {
    FusionResult<S> out;
    auto need = [&](MetricId id) {
        require(m.pred(id).defined() && m.loss(id).defined(),
                std::string("metric_module_loss: missing ") + to_string(id) + " head output");
    };

    if (auto only = individual_metric(variant)) {
        need(*only);
        out.fused = m.pred(*only);
        out.losses.L_M = m.loss(*only);
    } else {
        for (MetricId id : {MetricId::relation, MetricId::euclidean, MetricId::cosine}) need(id);
        const auto& yr = m.pred(MetricId::relation);
        const auto& ye = m.pred(MetricId::euclidean);
        const auto& yc = m.pred(MetricId::cosine);
        const auto& lr = m.loss(MetricId::relation);
        const auto& le = m.loss(MetricId::euclidean);
        const auto& lc = m.loss(MetricId::cosine);

        out.fused = variant_has_u(variant) ? amm_fuse(yr, ye, yc, params) : nmm_fuse(yr, ye, yc);
        switch (variant) {
            case FusionVariant::coupled:
                out.losses.L_M = fused_ce(out.fused, labels);
                break;
            case FusionVariant::nmm:
                out.losses.L_M = nmm_loss(lr, le, lc);
                break;
            case FusionVariant::amm_v1:
            case FusionVariant::amm_v2:
                out.losses.L_M = uncertainty_fusion(lr, le, lc, params);
                break;
            case FusionVariant::amm: {
                auto g = uncertainty_fusion(lr, le, lc, params);
                if (params.alpha != 0.0) {
                    out.losses.L_KL = kl_regularizer(yr, ye, yc, out.fused, params.alpha);
                    out.losses.L_M = add(g, out.losses.L_KL);
                } else {
                    out.losses.L_M = g;
                }
                break;
            }
            default:
                throw ContractViolation("metric_module_loss: unknown variant");
        }
    }
    out.losses.L_r = m.losses[0];
    out.losses.L_e = m.losses[1];
    out.losses.L_c = m.losses[2];
    out.losses.L_y = fused_ce(out.fused, labels);
    return out;
}

}  // namespace amt
