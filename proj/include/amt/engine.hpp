#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "amt/data.hpp"
#include "amt/model.hpp"

namespace amt {

struct EpisodeSpec {
    int64_t ways = 5, shots = 1, queries = 15;  // N, K, T

    int64_t n_support() const { return ways * shots; }
    int64_t n_query() const { return ways * queries; }

    void validate() const {
        require(ways >= 2 && shots >= 1 && queries >= 1,
                "EpisodeSpec: need N >= 2, K >= 1, T >= 1");
    }
    void validate_against(const Dataset& ds) const {
        validate();
        require(ds.n_classes() >= ways, "episode sampler: dataset has " +
                                            std::to_string(ds.n_classes()) + " classes, need " +
                                            std::to_string(ways));
        for (const auto& c : ds.classes)
            require(static_cast<int64_t>(c.samples.size()) >= shots + queries,
                    "episode sampler: class " + std::to_string(c.class_id) + " has " +
                        std::to_string(c.samples.size()) + " samples, need " +
                        std::to_string(shots + queries));
    }
};

struct EpisodeSample {
    std::vector<float> pixels;
    int64_t fewshot_label = 0;  // way index, 0..N-1
    int64_t global_label = 0;   // class index within the split
    int64_t sample_id = 0;
};

struct Episode {
    EpisodeSpec spec;
    std::vector<EpisodeSample> support, query;  // way-major order
};

/// N classes without replacement, then K+T samples per class without
/// replacement; support and query stay disjoint by construction. Augments
/// only when an AugmentConfig is supplied (training path).
inline Episode sample_episode(const Dataset& ds, const EpisodeSpec& spec, Rng& rng,
                              const AugmentConfig* aug = nullptr) {
    spec.validate();
    require(ds.n_classes() >= spec.ways, "sample_episode: dataset has " +
                                             std::to_string(ds.n_classes()) +
                                             " classes, need " + std::to_string(spec.ways));
    Episode ep;
    ep.spec = spec;
    const auto class_pick = rng.sample_without_replacement(ds.n_classes(), spec.ways);
    for (int64_t way = 0; way < spec.ways; ++way) {
        const auto& cls = ds.classes[static_cast<size_t>(class_pick[way])];
        const int64_t have = static_cast<int64_t>(cls.samples.size());
        require(have >= spec.shots + spec.queries,
                "sample_episode: class " + std::to_string(cls.class_id) + " has " +
                    std::to_string(have) + " samples, need " +
                    std::to_string(spec.shots + spec.queries));
        const auto rows = rng.sample_without_replacement(have, spec.shots + spec.queries);
        for (int64_t i = 0; i < spec.shots + spec.queries; ++i) {
            const auto& src = cls.samples[static_cast<size_t>(rows[i])];
            EpisodeSample s;
            s.pixels = aug ? augment_sample(src.pixels, ds.channels, ds.height, ds.width, *aug, rng)
                           : src.pixels;
            s.fewshot_label = way;
            s.global_label = class_pick[way];
            s.sample_id = src.sample_id;
            (i < spec.shots ? ep.support : ep.query).push_back(std::move(s));
        }
    }
    return ep;
}

template <class S>
Tensor<S> to_batch(const std::vector<EpisodeSample>& samples, int64_t c, int64_t h, int64_t w) {
    std::vector<S> data;
    data.reserve(samples.size() * static_cast<size_t>(c * h * w));
    for (const auto& s : samples) data.insert(data.end(), s.pixels.begin(), s.pixels.end());
    return Tensor<S>::from({static_cast<int64_t>(samples.size()), c, h, w}, std::move(data));
}

inline std::vector<int64_t> fewshot_labels(const std::vector<EpisodeSample>& v) {
    std::vector<int64_t> out;
    for (const auto& s : v) out.push_back(s.fewshot_label);
    return out;
}
inline std::vector<int64_t> global_labels(const std::vector<EpisodeSample>& v) {
    std::vector<int64_t> out;
    for (const auto& s : v) out.push_back(s.global_label);
    return out;
}

struct KdConfig {
    double beta = 0.0;
    std::string teacher;  // checkpoint path, empty = no distillation
};

struct TrainConfig {
    int64_t epochs = 6;
    int64_t episodes_per_epoch = 100;
    EpisodeSpec episode;
    SgdConfig net_opt{0.05, 5e-4, 0.9};
    SgdConfig u_opt{0.05, 0.0, 0.0};
    bool global_task = true;
    bool rotation_task = true;
    bool patchwise = true;
    bool augment = true;
    int64_t phase2_every = 1;  // Algorithm 1 runs the u phase every iteration
    AugmentConfig aug;
    KdConfig kd;
    uint64_t seed = 1;
};

/// Per-metric predictions, losses and the fused result for one episode pass.
template <class S>
struct EpisodeForward {
    Tensor<S> query_feats, prototypes;
    MetricOutputs<S> metric;
    FusionResult<S> fusion;
    Tensor<S> global_probs, rotation_probs;  // patch-wise rows, when requested
};

namespace detail {

/// Shared forward: embed support+queries in one batch, build prototypes and
/// the requested head outputs. In training mode the relation head updates its
/// batch-norm stats only on the global path (the path used at inference).
template <class S>
EpisodeForward<S> forward_episode(AmtNet<S>& model, const Tensor<S>& support,
                                  const Tensor<S>& queries,
                                  const std::vector<int64_t>& support_ways, int64_t n_ways,
                                  const std::vector<int64_t>& query_ways, bool training,
                                  bool patchwise_losses, bool want_losses,
                                  bool want_task_probs) {
    EpisodeForward<S> out;
    const int64_t n_s = support.dim(0);
    auto feats = model.embed(concat_batch<S>({support, queries}), training, training);
    auto sup_feats = slice_batch(feats, 0, n_s);
    out.query_feats = slice_batch(feats, n_s, feats.dim(0));
    out.prototypes = build_prototypes(sup_feats, support_ways, n_ways);

    const auto variant = model.config().variant;
    const double gamma = model.config().cosine_gamma;
    std::vector<MetricId> metrics;
    if (auto only = individual_metric(variant))
        metrics = {*only};
    else
        metrics = {MetricId::relation, MetricId::euclidean, MetricId::cosine};

    for (MetricId id : metrics) {
        out.metric.pred(id) = metric_predict(id, out.query_feats, out.prototypes,
                                             &model.relation, gamma, training, training);
        if (!want_losses) continue;
        if (patchwise_losses) {
            auto pp = patchwise_predict(id, out.query_feats, out.prototypes, &model.relation,
                                        gamma, training, /*update_stats=*/false);
            out.metric.loss(id) = patchwise_metric_loss(pp, query_ways);
        } else {
            out.metric.loss(id) = metric_loss(out.metric.pred(id), query_ways);
        }
    }
    if (want_task_probs) {
        out.global_probs = softmax(model.global_head.patch_logits(out.query_feats));
        out.rotation_probs = softmax(model.rotation_head.patch_logits(out.query_feats));
    }
    return out;
}

template <class S>
KdTargets<S> teacher_targets(AmtNet<S>& teacher, const Tensor<S>& support,
                             const Tensor<S>& queries, const std::vector<int64_t>& support_ways,
                             int64_t n_ways, bool global_task, bool rotation_task) {
    NoGradGuard ng;
    KdTargets<S> t;
    auto fwd = forward_episode(teacher, support, queries, support_ways, n_ways, {},
                               /*training=*/false, /*patchwise_losses=*/false,
                               /*want_losses=*/false, /*want_task_probs=*/true);
    // the teacher's overall prediction comes from its own fusion rule (Eq.9)
    if (individual_metric(teacher.config().variant)) {
        t.fused = fwd.metric.pred(*individual_metric(teacher.config().variant));
    } else {
        t.fused = amm_fuse(fwd.metric.pred(MetricId::relation),
                           fwd.metric.pred(MetricId::euclidean),
                           fwd.metric.pred(MetricId::cosine), teacher.fusion);
    }
    t.metric = fwd.metric.preds;
    if (global_task) t.global_probs = fwd.global_probs;
    if (rotation_task) t.rotation_probs = fwd.rotation_probs;
    return t;
}

/// Forward topological search for the first node whose own data is
/// non-finite; used for the train-time NaN diagnostic.
template <class S>
std::string first_nonfinite_node(const Tensor<S>& t) {
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<std::pair<Node<S>*, size_t>> stack{{t.node().get(), 0}};
    seen.insert(t.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<S>* p = node->parents[idx++].get();
            if (!seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node<S>* n : order) {  // parents precede children in post-order
        for (S v : n->data)
            if (!std::isfinite(static_cast<double>(v)))
                return n->name.empty() ? "<unnamed>" : n->name;
    }
    return "";
}

}  // namespace detail

/// Phase 1 of Algorithm 1: rotate the queries, minimize the overall loss
/// (Eq.13, optionally + beta * Eq.14) with SGD over everything except u.
template <class S>
LossBundle<S> train_step_phase1(AmtNet<S>& model, const Episode& episode,
                                const TrainConfig& cfg, SgdOptimizer<S>& net_opt,
                                AmtNet<S>* teacher = nullptr) {
    const auto& mc = model.config();
    auto support = to_batch<S>(episode.support, mc.in_channels, mc.image_size, mc.image_size);
    auto queries = to_batch<S>(episode.query, mc.in_channels, mc.image_size, mc.image_size);
    const auto support_ways = fewshot_labels(episode.support);

    auto rot = rotate_queries(queries);
    const auto query_ways = tile_labels(fewshot_labels(episode.query), 4);
    const auto query_globals = tile_labels(global_labels(episode.query), 4);

    // Both sides of the KL terms in Eq.14 are inference-time distributions:
    // the teacher runs frozen in eval mode and the student's KD-facing
    // forward also uses eval-mode batch norm (with gradients). Both run
    // before the training forward mutates the student's running stats, so
    // self-distillation from identical weights starts at exactly zero.
    const bool with_kd = teacher != nullptr && cfg.kd.beta > 0;
    Tensor<S> l_kd;
    if (with_kd) {
        auto targets = detail::teacher_targets(*teacher, support, rot.images, support_ways,
                                               episode.spec.ways, cfg.global_task,
                                               cfg.rotation_task);
        auto kd_view = detail::forward_episode(model, support, rot.images, support_ways,
                                               episode.spec.ways, query_ways,
                                               /*training=*/false, false,
                                               /*want_losses=*/false, /*want_task_probs=*/true);
        l_kd = kd_loss(kd_view.metric, cfg.global_task ? kd_view.global_probs : Tensor<S>(),
                       cfg.rotation_task ? kd_view.rotation_probs : Tensor<S>(), targets,
                       cfg.kd.beta);
    }

    auto fwd = detail::forward_episode(model, support, rot.images, support_ways,
                                       episode.spec.ways, query_ways, /*training=*/true,
                                       cfg.patchwise, /*want_losses=*/true,
                                       /*want_task_probs=*/false);
    auto fusion = metric_module_loss(mc.variant, fwd.metric, query_ways, model.fusion);
    LossBundle<S>& bundle = fusion.losses;

    if (cfg.global_task)
        bundle.L_G = global_loss(model.global_head, fwd.query_feats, query_globals);
    if (cfg.rotation_task)
        bundle.L_R = rotation_loss(model.rotation_head, fwd.query_feats, rot.rotation_labels);
    auto total = gal_loss(bundle.L_M, bundle.L_G, bundle.L_R, model.gal);
    if (with_kd) {
        bundle.L_KD = l_kd;
        total = add(total, bundle.L_KD);
    }
    bundle.L_total = total;

    if (!total.all_finite()) {
        const auto culprit = detail::first_nonfinite_node(total);
        throw ContractViolation("train_step: non-finite loss; first non-finite node: " + culprit);
    }
    total.backward();

    auto phase1 = model.phase1_params(cfg.global_task, cfg.rotation_task);
    for (auto* p : phase1)
        require(p->tensor.grad().empty() ||
                    std::all_of(p->tensor.grad().begin(), p->tensor.grad().end(),
                                [](S v) { return std::isfinite(static_cast<double>(v)); }),
                "train_step: non-finite gradient on '" + p->name + "'");
    net_opt.step(phase1);
    return bundle;
}

/// Phase 2 of Algorithm 1: everything except {u_r, u_e, u_c} stays frozen,
/// the fused prediction and L_y (Eq.5) are recomputed on a fresh forward pass
/// (the network just changed), and SGD updates u alone. The frozen network
/// runs in eval mode outside the graph, so u is the only node with gradient.
template <class S>
void train_step_phase2(AmtNet<S>& model, const Episode& episode, const TrainConfig& cfg,
                       SgdOptimizer<S>& u_opt) {
    auto phase2 = model.phase2_params();
    if (phase2.empty()) return;  // the variant's prediction rule has no u

    const auto& mc = model.config();
    auto support = to_batch<S>(episode.support, mc.in_channels, mc.image_size, mc.image_size);
    auto queries = to_batch<S>(episode.query, mc.in_channels, mc.image_size, mc.image_size);
    auto rot = rotate_queries(queries);
    const auto query_ways = tile_labels(fewshot_labels(episode.query), 4);

    MetricOutputs<S> preds;
    {
        NoGradGuard ng;
        auto f2 = detail::forward_episode(model, support, rot.images,
                                          fewshot_labels(episode.support), episode.spec.ways,
                                          query_ways, /*training=*/false, false,
                                          /*want_losses=*/false, false);
        preds = f2.metric;
    }
    auto fused = amm_fuse(preds.pred(MetricId::relation), preds.pred(MetricId::euclidean),
                          preds.pred(MetricId::cosine), model.fusion);
    auto l_y = fused_ce(fused, query_ways);
    l_y.backward();
    u_opt.step(phase2);
}

/// One full Algorithm 1 iteration.
template <class S>
LossBundle<S> train_step(AmtNet<S>& model, const Episode& episode, const TrainConfig& cfg,
                         SgdOptimizer<S>& net_opt, SgdOptimizer<S>& u_opt,
                         AmtNet<S>* teacher = nullptr, bool run_phase2 = true) {
    auto bundle = train_step_phase1(model, episode, cfg, net_opt, teacher);
    if (run_phase2) train_step_phase2(model, episode, cfg, u_opt);
    return bundle;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
    struct Entry {
        double mean = 0, ci95 = 0;
    };
    int64_t n_episodes = 0;
    Entry merged, relation, euclidean, cosine;
    Entry headline;  // the trained variant's own accuracy

    static Entry summarize(const std::vector<double>& accs) {
        Entry e;
        const double n = static_cast<double>(accs.size());
        if (accs.empty()) return e;
        double s = 0;
        for (double a : accs) s += a;
        e.mean = 100.0 * s / n;
        if (accs.size() > 1) {
            double varsum = 0;
            for (double a : accs) varsum += (a - s / n) * (a - s / n);
            e.ci95 = 100.0 * 1.96 * std::sqrt(varsum / n) / std::sqrt(n);
        }
        return e;  // single episode: ci95 = 0 by convention
    }

    std::string text() const {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "accuracy %.2f ± %.2f (%lld episodes)\n"
                      "  merged    %.2f ± %.2f\n  relation  %.2f ± %.2f\n"
                      "  euclidean %.2f ± %.2f\n  cosine    %.2f ± %.2f\n",
                      headline.mean, headline.ci95, static_cast<long long>(n_episodes),
                      merged.mean, merged.ci95, relation.mean, relation.ci95, euclidean.mean,
                      euclidean.ci95, cosine.mean, cosine.ci95);
        return buf;
    }

    void write_csv(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw std::runtime_error("EvalReport: cannot write '" + path + "'");
        out << "prediction,mean_accuracy,ci95,n_episodes\n";
        char buf[128];
        auto row = [&](const char* name, const Entry& e) {
            std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%lld\n", name, e.mean, e.ci95,
                          static_cast<long long>(n_episodes));
            out << buf;
        };
        row("headline", headline);
        row("merged", merged);
        row("relation", relation);
        row("euclidean", euclidean);
        row("cosine", cosine);
    }
};

namespace detail {

struct EpisodeAccuracies {
    double merged = 0, relation = 0, euclidean = 0, cosine = 0;
};

template <class S>
EpisodeAccuracies eval_episode(AmtNet<S>& model, const Dataset& ds, const EpisodeSpec& spec,
                               uint64_t episode_seed) {
    NoGradGuard ng;
    Rng rng(episode_seed);
    auto episode = sample_episode(ds, spec, rng, nullptr);
    const auto& mc = model.config();
    auto support = to_batch<S>(episode.support, mc.in_channels, mc.image_size, mc.image_size);
    auto queries = to_batch<S>(episode.query, mc.in_channels, mc.image_size, mc.image_size);
    auto fwd = forward_episode(model, support, queries, fewshot_labels(episode.support),
                               spec.ways, {}, /*training=*/false, false, /*want_losses=*/false,
                               false);
    // evaluation always reports every metric plus the Eq.9 fusion
    MetricOutputs<S> m = fwd.metric;
    for (MetricId id : {MetricId::relation, MetricId::euclidean, MetricId::cosine})
        if (!m.pred(id).defined())
            m.pred(id) = metric_predict(id, fwd.query_feats, fwd.prototypes, &model.relation,
                                        mc.cosine_gamma, false, false);
    auto fused = amm_fuse(m.pred(MetricId::relation), m.pred(MetricId::euclidean),
                          m.pred(MetricId::cosine), model.fusion);

    const auto labels = fewshot_labels(episode.query);
    auto acc_of = [&](const Tensor<S>& probs) {
        int64_t hits = 0;
        const int64_t n = probs.dim(0), k = probs.dim(1);
        for (int64_t i = 0; i < n; ++i) {
            int64_t best = 0;
            for (int64_t j = 1; j < k; ++j)
                if (probs.at(i * k + j) > probs.at(i * k + best)) best = j;
            if (best == labels[static_cast<size_t>(i)]) ++hits;
        }
        return static_cast<double>(hits) / static_cast<double>(n);
    };
    EpisodeAccuracies acc;
    acc.merged = acc_of(fused);
    acc.relation = acc_of(m.pred(MetricId::relation));
    acc.euclidean = acc_of(m.pred(MetricId::euclidean));
    acc.cosine = acc_of(m.pred(MetricId::cosine));
    return acc;
}

}  // namespace detail

/// Inductive evaluation: no rotation, fused prediction via Eq.9, mean
/// accuracy with 1.96 * stddev / sqrt(n). Episodes may be spread over worker
/// threads; results are merged by episode index, so the worker count never
/// changes the report.
template <class S>
EvalReport evaluate(AmtNet<S>& model, const Dataset& ds, const EpisodeSpec& spec,
                    int64_t n_episodes, uint64_t seed, int workers = 1) {
    spec.validate_against(ds);
    require(n_episodes >= 1, "evaluate: need at least one episode");
    std::vector<detail::EpisodeAccuracies> acc(static_cast<size_t>(n_episodes));

    workers = std::max(1, workers);
    auto run_range = [&](int w) {
        for (int64_t i = w; i < n_episodes; i += workers)
            acc[static_cast<size_t>(i)] =
                detail::eval_episode(model, ds, spec, Rng::mix(seed, 0xE7A1 + static_cast<uint64_t>(i)));
    };
    if (workers == 1) {
        run_range(0);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(run_range, w);
        for (auto& t : pool) t.join();
    }

    auto collect = [&](auto proj) {
        std::vector<double> v;
        v.reserve(acc.size());
        for (const auto& a : acc) v.push_back(proj(a));
        return EvalReport::summarize(v);
    };
    EvalReport rep;
    rep.n_episodes = n_episodes;
    rep.merged = collect([](const auto& a) { return a.merged; });
    rep.relation = collect([](const auto& a) { return a.relation; });
    rep.euclidean = collect([](const auto& a) { return a.euclidean; });
    rep.cosine = collect([](const auto& a) { return a.cosine; });
    switch (model.config().variant) {
        case FusionVariant::individual_relation: rep.headline = rep.relation; break;
        case FusionVariant::individual_euclidean: rep.headline = rep.euclidean; break;
        case FusionVariant::individual_cosine: rep.headline = rep.cosine; break;
        default: rep.headline = rep.merged; break;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// training loop and distillation
// ---------------------------------------------------------------------------

struct TrainResult {
    std::string checkpoint_path;
    std::string metrics_csv_path;
    std::vector<double> epoch_total_loss;
};

/// Epoch log columns follow the metrics-log interface exactly.
inline constexpr const char* kMetricsCsvHeader =
    "epoch,L_r,L_e,L_c,L_M,L_y,L_G,L_R,L_total,u_r,u_e,u_c,"
    "theta_r2,theta_e2,theta_c2,theta_G2,theta_R2";

template <class S>
TrainResult train(AmtNet<S>& model, const Dataset& base, const TrainConfig& cfg,
                  const std::string& out_dir, AmtNet<S>* teacher = nullptr) {
    cfg.episode.validate_against(base);
    cfg.net_opt.validate();
    cfg.u_opt.validate();
    if (teacher)
        require(teacher->config().n_global_classes == model.config().n_global_classes,
                "distill: teacher has " +
                    std::to_string(teacher->config().n_global_classes) +
                    " global classes, student dataset has " +
                    std::to_string(model.config().n_global_classes));

    SgdOptimizer<S> net_opt(cfg.net_opt);
    SgdOptimizer<S> u_opt(cfg.u_opt);

    std::filesystem::create_directories(out_dir);
    TrainResult res;
    res.metrics_csv_path = out_dir + "/metrics.csv";
    res.checkpoint_path = out_dir + "/model.ckpt";
    std::ofstream log(res.metrics_csv_path, std::ios::trunc);
    if (!log) throw std::runtime_error("train: cannot write '" + res.metrics_csv_path + "'");
    log << kMetricsCsvHeader << "\n";

    int64_t step_index = 0;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        constexpr int kCols = 8;
        double sums[kCols] = {0};
        for (int64_t i = 0; i < cfg.episodes_per_epoch; ++i, ++step_index) {
            Rng rng(Rng::mix(cfg.seed, static_cast<uint64_t>(epoch * 1000003 + i)));
            auto episode = sample_episode(base, cfg.episode, rng,
                                          cfg.augment ? &cfg.aug : nullptr);
            const bool phase2 = cfg.phase2_every > 0 && (step_index % cfg.phase2_every == 0);
            auto bundle = train_step(model, episode, cfg, net_opt, u_opt, teacher, phase2);
            const Tensor<S>* cols[kCols] = {&bundle.L_r, &bundle.L_e, &bundle.L_c,
                                            &bundle.L_M, &bundle.L_y, &bundle.L_G,
                                            &bundle.L_R, &bundle.L_total};
            for (int c = 0; c < kCols; ++c)
                sums[c] += cols[c]->defined() ? LossBundle<S>::value_of(*cols[c]) : 0.0;
        }
        const double inv = 1.0 / static_cast<double>(cfg.episodes_per_epoch);
        char buf[512];
        std::snprintf(
            buf, sizeof(buf),
            "%lld,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g",
            static_cast<long long>(epoch), sums[0] * inv, sums[1] * inv, sums[2] * inv,
            sums[3] * inv, sums[4] * inv, sums[5] * inv, sums[6] * inv, sums[7] * inv,
            static_cast<double>(model.fusion.u_of(MetricId::relation).item()),
            static_cast<double>(model.fusion.u_of(MetricId::euclidean).item()),
            static_cast<double>(model.fusion.u_of(MetricId::cosine).item()),
            model.fusion.theta_sq_value(MetricId::relation),
            model.fusion.theta_sq_value(MetricId::euclidean),
            model.fusion.theta_sq_value(MetricId::cosine),
            std::exp(static_cast<double>(model.gal.log_theta_sq_G.item())),
            std::exp(static_cast<double>(model.gal.log_theta_sq_R.item())));
        log << buf << "\n";
        res.epoch_total_loss.push_back(sums[7] * inv);
    }
    log.close();
    model.save(res.checkpoint_path);
    return res;
}

/// Eq.14 driver: loads the frozen teacher and trains the student against
/// L_GAL + beta * L_KD. With beta = 0 the teacher is ignored and the run is
/// identical to plain training under the same seed.
template <class S>
TrainResult distill(const std::string& teacher_checkpoint, AmtNet<S>& student,
                    const Dataset& base, const TrainConfig& cfg, const std::string& out_dir) {
    auto teacher = AmtNet<S>::load(teacher_checkpoint);
    for (auto& p : teacher.parameters()) {
        p.frozen = true;
        p.tensor.node()->requires_grad = false;
    }
    return train(student, base, cfg, out_dir, cfg.kd.beta > 0 ? &teacher : nullptr);
}

}  // namespace amt
