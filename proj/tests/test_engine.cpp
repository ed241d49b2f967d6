#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "amt/engine.hpp"

using namespace amt;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* tag) {
    auto p = fs::temp_directory_path() / (std::string("amt_engine_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

/// Small oriented-texture dataset cached across test cases.
const Dataset& toy_base() {
    static Dataset ds = [] {
        SyntheticSpec spec;
        spec.n_classes = 8;
        spec.samples_per_class = 20;
        spec.image_size = 16;
        spec.seed = 21;
        auto dir = fresh_dir("toybase");
        generate_synthetic(spec, dir.string());
        return load_dataset((dir / "manifest.json").string());
    }();
    return ds;
}

/// Easy, nearly noise-free dataset for the separability sanity runs.
const Dataset& easy_base() {
    static Dataset ds = [] {
        SyntheticSpec spec;
        spec.n_classes = 6;
        spec.samples_per_class = 16;
        spec.image_size = 16;
        spec.seed = 22;
        spec.phase_jitter = 0.1;
        spec.noise = 0.05;
        auto dir = fresh_dir("easybase");
        generate_synthetic(spec, dir.string());
        return load_dataset((dir / "manifest.json").string());
    }();
    return ds;
}

ModelConfig toy_model_config(const Dataset& ds, FusionVariant v) {
    ModelConfig mc;
    mc.in_channels = ds.channels;
    mc.image_size = ds.height;
    mc.width = 32;  // small backbone keeps the suite fast
    mc.n_global_classes = ds.n_classes();
    mc.variant = v;
    return mc;
}

TrainConfig toy_train_config(FusionVariant v, uint64_t seed = 5) {
    TrainConfig cfg;
    cfg.episode = {2, 1, 2};
    cfg.epochs = 1;
    cfg.episodes_per_epoch = 4;
    cfg.net_opt = {0.01, 5e-4, 0.9};
    cfg.u_opt = {0.01, 0.0, 0.0};
    cfg.seed = seed;
    (void)v;
    return cfg;
}

std::vector<std::vector<double>> snapshot(AmtNet<double>& m) {
    std::vector<std::vector<double>> out;
    for (auto& p : m.parameters()) out.push_back(p.tensor.data());
    return out;
}

}  // namespace

TEST_CASE("sample_episode: (5,1,15) gives 5 support and 75 queries") {
    Rng rng(1);
    auto ep = sample_episode(toy_base(), {5, 1, 15}, rng);
    CHECK(ep.support.size() == 5);
    CHECK(ep.query.size() == 75);
    // way labels are 0..N-1, K per way in support, T per way in query
    std::vector<int64_t> sup_count(5, 0), qry_count(5, 0);
    for (const auto& s : ep.support) sup_count[s.fewshot_label]++;
    for (const auto& s : ep.query) qry_count[s.fewshot_label]++;
    for (int w = 0; w < 5; ++w) {
        CHECK(sup_count[w] == 1);
        CHECK(qry_count[w] == 15);
    }
}

TEST_CASE("sample_episode: 2-way on a 2-class dataset uses both classes") {
    SyntheticSpec spec;
    spec.n_classes = 2;
    spec.samples_per_class = 4;
    spec.image_size = 16;
    spec.seed = 30;
    auto dir = fresh_dir("twoclass");
    generate_synthetic(spec, dir.string());
    auto ds = load_dataset((dir / "manifest.json").string());
    Rng rng(2);
    auto ep = sample_episode(ds, {2, 1, 1}, rng);
    CHECK(ep.support[0].global_label != ep.support[1].global_label);
}

TEST_CASE("sample_episode: seeded determinism and support/query disjointness") {
    for (int trial = 0; trial < 50; ++trial) {
        Rng r1(100 + trial), r2(100 + trial);
        auto e1 = sample_episode(toy_base(), {4, 2, 3}, r1);
        auto e2 = sample_episode(toy_base(), {4, 2, 3}, r2);
        REQUIRE(e1.support.size() == e2.support.size());
        for (size_t i = 0; i < e1.support.size(); ++i)
            CHECK(e1.support[i].sample_id == e2.support[i].sample_id);
        for (size_t i = 0; i < e1.query.size(); ++i)
            CHECK(e1.query[i].sample_id == e2.query[i].sample_id);

        for (const auto& s : e1.support)
            for (const auto& q : e1.query) CHECK(s.sample_id != q.sample_id);
    }
}

TEST_CASE("sample_episode: insufficient classes or samples is a contract violation") {
    Rng rng(3);
    CHECK_THROWS_AS(sample_episode(toy_base(), {20, 1, 1}, rng), ContractViolation);
    EpisodeSpec too_many{2, 15, 10};
    CHECK_THROWS_AS(sample_episode(toy_base(), too_many, rng), ContractViolation);
}

TEST_CASE("EvalReport: hand-fed accuracies reproduce the CI formula") {
    auto e = EvalReport::summarize({1.0, 0.5});
    CHECK(e.mean == doctest::Approx(75.0));
    CHECK(e.ci95 == doctest::Approx(1.96 * 0.25 / std::sqrt(2.0) * 100.0).epsilon(1e-12));

    auto single = EvalReport::summarize({0.8});
    CHECK(single.mean == doctest::Approx(80.0));
    CHECK(single.ci95 == 0.0);  // convention for a single episode
}

TEST_CASE("constant-feature model scores exact chance with zero CI") {
    auto mc = toy_model_config(toy_base(), FusionVariant::amm);
    AmtNet<double> model(mc, 7);
    // zero conv weights + unit bias: features are input independent, all
    // metric scores tie, argmax always lands on way 0
    for (auto& p : model.parameters()) {
        if (p.name.find("backbone") != std::string::npos) {
            if (p.name.find(".weight") != std::string::npos)
                p.tensor.data().assign(p.tensor.data().size(), 0.0);
            if (p.name.find(".bias") != std::string::npos)
                p.tensor.data().assign(p.tensor.data().size(), 1.0);
        }
    }
    auto report = evaluate(model, toy_base(), {5, 1, 3}, 40, 11);
    CHECK(report.merged.mean == doctest::Approx(20.0));
    CHECK(report.merged.ci95 == doctest::Approx(0.0));
}

TEST_CASE("phase 1 never changes u; phase 2 changes only u (bitwise)") {
    auto mc = toy_model_config(toy_base(), FusionVariant::amm);
    AmtNet<double> model(mc, 8);
    auto cfg = toy_train_config(FusionVariant::amm);
    SgdOptimizer<double> net_opt(cfg.net_opt), u_opt(cfg.u_opt);

    for (int step = 0; step < 3; ++step) {
        Rng rng(40 + step);
        auto ep = sample_episode(toy_base(), cfg.episode, rng);

        auto before1 = snapshot(model);
        train_step_phase1(model, ep, cfg, net_opt);
        auto& params = model.parameters();
        for (size_t i = 0; i < params.size(); ++i) {
            if (params[i].name.rfind("fusion.u_", 0) == 0)
                CHECK(params[i].tensor.data() == before1[i]);
        }

        auto before2 = snapshot(model);
        train_step_phase2(model, ep, cfg, u_opt);
        bool u_changed = false;
        for (size_t i = 0; i < params.size(); ++i) {
            if (params[i].name.rfind("fusion.u_", 0) == 0)
                u_changed = u_changed || params[i].tensor.data() != before2[i];
            else
                CHECK(params[i].tensor.data() == before2[i]);
        }
        CHECK(u_changed);
    }
}

TEST_CASE("phase 2 is a no-op for variants without u") {
    auto mc = toy_model_config(toy_base(), FusionVariant::nmm);
    AmtNet<double> model(mc, 9);
    auto cfg = toy_train_config(FusionVariant::nmm);
    SgdOptimizer<double> u_opt(cfg.u_opt);
    Rng rng(50);
    auto ep = sample_episode(toy_base(), cfg.episode, rng);
    auto before = snapshot(model);
    train_step_phase2(model, ep, cfg, u_opt);
    auto& params = model.parameters();
    for (size_t i = 0; i < params.size(); ++i) CHECK(params[i].tensor.data() == before[i]);
}

TEST_CASE("individual-variant training only touches its own head") {
    auto mc = toy_model_config(toy_base(), FusionVariant::individual_euclidean);
    AmtNet<double> model(mc, 10);
    auto cfg = toy_train_config(FusionVariant::individual_euclidean);
    cfg.global_task = false;
    cfg.rotation_task = false;
    SgdOptimizer<double> net_opt(cfg.net_opt), u_opt(cfg.u_opt);
    Rng rng(60);
    auto ep = sample_episode(toy_base(), cfg.episode, rng);
    auto before = snapshot(model);
    train_step(model, ep, cfg, net_opt, u_opt);
    auto& params = model.parameters();
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& name = params[i].name;
        if (name.rfind("relation.", 0) == 0 || name.rfind("fusion.", 0) == 0 ||
            name.rfind("global_head.", 0) == 0 || name.rfind("rotation_head.", 0) == 0 ||
            name.rfind("gal.", 0) == 0)
            CHECK(params[i].tensor.data() == before[i]);
    }
    // the backbone did move
    bool backbone_moved = false;
    for (size_t i = 0; i < params.size(); ++i)
        if (params[i].name.rfind("backbone.", 0) == 0 && params[i].tensor.data() != before[i])
            backbone_moved = true;
    CHECK(backbone_moved);
}

TEST_CASE("episode label permutation permutes fused predictions and keeps accuracy") {
    auto mc = toy_model_config(toy_base(), FusionVariant::amm);
    AmtNet<double> model(mc, 12);
    Rng rng(70);
    auto ep = sample_episode(toy_base(), {3, 2, 2}, rng);

    // permute the class->way assignment: way w -> perm[w]
    const std::vector<int64_t> perm = {2, 0, 1};
    Episode permuted = ep;
    auto apply = [&](std::vector<EpisodeSample>& v) {
        for (auto& s : v) s.fewshot_label = perm[static_cast<size_t>(s.fewshot_label)];
    };
    apply(permuted.support);
    apply(permuted.query);

    auto fused_of = [&](const Episode& e) {
        NoGradGuard ng;
        auto support = to_batch<double>(e.support, mc.in_channels, mc.image_size, mc.image_size);
        auto queries = to_batch<double>(e.query, mc.in_channels, mc.image_size, mc.image_size);
        auto fwd = detail::forward_episode(model, support, queries, fewshot_labels(e.support), 3,
                                           {}, false, false, false, false);
        return amm_fuse(fwd.metric.pred(MetricId::relation), fwd.metric.pred(MetricId::euclidean),
                        fwd.metric.pred(MetricId::cosine), model.fusion);
    };
    auto base = fused_of(ep);
    auto perm_fused = fused_of(permuted);
    const int64_t n_q = base.dim(0);
    for (int64_t i = 0; i < n_q; ++i)
        for (int64_t w = 0; w < 3; ++w)
            CHECK(perm_fused.at(i * 3 + perm[w]) == doctest::Approx(base.at(i * 3 + w)).epsilon(1e-6));
}

TEST_CASE("nearest-centroid on raw pixels separates the easy dataset (> 90%)") {
    const auto& ds = easy_base();
    int64_t hits = 0, total = 0;
    for (int e = 0; e < 100; ++e) {
        Rng rng(Rng::mix(900, e));
        auto ep = sample_episode(ds, {2, 5, 3}, rng);
        // centroids per way on raw pixels
        std::vector<std::vector<double>> centroid(2, std::vector<double>(ep.support[0].pixels.size(), 0));
        std::vector<int64_t> count(2, 0);
        for (const auto& s : ep.support) {
            for (size_t i = 0; i < s.pixels.size(); ++i) centroid[s.fewshot_label][i] += s.pixels[i];
            count[s.fewshot_label]++;
        }
        for (int w = 0; w < 2; ++w)
            for (auto& v : centroid[w]) v /= count[w];
        for (const auto& q : ep.query) {
            double d0 = 0, d1 = 0;
            for (size_t i = 0; i < q.pixels.size(); ++i) {
                d0 += (q.pixels[i] - centroid[0][i]) * (q.pixels[i] - centroid[0][i]);
                d1 += (q.pixels[i] - centroid[1][i]) * (q.pixels[i] - centroid[1][i]);
            }
            if ((d0 < d1 ? 0 : 1) == q.fewshot_label) hits++;
            total++;
        }
    }
    CHECK(static_cast<double>(hits) / total > 0.9);
}

TEST_CASE("toy training exceeds 90% on 2-way 5-shot separable data") {
    auto mc = toy_model_config(easy_base(), FusionVariant::individual_euclidean);
    AmtNet<double> model(mc, 13);
    TrainConfig cfg;
    cfg.episode = {2, 5, 3};
    cfg.epochs = 2;
    cfg.episodes_per_epoch = 40;
    cfg.net_opt = {0.05, 5e-4, 0.9};
    cfg.global_task = false;
    cfg.rotation_task = false;
    cfg.patchwise = false;
    cfg.augment = false;
    cfg.seed = 14;
    auto out = fresh_dir("sanity");
    train(model, easy_base(), cfg, out.string());
    auto report = evaluate(model, easy_base(), {2, 5, 3}, 200, 15);
    INFO("euclidean acc ", report.euclidean.mean);
    CHECK(report.euclidean.mean > 90.0);
}

TEST_CASE("loss sequence trends down in 20-step windows over 200 toy steps") {
    auto mc = toy_model_config(easy_base(), FusionVariant::nmm);
    AmtNet<double> model(mc, 16);
    TrainConfig cfg;
    cfg.episode = {2, 5, 5};
    cfg.net_opt = {0.01, 5e-4, 0.9};
    cfg.global_task = false;
    cfg.rotation_task = false;
    cfg.patchwise = false;
    cfg.augment = false;
    cfg.seed = 17;
    SgdOptimizer<double> net_opt(cfg.net_opt), u_opt(cfg.u_opt);
    std::vector<double> losses;
    for (int step = 0; step < 200; ++step) {
        Rng rng(Rng::mix(17, step));
        auto ep = sample_episode(easy_base(), cfg.episode, rng);
        auto bundle = train_step(model, ep, cfg, net_opt, u_opt);
        losses.push_back(LossBundle<double>::value_of(bundle.L_total));
    }
    std::vector<double> window_means;
    for (int w = 0; w < 10; ++w) {
        double m = 0;
        for (int i = 0; i < 20; ++i) m += losses[w * 20 + i];
        window_means.push_back(m / 20);
    }
    for (size_t i = 1; i < window_means.size(); ++i)
        CHECK(window_means[i] <= window_means[i - 1] * 1.05 + 0.05);
    CHECK(window_means.back() < 0.8 * window_means.front());
}

TEST_CASE("train with zero epochs leaves the model untouched") {
    auto mc = toy_model_config(toy_base(), FusionVariant::amm);
    AmtNet<double> model(mc, 18);
    auto before = snapshot(model);
    auto cfg = toy_train_config(FusionVariant::amm);
    cfg.epochs = 0;
    auto out = fresh_dir("zeroepochs");
    train(model, toy_base(), cfg, out.string());
    auto& params = model.parameters();
    for (size_t i = 0; i < params.size(); ++i) CHECK(params[i].tensor.data() == before[i]);
}

TEST_CASE("seeded training runs are bit-identical, including checkpoints") {
    auto run = [&](const fs::path& dir) {
        auto mc = toy_model_config(toy_base(), FusionVariant::amm);
        AmtNet<double> model(mc, 19);
        auto cfg = toy_train_config(FusionVariant::amm, 23);
        cfg.epochs = 2;
        cfg.augment = true;
        train(model, toy_base(), cfg, dir.string());
    };
    auto d1 = fresh_dir("det_a"), d2 = fresh_dir("det_b");
    run(d1);
    run(d2);
    for (const char* f : {"model.ckpt", "metrics.csv"}) {
        std::ifstream a(d1 / f, std::ios::binary), b(d2 / f, std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(sa == sb);
        CHECK(!sa.empty());
    }
}

TEST_CASE("checkpoint round-trip restores every parameter and buffer bit-exactly") {
    auto mc = toy_model_config(toy_base(), FusionVariant::amm_v2);
    AmtNet<double> model(mc, 24);
    // move some state away from init
    auto cfg = toy_train_config(FusionVariant::amm_v2);
    SgdOptimizer<double> net_opt(cfg.net_opt), u_opt(cfg.u_opt);
    Rng rng(25);
    auto ep = sample_episode(toy_base(), cfg.episode, rng);
    train_step(model, ep, cfg, net_opt, u_opt);

    auto dir = fresh_dir("roundtrip");
    const auto path = (dir / "m.ckpt").string();
    model.save(path);
    auto loaded = AmtNet<double>::load(path);
    CHECK(loaded.config().variant == FusionVariant::amm_v2);
    REQUIRE(loaded.parameters().size() == model.parameters().size());
    for (size_t i = 0; i < model.parameters().size(); ++i)
        CHECK(loaded.parameters()[i].tensor.data() == model.parameters()[i].tensor.data());
}

TEST_CASE("evaluation is deterministic and worker-count independent") {
    auto mc = toy_model_config(toy_base(), FusionVariant::amm);
    AmtNet<double> model(mc, 26);
    auto r1 = evaluate(model, toy_base(), {4, 1, 3}, 30, 33, /*workers=*/1);
    auto r2 = evaluate(model, toy_base(), {4, 1, 3}, 30, 33, /*workers=*/2);
    auto r3 = evaluate(model, toy_base(), {4, 1, 3}, 30, 33, /*workers=*/3);
    CHECK(r1.merged.mean == r2.merged.mean);
    CHECK(r1.merged.ci95 == r2.merged.ci95);
    CHECK(r1.relation.mean == r3.relation.mean);
    CHECK(r1.cosine.mean == r3.cosine.mean);
}

TEST_CASE("distill with beta=0 reproduces plain training bit-exactly") {
    auto dir = fresh_dir("distill0");
    // teacher: any trained checkpoint
    auto mc = toy_model_config(toy_base(), FusionVariant::amm);
    AmtNet<double> teacher(mc, 27);
    auto tcfg = toy_train_config(FusionVariant::amm, 28);
    train(teacher, toy_base(), tcfg, (dir / "teacher").string());

    auto scfg = toy_train_config(FusionVariant::amm, 29);
    scfg.kd.beta = 0.0;
    AmtNet<double> plain(mc, 31);
    train(plain, toy_base(), scfg, (dir / "plain").string());
    AmtNet<double> student(mc, 31);
    distill((dir / "teacher" / "model.ckpt").string(), student, toy_base(), scfg,
            (dir / "student").string());

    for (size_t i = 0; i < plain.parameters().size(); ++i)
        CHECK(student.parameters()[i].tensor.data() == plain.parameters()[i].tensor.data());
}

TEST_CASE("self-distillation starts with a near-zero KD loss") {
    auto dir = fresh_dir("selfkd");
    auto mc = toy_model_config(toy_base(), FusionVariant::amm);
    AmtNet<double> teacher(mc, 35);
    auto tcfg = toy_train_config(FusionVariant::amm, 36);
    tcfg.epochs = 1;
    train(teacher, toy_base(), tcfg, (dir / "teacher").string());

    auto student = AmtNet<double>::load((dir / "teacher" / "model.ckpt").string());
    auto teacher2 = AmtNet<double>::load((dir / "teacher" / "model.ckpt").string());
    for (auto& p : teacher2.parameters()) p.tensor.node()->requires_grad = false;

    TrainConfig cfg = toy_train_config(FusionVariant::amm, 37);
    cfg.kd.beta = 0.75;
    Rng rng(38);
    auto ep = sample_episode(toy_base(), cfg.episode, rng);
    SgdOptimizer<double> net_opt(cfg.net_opt), u_opt(cfg.u_opt);
    auto bundle = train_step_phase1(student, ep, cfg, net_opt, &teacher2);
    const double kd = LossBundle<double>::value_of(bundle.L_KD);
    INFO("self-distillation KD loss ", kd);
    CHECK(kd >= 0.0);
    // identical weights, identical eval-mode views: the KL terms vanish
    CHECK(kd < 1e-9);
}

TEST_CASE("teacher parameters receive no gradient during distillation") {
    auto dir = fresh_dir("teachergrad");
    auto mc = toy_model_config(toy_base(), FusionVariant::amm);
    AmtNet<double> teacher(mc, 39);
    train(teacher, toy_base(), toy_train_config(FusionVariant::amm, 40), (dir / "t").string());
    auto frozen = AmtNet<double>::load((dir / "t" / "model.ckpt").string());
    for (auto& p : frozen.parameters()) {
        p.frozen = true;
        p.tensor.node()->requires_grad = false;
    }

    AmtNet<double> student(mc, 41);
    TrainConfig cfg = toy_train_config(FusionVariant::amm, 42);
    cfg.kd.beta = 0.75;
    SgdOptimizer<double> net_opt(cfg.net_opt), u_opt(cfg.u_opt);
    Rng rng(43);
    auto ep = sample_episode(toy_base(), cfg.episode, rng);
    train_step(student, ep, cfg, net_opt, u_opt, &frozen);
    for (auto& p : frozen.parameters()) {
        for (double g : p.tensor.grad()) CHECK(g == 0.0);
    }
}
