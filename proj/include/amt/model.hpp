#pragma once

#include <json.hpp>

#include "amt/backbone.hpp"
#include "amt/checkpoint.hpp"
#include "amt/fusion.hpp"
#include "amt/tasks.hpp"

namespace amt {

struct ModelConfig {
    int64_t in_channels = 3;
    int64_t image_size = 32;
    int64_t width = 64;             // backbone channels per block
    int64_t n_global_classes = 20;  // base-split class count
    double cosine_gamma = 10.0;
    FusionVariant variant = FusionVariant::amm;
    double alpha = 0.1;   // KL regularizer weight (Eq.11)
    double lambda = 0.5;  // auxiliary base bias (Eq.13)

    nlohmann::json to_json() const {
        return {{"in_channels", in_channels}, {"image_size", image_size},
                {"width", width},             {"n_global_classes", n_global_classes},
                {"cosine_gamma", cosine_gamma}, {"variant", to_string(variant)},
                {"alpha", alpha},             {"lambda", lambda}};
    }
    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.in_channels = j.at("in_channels").get<int64_t>();
        c.image_size = j.at("image_size").get<int64_t>();
        c.width = j.at("width").get<int64_t>();
        c.n_global_classes = j.at("n_global_classes").get<int64_t>();
        c.cosine_gamma = j.at("cosine_gamma").get<double>();
        c.variant = parse_variant(j.at("variant").get<std::string>());
        c.alpha = j.at("alpha").get<double>();
        c.lambda = j.at("lambda").get<double>();
        return c;
    }
};

/// The full few-shot model: Conv4 embedding, three metric heads (the fixed
/// two need no parameters), fusion state, and the two auxiliary classifiers.
template <class S>
class AmtNet {
public:
    AmtNet(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
        Rng rng(Rng::mix(seed, 0xA11));
        backbone = Conv4<S>(cfg.in_channels, cfg.width, cfg.image_size, rng);
        relation = RelationHead<S>(cfg.width, rng);
        global_head = ClassifierHead<S>(cfg.n_global_classes, cfg.width, rng);
        rotation_head = ClassifierHead<S>(4, cfg.width, rng);
        fusion.alpha = cfg.alpha;
        gal.lambda = cfg.lambda;

        backbone.register_params(params_);
        relation.register_params(params_, "relation");
        global_head.register_params(params_, "global_head");
        rotation_head.register_params(params_, "rotation_head");
        fusion.register_params(params_);
        gal.register_params(params_);
        backbone.register_buffers(buffers_);
        relation.register_buffers(buffers_, "relation");
    }

    // copying would alias the underlying parameter nodes
    AmtNet(const AmtNet&) = delete;
    AmtNet& operator=(const AmtNet&) = delete;
    AmtNet(AmtNet&&) = default;
    AmtNet& operator=(AmtNet&&) = default;

    const ModelConfig& config() const { return cfg_; }
    std::vector<Parameter<S>>& parameters() { return params_; }

    Parameter<S>* find(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    Tensor<S> embed(const Tensor<S>& images, bool training, bool update_stats = true) {
        return backbone.forward(images, training, update_stats);
    }

    /// Parameters optimized in the first phase of the training step: the
    /// active sub-graph minus the fusion weights u (those belong to phase 2).
    std::vector<Parameter<S>*> phase1_params(bool global_task, bool rotation_task) {
        std::vector<Parameter<S>*> out;
        const auto v = cfg_.variant;
        const bool use_relation =
            variant_uses_all_metrics(v) || v == FusionVariant::individual_relation;
        for (auto& p : params_) {
            if (p.name.rfind("fusion.u_", 0) == 0) continue;
            if (p.name.rfind("relation.", 0) == 0 && !use_relation) continue;
            if (p.name.rfind("fusion.log_theta_sq_", 0) == 0 && !variant_has_theta(v)) continue;
            if ((p.name.rfind("global_head.", 0) == 0 || p.name == "gal.log_theta_sq_G") &&
                !global_task)
                continue;
            if ((p.name.rfind("rotation_head.", 0) == 0 || p.name == "gal.log_theta_sq_R") &&
                !rotation_task)
                continue;
            out.push_back(&p);
        }
        return out;
    }

    /// Parameters optimized in the second phase: the fusion weights u, only
    /// present when the variant's prediction rule is Eq.9.
    std::vector<Parameter<S>*> phase2_params() {
        std::vector<Parameter<S>*> out;
        if (!variant_has_u(cfg_.variant)) return out;
        for (auto& p : params_)
            if (p.name.rfind("fusion.u_", 0) == 0) out.push_back(&p);
        return out;
    }

    void set_frozen(const std::vector<Parameter<S>*>& subset, bool frozen) {
        for (auto* p : subset) p->frozen = frozen;
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ckpt;
        ckpt.meta["model"] = cfg_.to_json();
        for (const auto& p : params_) ckpt.put(p.name, p.tensor);
        for (const auto& [name, t] : buffers_) ckpt.put(name, *t);
        return ckpt;
    }
    void save(const std::string& path) const { to_checkpoint().save(path); }

    static AmtNet load(const std::string& path) {
        Checkpoint ckpt = Checkpoint::load(path);
        AmtNet model(ModelConfig::from_json(ckpt.meta.at("model")), /*seed=*/0);
        for (auto& p : model.params_) {
            auto t = ckpt.get<S>(p.name);
            require(t.shape() == p.tensor.shape(),
                    "checkpoint: shape mismatch for '" + p.name + "'");
            p.tensor.data() = t.data();
        }
        for (auto& [name, t] : model.buffers_) t->data() = ckpt.get<S>(name).data();
        return model;
    }

    /// Pooled feature of one normalized image, eval mode (embedding export).
    std::vector<double> embed_pixels(const std::vector<float>& pixels) {
        NoGradGuard ng;
        std::vector<S> data(pixels.begin(), pixels.end());
        auto img = Tensor<S>::from({1, cfg_.in_channels, cfg_.image_size, cfg_.image_size},
                                   std::move(data));
        auto pooled = global_avg_pool(embed(img, false, false));
        std::vector<double> out(pooled.data().begin(), pooled.data().end());
        return out;
    }

    Conv4<S> backbone;
    RelationHead<S> relation;
    ClassifierHead<S> global_head;
    ClassifierHead<S> rotation_head;
    FusionParams<S> fusion;
    GalParams<S> gal;

private:
    ModelConfig cfg_;
    std::vector<Parameter<S>> params_;
    std::vector<std::pair<std::string, Tensor<S>*>> buffers_;
};

}  // namespace amt
