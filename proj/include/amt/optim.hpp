#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "amt/tensor.hpp"

namespace amt {

struct SgdConfig {
    double learning_rate = 0.01;
    double weight_decay = 5e-4;
    double momentum = 0.9;

    void validate() const {
        require(std::isfinite(learning_rate) && learning_rate > 0,
                "SgdConfig: learning_rate must be positive");
        require(std::isfinite(weight_decay) && weight_decay >= 0,
                "SgdConfig: weight_decay must be nonnegative");
        require(std::isfinite(momentum) && momentum >= 0 && momentum < 1,
                "SgdConfig: momentum must be in [0,1)");
    }
};

template <class S>
struct Parameter {
    Tensor<S> tensor;
    std::string name;
    bool frozen = false;
    bool decay = true;  // fusion weights and temperatures opt out of weight decay

    Parameter(Tensor<S> t, std::string n, bool decay_ = true)
        : tensor(std::move(t)), name(std::move(n)), decay(decay_) {}
};

/// SGD with momentum and decoupled-from-nothing classic weight decay
/// (gradient + wd * p). Frozen parameters are left bit-identical; all grads
/// in the group are zeroed after the step.
template <class S>
class SgdOptimizer {
public:
    explicit SgdOptimizer(SgdConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const SgdConfig& config() const { return cfg_; }

    void step(std::vector<Parameter<S>>& params) {
        for (auto& p : params) step_one(p);
    }
    void step(std::vector<Parameter<S>*>& params) {
        for (auto* p : params) step_one(*p);
    }

    void reset_state() { velocity_.clear(); }

private:
    void step_one(Parameter<S>& p) {
        auto& t = p.tensor;
        if (!p.frozen) {
            require(t.grad().size() == t.data().size(),
                    "sgd_step: missing grad on unfrozen parameter '" + p.name + "'");
            auto& v = velocity_[t.node().get()];
            if (v.size() != t.data().size()) v.assign(t.data().size(), S(0));
            const S lr = static_cast<S>(cfg_.learning_rate);
            const S wd = p.decay ? static_cast<S>(cfg_.weight_decay) : S(0);
            const S mom = static_cast<S>(cfg_.momentum);
            for (size_t i = 0; i < t.data().size(); ++i) {
                v[i] = mom * v[i] + (t.grad()[i] + wd * t.data()[i]);
                t.data()[i] -= lr * v[i];
            }
        }
        if (!t.grad().empty()) t.zero_grad();
    }

    SgdConfig cfg_;
    std::unordered_map<const Node<S>*, std::vector<S>> velocity_;
};

}  // namespace amt
