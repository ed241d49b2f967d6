#pragma once

#include <array>

#include "amt/optim.hpp"
#include "amt/tensor.hpp"

namespace amt {

/// conv3x3(pad 1) -> batch norm -> relu -> max pool 2x2.
template <class S>
struct ConvBnBlock {
    Tensor<S> weight, bias, bn_gamma, bn_beta;
    Tensor<S> running_mean, running_var;  // buffers, not graph parameters

    void init(int64_t in_ch, int64_t out_ch, Rng& rng) {
        const double he = std::sqrt(2.0 / static_cast<double>(in_ch * 9));
        std::vector<S> w(static_cast<size_t>(out_ch * in_ch * 9));
        for (auto& v : w) v = static_cast<S>(rng.normal(0.0, he));
        weight = Tensor<S>::from({out_ch, in_ch, 3, 3}, std::move(w), true);
        bias = Tensor<S>::zeros({out_ch}, true);
        bn_gamma = Tensor<S>::filled({out_ch}, S(1), true);
        bn_beta = Tensor<S>::zeros({out_ch}, true);
        running_mean = Tensor<S>::zeros({out_ch});
        running_var = Tensor<S>::filled({out_ch}, S(1));
    }

    Tensor<S> forward(const Tensor<S>& x, bool training, bool update_stats) {
        auto y = conv2d(x, weight, bias, 1, 1);
        y = batch_norm2d(y, bn_gamma, bn_beta, running_mean, running_var, training, update_stats);
        return max_pool2x2(relu(y));
    }

    void register_params(std::vector<Parameter<S>>& out, const std::string& prefix) {
        out.emplace_back(weight, prefix + ".weight");
        out.emplace_back(bias, prefix + ".bias");
        out.emplace_back(bn_gamma, prefix + ".bn_gamma");
        out.emplace_back(bn_beta, prefix + ".bn_beta");
    }
    void register_buffers(std::vector<std::pair<std::string, Tensor<S>*>>& out,
                          const std::string& prefix) {
        out.emplace_back(prefix + ".running_mean", &running_mean);
        out.emplace_back(prefix + ".running_var", &running_var);
    }
};

/// Conv4 embedding: four ConvBnBlocks, `width` channels each.
/// 3x84x84 -> width x5x5, 3x32x32 -> width x2x2.
template <class S>
class Conv4 {
public:
    Conv4() = default;
    Conv4(int64_t in_channels, int64_t width, int64_t image_size, Rng& rng)
        : in_channels_(in_channels), width_(width), image_size_(image_size) {
        blocks_[0].init(in_channels, width, rng);
        for (int i = 1; i < 4; ++i) blocks_[i].init(width, width, rng);
    }

    int64_t width() const { return width_; }
    int64_t image_size() const { return image_size_; }
    int64_t out_spatial() const {
        int64_t s = image_size_;
        for (int i = 0; i < 4; ++i) s /= 2;
        return s;
    }

    Tensor<S> forward(const Tensor<S>& images, bool training, bool update_stats = true) {
        require(images.shape().size() == 4 && images.dim(1) == in_channels_ &&
                    images.dim(2) == image_size_ && images.dim(3) == image_size_,
                "embed: expected input " + shape_str({-1, in_channels_, image_size_, image_size_}) +
                    ", got " + shape_str(images.shape()));
        auto y = images;
        for (auto& b : blocks_) y = b.forward(y, training, update_stats);
        return y;
    }

    void register_params(std::vector<Parameter<S>>& out) {
        for (int i = 0; i < 4; ++i)
            blocks_[i].register_params(out, "backbone.block" + std::to_string(i + 1));
    }
    void register_buffers(std::vector<std::pair<std::string, Tensor<S>*>>& out) {
        for (int i = 0; i < 4; ++i)
            blocks_[i].register_buffers(out, "backbone.block" + std::to_string(i + 1));
    }

private:
    int64_t in_channels_ = 3, width_ = 64, image_size_ = 32;
    std::array<ConvBnBlock<S>, 4> blocks_;
};

/// Per-class mean of embedded support maps: P^k = mean over S^k of f(x).
/// `labels[i]` assigns support row i to a way in [0, n_ways).
template <class S>
Tensor<S> build_prototypes(const Tensor<S>& support_features, const std::vector<int64_t>& labels,
                           int64_t n_ways) {
    check_nchw(support_features, "build_prototypes");
    require(support_features.dim(0) == static_cast<int64_t>(labels.size()),
            "build_prototypes: feature/label count mismatch");
    std::vector<std::vector<int64_t>> by_way(static_cast<size_t>(n_ways));
    for (size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] >= 0 && labels[i] < n_ways,
                "build_prototypes: label " + std::to_string(labels[i]) + " out of range");
        by_way[static_cast<size_t>(labels[i])].push_back(static_cast<int64_t>(i));
    }
    std::vector<Tensor<S>> protos;
    for (int64_t k = 0; k < n_ways; ++k) {
        const auto& rows = by_way[static_cast<size_t>(k)];
        require(!rows.empty(), "build_prototypes: class " + std::to_string(k) +
                                   " has no support sample");
        std::vector<Tensor<S>> members;
        for (int64_t r : rows) members.push_back(slice_batch(support_features, r, r + 1));
        auto stacked = members.size() == 1 ? members[0] : concat_batch(members);
        const int64_t m = static_cast<int64_t>(rows.size());
        auto flat = reshape(stacked, {m, stacked.size() / m});
        auto mean = smul(sum_axis2d(flat, 0), 1.0 / static_cast<double>(m));
        Shape proto_shape = support_features.shape();
        proto_shape[0] = 1;
        protos.push_back(reshape(mean, proto_shape));
    }
    return concat_batch(protos);
}

}  // namespace amt
