#pragma once

#include "raunet/ops.hpp"
#include "raunet/random.hpp"

namespace raunet {

template <typename S>
struct Conv2dLayer {
    Tensor<S> w;  // [out, in, k, k]
    Tensor<S> b;  // [out], undefined when bias-free
    int stride = 1;
    int padding = 0;

    static Conv2dLayer init(int in_ch, int out_ch, int k, int stride, int padding, Rng& rng,
                            bool bias = true) {
        Conv2dLayer layer;
        layer.stride = stride;
        layer.padding = padding;
        layer.w = Tensor<S>::zeros({out_ch, in_ch, k, k}, true);
        const double bound = std::sqrt(6.0 / (static_cast<double>(in_ch) * k * k));
        for (auto& x : layer.w.mutable_data()) x = static_cast<S>(rng.uniform(-bound, bound));
        if (bias) layer.b = Tensor<S>::zeros({out_ch}, true);
        return layer;
    }

    Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, w, b, stride, padding); }

    int in_channels() const { return w.extent(1); }
    int out_channels() const { return w.extent(0); }
    int kernel() const { return w.extent(2); }
};

// Classic two-layer residual block: 3x3 conv, ReLU, 3x3 conv, identity (or
// 1x1 projection) skip, ReLU after the sum.
template <typename S>
struct ResNetBlockParams {
    Conv2dLayer<S> conv1, conv2;
    Conv2dLayer<S> proj;  // defined only when channels/stride change
    bool has_proj = false;

    static ResNetBlockParams init(int in_ch, int out_ch, int stride, Rng& rng) {
        ResNetBlockParams p;
        p.conv1 = Conv2dLayer<S>::init(in_ch, out_ch, 3, stride, 1, rng);
        p.conv2 = Conv2dLayer<S>::init(out_ch, out_ch, 3, 1, 1, rng);
        if (in_ch != out_ch || stride != 1) {
            p.proj = Conv2dLayer<S>::init(in_ch, out_ch, 1, stride, 0, rng, /*bias=*/false);
            p.has_proj = true;
        }
        return p;
    }
};

template <typename S>
Tensor<S> resnet_block_forward(const Tensor<S>& x, const ResNetBlockParams<S>& p) {
    Tensor<S> f = p.conv2(relu(p.conv1(x)));
    Tensor<S> skip = p.has_proj ? p.proj(x) : x;
    return relu(add(f, skip));
}

// One ResNeXt branch: 1x1 reduce, 3x3, 1x1 expand, ReLU between layers.
template <typename S>
struct ResNeXtBranchParams {
    Conv2dLayer<S> reduce, conv, expand;
};

// Aggregated residual block: C topologically identical bottleneck branches
// summed with the identity (or projected) skip, ReLU after the sum.
template <typename S>
struct ResNeXtBlockParams {
    std::vector<ResNeXtBranchParams<S>> branches;
    Conv2dLayer<S> proj;
    bool has_proj = false;

    int cardinality() const { return static_cast<int>(branches.size()); }

    static ResNeXtBlockParams init(int in_ch, int out_ch, int cardinality, int stride, Rng& rng) {
        if (cardinality < 1)
            throw ConfigError("resnext block: cardinality must be >= 1, got " +
                              std::to_string(cardinality));
        ResNeXtBlockParams p;
        const int width = std::max(4, out_ch / cardinality);
        for (int c = 0; c < cardinality; ++c) {
            ResNeXtBranchParams<S> br;
            br.reduce = Conv2dLayer<S>::init(in_ch, width, 1, 1, 0, rng);
            br.conv = Conv2dLayer<S>::init(width, width, 3, stride, 1, rng);
            br.expand = Conv2dLayer<S>::init(width, out_ch, 1, 1, 0, rng);
            p.branches.push_back(std::move(br));
        }
        if (in_ch != out_ch || stride != 1) {
            p.proj = Conv2dLayer<S>::init(in_ch, out_ch, 1, stride, 0, rng, /*bias=*/false);
            p.has_proj = true;
        }
        return p;
    }
};

template <typename S>
Tensor<S> resnext_branch_forward(const Tensor<S>& x, const ResNeXtBranchParams<S>& br) {
    return br.expand(relu(br.conv(relu(br.reduce(x)))));
}

// True iff all branches share identical layer shapes and strides.
template <typename S>
bool branch_equivalence_check(const ResNeXtBlockParams<S>& p) {
    for (std::size_t i = 1; i < p.branches.size(); ++i) {
        const auto& a = p.branches[0];
        const auto& b = p.branches[i];
        if (a.reduce.w.shape() != b.reduce.w.shape() || a.conv.w.shape() != b.conv.w.shape() ||
            a.expand.w.shape() != b.expand.w.shape() || a.reduce.stride != b.reduce.stride ||
            a.conv.stride != b.conv.stride || a.expand.stride != b.expand.stride)
            return false;
    }
    return true;
}

template <typename S>
Tensor<S> resnext_block_forward(const Tensor<S>& x, const ResNeXtBlockParams<S>& p) {
    if (p.branches.empty()) throw ConfigError("resnext block: no branches");
    if (!branch_equivalence_check(p))
        throw ShapeError("resnext block: branches are not topologically equivalent");
    Tensor<S> acc = resnext_branch_forward(x, p.branches[0]);
    for (std::size_t c = 1; c < p.branches.size(); ++c)
        acc = add(acc, resnext_branch_forward(x, p.branches[c]));
    Tensor<S> skip = p.has_proj ? p.proj(x) : x;
    return relu(add(acc, skip));
}

}  // namespace raunet
