#include <doctest.h>

#include "oracles.hpp"
#include "raunet/blocks.hpp"

using namespace raunet;

namespace {

Tensor64 rand_tensor(Shape shape, Rng& rng, bool rg = false, double lo = -1, double hi = 1) {
    Tensor64 t = Tensor64::zeros(std::move(shape), rg);
    for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
    return t;
}

template <typename P>
void zero_block(P& block) {
    // zero every tensor reachable through the conv layers
    auto zero_conv = [](Conv2dLayer<double>& c) {
        for (auto& v : c.w.mutable_data()) v = 0;
        if (c.b.defined())
            for (auto& v : c.b.mutable_data()) v = 0;
    };
    if constexpr (requires { block.conv1; }) {
        zero_conv(block.conv1);
        zero_conv(block.conv2);
    } else {
        for (auto& br : block.branches) {
            zero_conv(br.reduce);
            zero_conv(br.conv);
            zero_conv(br.expand);
        }
    }
}

// bottleneck residual block evaluated with the naive conv oracle:
// relu(expand(relu(conv(relu(reduce(x))))) + x)
std::vector<double> naive_bottleneck_resnet(const Tensor64& x,
                                            const ResNeXtBranchParams<double>& br) {
    auto apply_conv = [](const Tensor64& in, const Conv2dLayer<double>& c) {
        auto flat = oracles::naive_conv2d(in, c.w, c.stride, c.padding);
        const int OH = (in.extent(2) + 2 * c.padding - c.kernel()) / c.stride + 1;
        Tensor64 out = Tensor64::from({in.extent(0), c.out_channels(), OH, OH}, flat);
        if (c.b.defined()) {
            auto d = out.mutable_data();
            const std::size_t plane = static_cast<std::size_t>(OH) * OH;
            for (int n = 0; n < in.extent(0); ++n)
                for (int co = 0; co < c.out_channels(); ++co)
                    for (std::size_t i = 0; i < plane; ++i)
                        d[(static_cast<std::size_t>(n) * c.out_channels() + co) * plane + i] +=
                            c.b.data()[static_cast<std::size_t>(co)];
        }
        return out;
    };
    auto relu_vec = [](Tensor64 t) {
        for (auto& v : t.mutable_data()) v = std::max(0.0, v);
        return t;
    };
    Tensor64 h = relu_vec(apply_conv(x, br.reduce));
    h = relu_vec(apply_conv(h, br.conv));
    h = apply_conv(h, br.expand);
    std::vector<double> out(h.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::max(0.0, h.data()[i] + x.data()[i]);
    return out;
}

}  // namespace

TEST_CASE("resnet block: zero residual passes nonnegative input through") {
    Rng rng(1);
    auto blk = ResNetBlockParams<double>::init(3, 3, 1, rng);
    zero_block(blk);
    auto x = rand_tensor({1, 3, 5, 5}, rng, false, 0.0, 1.0);
    auto y = resnet_block_forward(x, blk);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));

    // negative inputs hit the final ReLU
    auto xneg = Tensor64::filled({1, 3, 2, 2}, -2.0);
    for (double v : resnet_block_forward(xneg, blk).data()) CHECK(v == 0.0);

    // zero input + zero bias -> zero output
    for (double v : resnet_block_forward(Tensor64::zeros({1, 3, 4, 4}), blk).data())
        CHECK(v == 0.0);
}

TEST_CASE("resnext block: zero branches pass nonnegative input through") {
    Rng rng(2);
    auto blk = ResNeXtBlockParams<double>::init(4, 4, 3, 1, rng);
    zero_block(blk);
    auto x = rand_tensor({1, 4, 5, 5}, rng, false, 0.0, 1.0);
    auto y = resnext_block_forward(x, blk);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
}

TEST_CASE("resnext block: C=1 equals a bottleneck resnet block") {
    Rng rng(3);
    auto blk = ResNeXtBlockParams<double>::init(4, 4, 1, 1, rng);
    auto x = rand_tensor({1, 4, 6, 6}, rng);
    auto got = resnext_block_forward(x, blk);
    auto ref = naive_bottleneck_resnet(x, blk.branches[0]);
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(got.data()[i] == doctest::Approx(ref[i]).epsilon(1e-6));
}

TEST_CASE("resnext block: explicit-branch oracle at C=3") {
    Rng rng(4);
    auto blk = ResNeXtBlockParams<double>::init(4, 4, 3, 1, rng);
    auto x = rand_tensor({1, 4, 5, 5}, rng);
    auto got = resnext_block_forward(x, blk);

    // independent loop evaluation: each branch via naive convs, summed, plus skip, relu
    std::vector<double> total(x.numel(), 0.0);
    for (const auto& br : blk.branches) {
        auto branch = resnext_branch_forward(x, br);  // checked below against naive path
        auto apply = [&](const Tensor64& in, const Conv2dLayer<double>& c, bool relu_after) {
            auto flat = oracles::naive_conv2d(in, c.w, c.stride, c.padding);
            const int OH = (in.extent(2) + 2 * c.padding - c.kernel()) / c.stride + 1;
            Tensor64 out = Tensor64::from({1, c.out_channels(), OH, OH}, flat);
            auto d = out.mutable_data();
            const std::size_t plane = static_cast<std::size_t>(OH) * OH;
            for (int co = 0; co < c.out_channels(); ++co)
                for (std::size_t i = 0; i < plane; ++i) {
                    d[static_cast<std::size_t>(co) * plane + i] += c.b.data()[static_cast<std::size_t>(co)];
                    if (relu_after)
                        d[static_cast<std::size_t>(co) * plane + i] =
                            std::max(0.0, d[static_cast<std::size_t>(co) * plane + i]);
                }
            return out;
        };
        Tensor64 h = apply(x, br.reduce, true);
        h = apply(h, br.conv, true);
        h = apply(h, br.expand, false);
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += h.data()[i];
        for (std::size_t i = 0; i < branch.numel(); ++i)
            CHECK(branch.data()[i] == doctest::Approx(h.data()[i]).epsilon(1e-6));
    }
    for (std::size_t i = 0; i < total.size(); ++i) {
        const double expect = std::max(0.0, total[i] + x.data()[i]);
        CHECK(got.data()[i] == doctest::Approx(expect).epsilon(1e-6));
    }
}

TEST_CASE("resnext additivity across cardinalities") {
    Rng rng(5);
    for (int C : {1, 2, 4, 8}) {
        auto blk = ResNeXtBlockParams<double>::init(4, 4, C, 1, rng);
        auto x = rand_tensor({1, 4, 4, 4}, rng);
        auto got = resnext_block_forward(x, blk);
        std::vector<double> total(x.numel(), 0.0);
        for (const auto& br : blk.branches) {
            auto h = resnext_branch_forward(x, br);
            for (std::size_t i = 0; i < total.size(); ++i) total[i] += h.data()[i];
        }
        for (std::size_t i = 0; i < total.size(); ++i)
            CHECK(got.data()[i] ==
                  doctest::Approx(std::max(0.0, total[i] + x.data()[i])).epsilon(1e-6));
    }
}

TEST_CASE("resnext: appending a zero branch changes nothing") {
    Rng rng(6);
    auto blk = ResNeXtBlockParams<double>::init(4, 4, 2, 1, rng);
    auto x = rand_tensor({1, 4, 4, 4}, rng);
    auto base = resnext_block_forward(x, blk);

    auto extended = blk;
    ResNeXtBranchParams<double> zero_branch;
    zero_branch.reduce = Conv2dLayer<double>::init(4, 4, 1, 1, 0, rng);
    zero_branch.conv = Conv2dLayer<double>::init(4, 4, 3, 1, 1, rng);
    zero_branch.expand = Conv2dLayer<double>::init(4, 4, 1, 1, 0, rng);
    for (auto* c : {&zero_branch.reduce, &zero_branch.conv, &zero_branch.expand}) {
        for (auto& v : c->w.mutable_data()) v = 0;
        for (auto& v : c->b.mutable_data()) v = 0;
    }
    extended.branches.push_back(std::move(zero_branch));
    auto with_zero = resnext_block_forward(x, extended);
    for (std::size_t i = 0; i < base.numel(); ++i)
        CHECK(with_zero.data()[i] == doctest::Approx(base.data()[i]).epsilon(1e-7));
}

TEST_CASE("branch_equivalence_check") {
    Rng rng(7);
    auto blk = ResNeXtBlockParams<double>::init(4, 8, 4, 1, rng);
    CHECK(branch_equivalence_check(blk));

    auto bad = blk;
    bad.branches[2].conv = Conv2dLayer<double>::init(2, 2, 3, 1, 1, rng);
    CHECK_FALSE(branch_equivalence_check(bad));
    CHECK_THROWS_AS(resnext_block_forward(rand_tensor({1, 4, 4, 4}, rng), bad), ShapeError);

    auto single = ResNeXtBlockParams<double>::init(4, 4, 1, 1, rng);
    CHECK(branch_equivalence_check(single));
}

TEST_CASE("blocks with projection skip handle channel/stride changes") {
    Rng rng(8);
    auto blk = ResNeXtBlockParams<double>::init(3, 8, 2, 2, rng);
    auto x = rand_tensor({2, 3, 8, 8}, rng);
    auto y = resnext_block_forward(x, blk);
    CHECK(y.shape() == Shape{2, 8, 4, 4});

    auto rblk = ResNetBlockParams<double>::init(3, 6, 2, rng);
    auto ry = resnet_block_forward(x, rblk);
    CHECK(ry.shape() == Shape{2, 6, 4, 4});
}
