#include <doctest.h>

#include "oracles.hpp"
#include "raunet/gradcheck.hpp"
#include "raunet/ops.hpp"

using namespace raunet;

namespace {

Tensor64 rand_tensor(Shape shape, Rng& rng, bool rg = false, double lo = -1, double hi = 1) {
    Tensor64 t = Tensor64::zeros(std::move(shape), rg);
    for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("relu examples") {
    auto x = Tensor64::from({3}, {-1.0, 0.0, 2.0});
    auto y = relu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 0.0);
    CHECK(y.data()[2] == 2.0);

    auto zeros = Tensor64::zeros({2, 3});
    auto yz = relu(zeros);
    for (double v : yz.data()) CHECK(v == 0.0);

    auto g = Tensor64::from({2}, {-1.0, 3.0}, true);
    backward(sum(relu(g)));
    CHECK(g.grad_data()[0] == 0.0);
    CHECK(g.grad_data()[1] == 1.0);
}

TEST_CASE("sigmoid examples") {
    auto x = Tensor64::from({1}, {0.0});
    CHECK(sigmoid(x).item() == doctest::Approx(0.5).epsilon(1e-12));

    Rng rng(3);
    auto a = rand_tensor({8}, rng, false, -5, 5);
    auto na = mul(a, -1.0);
    auto s1 = sigmoid(a), s2 = sigmoid(na);
    for (std::size_t i = 0; i < a.numel(); ++i)
        CHECK(s1.data()[i] + s2.data()[i] == doctest::Approx(1.0).epsilon(1e-12));

    auto big = Tensor64::from({2}, {100.0, -100.0});
    auto sb = sigmoid(big);
    CHECK(sb.data()[0] == 1.0);
    CHECK(sb.data()[1] >= 0.0);
    CHECK(sb.data()[1] < 1e-40);
}

TEST_CASE("softmax examples") {
    auto flat = softmax(Tensor64::from({4}, {0, 0, 0, 0}), 0);
    for (double v : flat.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

    auto sharp = softmax(Tensor64::from({2}, {1000.0, 0.0}), 0);
    CHECK(sharp.data()[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::isfinite(sharp.data()[1]));

    // frozen from the direct 64-bit formula
    auto x = Tensor64::from({5}, {0.7, -1.3, 2.1, 0.0, -0.4});
    const double expected[5] = {0.16611318755976312, 0.022480975287737105, 0.67362219268481471,
                                0.082489367708124373, 0.055294276759560709};
    auto y = softmax(x, 0);
    for (int i = 0; i < 5; ++i) CHECK(y.data()[static_cast<std::size_t>(i)] ==
                                      doctest::Approx(expected[i]).epsilon(1e-6));
}

TEST_CASE("softmax properties: rows sum to one, shift invariance") {
    Rng rng(11);
    auto x = rand_tensor({4, 7}, rng, false, -3, 3);
    auto y = softmax(x, 1);
    for (int r = 0; r < 4; ++r) {
        double sum = 0;
        for (int c = 0; c < 7; ++c) sum += y.at({r, c});
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    auto shifted = softmax(add(x, Tensor64::filled({4, 7}, 13.25)), 1);
    for (std::size_t i = 0; i < y.numel(); ++i)
        CHECK(shifted.data()[i] == doctest::Approx(y.data()[i]).epsilon(1e-6));
}

TEST_CASE("matmul examples and oracle") {
    Rng rng(5);
    auto m = rand_tensor({3, 3}, rng);
    auto iy = matmul(Tensor64::eye(3), m);
    for (std::size_t i = 0; i < m.numel(); ++i) CHECK(iy.data()[i] == doctest::Approx(m.data()[i]));

    auto a = rand_tensor({2, 3}, rng);
    auto b = rand_tensor({3, 2}, rng);
    auto c = matmul(a, b);
    auto ref = oracles::naive_matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(c.data()[i] == doctest::Approx(ref[i]).epsilon(1e-6));

    CHECK_THROWS_AS(matmul(rand_tensor({2, 3}, rng), rand_tensor({2, 3}, rng)), ShapeError);
    CHECK_THROWS_WITH_AS(matmul(rand_tensor({2, 3}, rng), rand_tensor({4, 2}, rng)),
                         doctest::Contains("[2, 3]"), ShapeError);
}

TEST_CASE("conv2d examples and oracle") {
    auto ones = Tensor64::filled({1, 1, 3, 3}, 1.0);
    auto k2 = Tensor64::filled({1, 1, 1, 1}, 2.0);
    auto y = conv2d(ones, k2, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    for (double v : y.data()) CHECK(v == doctest::Approx(2.0));

    Rng rng(7);
    auto x = rand_tensor({1, 2, 5, 5}, rng);
    auto zero_k = Tensor64::zeros({3, 2, 3, 3});
    for (double v : conv2d(x, zero_k, 1, 1).data()) CHECK(v == 0.0);

    auto w = rand_tensor({3, 2, 3, 3}, rng);
    for (int stride : {1, 2})
        for (int pad : {0, 1}) {
            auto out = conv2d(x, w, stride, pad);
            auto ref = oracles::naive_conv2d(x, w, stride, pad);
            REQUIRE(out.numel() == ref.size());
            for (std::size_t i = 0; i < ref.size(); ++i)
                CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-5));
        }

    CHECK_THROWS_WITH_AS(conv2d(rand_tensor({1, 1, 2, 2}, rng), rand_tensor({1, 1, 5, 5}, rng), 1, 0),
                         doctest::Contains("output size"), GeometryError);
}

TEST_CASE("conv2d_transpose examples, oracle, adjointness") {
    auto x = Tensor64::from({1, 1, 2, 2}, {1, 2, 3, 4});
    auto w = Tensor64::filled({1, 1, 2, 2}, 1.0);
    auto y = conv2d_transpose(x, w, 2);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    // each input pixel tiles its own 2x2 patch
    CHECK(y.at({0, 0, 0, 0}) == 1.0);
    CHECK(y.at({0, 0, 0, 1}) == 1.0);
    CHECK(y.at({0, 0, 2, 3}) == 4.0);
    CHECK(y.at({0, 0, 3, 3}) == 4.0);

    for (double v : conv2d_transpose(Tensor64::zeros({1, 2, 3, 3}),
                                     Tensor64::filled({2, 1, 2, 2}, 0.5), 2)
                        .data())
        CHECK(v == 0.0);

    Rng rng(13);
    auto xr = rand_tensor({2, 3, 4, 4}, rng);
    auto wr = rand_tensor({3, 2, 2, 2}, rng);
    auto out = conv2d_transpose(xr, wr, 2);
    auto ref = oracles::naive_conv2d_transpose(xr, wr, 2);
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-6));

    // <conv(x, w), y> == <x, conv_transpose(y, w)> on random tensors
    auto cx = rand_tensor({1, 2, 6, 6}, rng);
    auto cw = rand_tensor({3, 2, 2, 2}, rng);
    auto cy = rand_tensor({1, 3, 3, 3}, rng);  // conv output geometry, stride 2
    auto fwd = conv2d(cx, cw, 2, 0);
    double lhs = 0;
    for (std::size_t i = 0; i < fwd.numel(); ++i) lhs += fwd.data()[i] * cy.data()[i];
    auto bwd = conv2d_transpose(cy, cw, 2);
    double rhs = 0;
    for (std::size_t i = 0; i < bwd.numel(); ++i) rhs += bwd.data()[i] * cx.data()[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
}

TEST_CASE("maxpool2d examples") {
    auto x = Tensor64::from({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(maxpool2d(x).item() == 4.0);

    auto c = Tensor64::filled({1, 2, 4, 4}, 0.7);
    auto pooled = maxpool2d(c);
    CHECK(pooled.shape() == Shape{1, 2, 2, 2});
    for (double v : pooled.data()) CHECK(v == 0.7);

    CHECK_THROWS_WITH_AS(maxpool2d(Tensor64::zeros({1, 1, 3, 4})), doctest::Contains("3x4"),
                         GeometryError);

    // tie routes gradient to the first occurrence, row-major
    auto t = Tensor64::from({1, 1, 2, 2}, {5, 5, 5, 5}, true);
    backward(sum(maxpool2d(t)));
    CHECK(t.grad_data()[0] == 1.0);
    CHECK(t.grad_data()[1] == 0.0);
    CHECK(t.grad_data()[3] == 0.0);
}

TEST_CASE("global_avg_pool examples") {
    auto c = Tensor64::filled({2, 3, 4, 4}, 0.3);
    auto y = global_avg_pool(c);
    CHECK(y.shape() == Shape{2, 3});
    for (double v : y.data()) CHECK(v == doctest::Approx(0.3).epsilon(1e-12));

    auto m = Tensor64::from({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(global_avg_pool(m).item() == doctest::Approx(2.5));

    Rng rng(17);
    auto r = rand_tensor({2, 2, 3, 5}, rng);
    auto out = global_avg_pool(r);
    for (int n = 0; n < 2; ++n)
        for (int ch = 0; ch < 2; ++ch) {
            double s = 0;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 5; ++j) s += r.at({n, ch, i, j});
            CHECK(out.at({n, ch}) == doctest::Approx(s / 15.0).epsilon(1e-6));
        }
}

TEST_CASE("concat, add, reshape, permute") {
    auto a = Tensor64::from({1, 2}, {1, 2});
    auto b = Tensor64::from({1, 3}, {3, 4, 5});
    auto joined = concat<double>({a, b}, 1);
    CHECK(joined.shape() == Shape{1, 5});
    CHECK(joined.data()[4] == 5.0);
    CHECK_THROWS_AS(concat<double>({a, Tensor64::zeros({2, 2})}, 1), ShapeError);

    Rng rng(19);
    auto x = rand_tensor({3, 4}, rng);
    auto y = add(x, Tensor64::zeros({3, 4}));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
    CHECK_THROWS_AS(add(x, Tensor64::zeros({4, 3})), ShapeError);

    // concat backward splits an all-ones upstream grad into all-ones pieces
    auto ga = Tensor64::zeros({2, 2}, true);
    auto gb = Tensor64::zeros({2, 3}, true);
    backward(sum(concat<double>({ga, gb}, 1)));
    for (double v : ga.grad_data()) CHECK(v == 1.0);
    for (double v : gb.grad_data()) CHECK(v == 1.0);

    auto p = permute(rand_tensor({2, 3, 4}, rng), {2, 0, 1});
    CHECK(p.shape() == Shape{4, 2, 3});
    auto r = reshape(p, {24});
    CHECK(r.shape() == Shape{24});
    CHECK_THROWS_AS(reshape(p, {5, 5}), ShapeError);
}

TEST_CASE("backward basics") {
    auto x = Tensor64::zeros({2, 2}, true);
    backward(sum(x));
    for (double v : x.grad_data()) CHECK(v == 1.0);

    auto y = Tensor64::filled({3}, 2.0, true);
    backward(sum(add(y, y)));
    for (double v : y.grad_data()) CHECK(v == 2.0);

    CHECK_THROWS_AS(backward(Tensor64::zeros({2, 2}, true)), ShapeError);
}

TEST_CASE("gradient suite: finite differences at 64-bit") {
    std::vector<std::pair<std::string, double>> cases;
    GradCheckOutcome worst = run_gradcheck_suite(123, &cases);
    for (const auto& [name, rel] : cases) {
        INFO(name << " rel=" << rel);
        if (name == "model_end_to_end")
            CHECK(rel < 1e-3);
        else
            CHECK(rel < 1e-4);
    }
    CHECK(worst.max_rel_err < 1e-3);
}

TEST_CASE("tape determinism: identical seeds give bitwise outputs and grads") {
    auto run = []() {
        Rng rng(99);
        auto x = rand_tensor({2, 2, 4, 4}, rng, true);
        auto w = rand_tensor({3, 2, 3, 3}, rng, true);
        auto loss = sum(mul(relu(conv2d(x, w, 1, 1)), rand_tensor({2, 3, 4, 4}, rng)));
        backward(loss);
        std::vector<double> result{loss.item()};
        result.insert(result.end(), x.grad_data().begin(), x.grad_data().end());
        result.insert(result.end(), w.grad_data().begin(), w.grad_data().end());
        return result;
    };
    auto r1 = run();
    auto r2 = run();
    CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)) == 0);
}

TEST_CASE("no-grad mode skips graph construction") {
    auto x = Tensor64::filled({2}, 1.0, true);
    {
        NoGradGuard ng;
        auto y = relu(x);
        CHECK_FALSE(y.requires_grad());
    }
    auto y = relu(x);
    CHECK(y.requires_grad());
}
