#include <doctest.h>

#include "oracles.hpp"
#include "raunet/attention.hpp"

using namespace raunet;

namespace {

Tensor64 rand_tensor(Shape shape, Rng& rng, bool rg = false, double lo = -1, double hi = 1) {
    Tensor64 t = Tensor64::zeros(std::move(shape), rg);
    for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("scaled_dot_attention examples") {
    Rng rng(1);
    // single key/value: softmax of a singleton is 1, output row = v
    auto q = rand_tensor({3, 4}, rng);
    auto k = rand_tensor({1, 4}, rng);
    auto v = Tensor64::from({1, 2}, {0.25, -0.75});
    auto out = scaled_dot_attention(q, k, v);
    for (int i = 0; i < 3; ++i) {
        CHECK(out.at({i, 0}) == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(out.at({i, 1}) == doctest::Approx(-0.75).epsilon(1e-12));
    }

    // two identical keys: output is the mean of the two values
    auto key_row = rand_tensor({1, 4}, rng);
    auto k2 = concat<double>({key_row, key_row}, 0);
    auto v2 = rand_tensor({2, 3}, rng);
    auto out2 = scaled_dot_attention(q, k2, v2);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(out2.at({i, j}) ==
                  doctest::Approx((v2.at({0, j}) + v2.at({1, j})) / 2).epsilon(1e-10));

    // direct-formula oracle at 64-bit
    auto qq = rand_tensor({4, 8}, rng);
    auto kk = rand_tensor({4, 8}, rng);
    auto vv = rand_tensor({4, 3}, rng);
    auto got = scaled_dot_attention(qq, kk, vv);
    const double scale = 1.0 / std::sqrt(8.0);
    for (int i = 0; i < 4; ++i) {
        std::vector<double> scores(4);
        for (int j = 0; j < 4; ++j) {
            double s = 0;
            for (int x = 0; x < 8; ++x) s += qq.at({i, x}) * kk.at({j, x});
            scores[static_cast<std::size_t>(j)] = s * scale;
        }
        auto w = oracles::direct_softmax(scores);
        for (int x = 0; x < 3; ++x) {
            double expect = 0;
            for (int j = 0; j < 4; ++j) expect += w[static_cast<std::size_t>(j)] * vv.at({j, x});
            CHECK(got.at({i, x}) == doctest::Approx(expect).epsilon(1e-6));
        }
    }

    CHECK_THROWS_AS(scaled_dot_attention(qq, rand_tensor({4, 7}, rng), vv), ShapeError);
}

TEST_CASE("multi_head_attention examples") {
    Rng rng(2);
    // h=1 with identity projections equals plain scaled-dot attention
    MultiHeadParams<double> p;
    p.heads = 1;
    p.d_model = p.d_k = p.d_v = 4;
    p.wq = {Tensor64::eye(4)};
    p.wk = {Tensor64::eye(4)};
    p.wv = {Tensor64::eye(4)};
    p.wo = Tensor64::eye(4);
    auto q = rand_tensor({5, 4}, rng);
    auto k = rand_tensor({6, 4}, rng);
    auto v = rand_tensor({6, 4}, rng);
    auto got = multi_head_attention(q, k, v, p);
    auto ref = scaled_dot_attention(q, k, v);
    for (std::size_t i = 0; i < ref.numel(); ++i)
        CHECK(got.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));

    // zero W^O nulls the output
    MultiHeadParams<double> pz = MultiHeadParams<double>::init(2, 4, 3, 3, rng);
    pz.wo = Tensor64::zeros({6, 4});
    for (double x : multi_head_attention(q, k, v, pz).data()) CHECK(x == 0.0);

    // h=2 equals the per-head direct computation concatenated then mixed
    MultiHeadParams<double> p2 = MultiHeadParams<double>::init(2, 4, 3, 3, rng);
    auto full = multi_head_attention(q, k, v, p2);
    auto h0 = scaled_dot_attention(matmul(q, p2.wq[0]), matmul(k, p2.wk[0]), matmul(v, p2.wv[0]));
    auto h1 = scaled_dot_attention(matmul(q, p2.wq[1]), matmul(k, p2.wk[1]), matmul(v, p2.wv[1]));
    auto ref2 = matmul(concat<double>({h0, h1}, 1), p2.wo);
    for (std::size_t i = 0; i < ref2.numel(); ++i)
        CHECK(full.data()[i] == doctest::Approx(ref2.data()[i]).epsilon(1e-6));

    MultiHeadParams<double> bad = MultiHeadParams<double>::init(2, 4, 3, 3, rng);
    bad.wk.pop_back();
    CHECK_THROWS_AS(multi_head_attention(q, k, v, bad), ConfigError);
}

TEST_CASE("lsh_hash determinism and scale invariance") {
    Rng rng(3);
    auto u = rand_tensor({1, 8}, rng);
    auto uu = concat<double>({u, u}, 0);
    for (int round = 0; round < 4; ++round) {
        auto b = lsh_hash(uu, 8, 42, round);
        CHECK(b[0] == b[1]);
    }

    auto scaled = concat<double>({u, mul(u, 3.7)}, 0);
    for (int round = 0; round < 4; ++round) {
        auto b = lsh_hash(scaled, 8, 42, round);
        CHECK(b[0] == b[1]);
    }

    CHECK_THROWS_AS(lsh_hash(u, 5, 42, 0), ConfigError);
}

TEST_CASE("lsh_hash collision statistics favor near-duplicates") {
    Rng rng(4);
    const int n = 64, d = 16;
    auto base = rand_tensor({n, d}, rng);
    // near-duplicates: tiny perturbations (cosine >= 0.99)
    Tensor64 pert = Tensor64::zeros({n, d});
    for (int i = 0; i < n; ++i) {
        double norm = 0;
        for (int j = 0; j < d; ++j) norm += base.at({i, j}) * base.at({i, j});
        norm = std::sqrt(norm);
        for (int j = 0; j < d; ++j)
            pert.mutable_data()[static_cast<std::size_t>(i) * d + j] =
                base.at({i, j}) + rng.normal() * 0.02 * norm / std::sqrt(static_cast<double>(d));
    }
    double near_hits = 0, random_hits = 0, near_all = 0, random_all = 0;
    for (int round = 0; round < 8; ++round) {
        auto hb = lsh_hash(base, 16, 7, round);
        auto hp = lsh_hash(pert, 16, 7, round);
        for (int i = 0; i < n; ++i) {
            near_hits += hb[static_cast<std::size_t>(i)] == hp[static_cast<std::size_t>(i)];
            near_all += 1;
            const int j = (i + 17) % n;  // unrelated pair
            random_hits += hb[static_cast<std::size_t>(i)] == hb[static_cast<std::size_t>(j)];
            random_all += 1;
        }
    }
    CHECK(near_hits / near_all > random_hits / random_all);
    CHECK(near_hits / near_all > 0.5);
}

TEST_CASE("shared_qk_normalize examples") {
    Rng rng(5);
    // already unit-norm rows come back unchanged
    auto q = rand_tensor({4, 6}, rng);
    {
        auto d = q.mutable_data();
        for (int i = 0; i < 4; ++i) {
            double norm = 0;
            for (int j = 0; j < 6; ++j) norm += d[static_cast<std::size_t>(i) * 6 + j] * d[static_cast<std::size_t>(i) * 6 + j];
            norm = std::sqrt(norm);
            for (int j = 0; j < 6; ++j) d[static_cast<std::size_t>(i) * 6 + j] /= norm;
        }
    }
    auto [q1, k1] = shared_qk_normalize(q);
    for (std::size_t i = 0; i < q.numel(); ++i)
        CHECK(k1.data()[i] == doctest::Approx(q.data()[i]).epsilon(1e-12));

    auto two = Tensor64::from({1, 4}, {2, 0, 0, 0});
    auto [q2, k2] = shared_qk_normalize(two);
    CHECK(k2.at({0, 0}) == doctest::Approx(1.0).epsilon(1e-12));

    // h^g(q_i) == h^g(k_i) for all positions and rounds
    auto qr = rand_tensor({16, 8}, rng, false, -2, 2);
    auto [q3, k3] = shared_qk_normalize(qr);
    for (int g = 0; g < 4; ++g) {
        auto hq = lsh_hash(q3, 8, 99, g);
        auto hk = lsh_hash(k3, 8, 99, g);
        CHECK(hq == hk);
    }
}

TEST_CASE("lsh_attention: degenerate bucket equals causal exact attention") {
    Rng rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        const int l = 8 << trial;  // 8..128
        auto q = rand_tensor({l, 8}, rng);
        auto v = rand_tensor({l, 5}, rng);
        LshAttentionConfig cfg;
        cfg.rounds = 1;
        cfg.n_buckets = 1;
        cfg.chunk_len = l;
        cfg.seed = 3;
        auto got = lsh_attention(q, v, cfg);
        auto ref = oracles::exact_causal_shared_qk(q, v);
        for (std::size_t i = 0; i < ref.size(); ++i)
            CHECK(got.data()[i] == doctest::Approx(ref[i]).epsilon(1e-5));
    }
}

TEST_CASE("lsh_attention: first position attends only to itself") {
    Rng rng(7);
    auto q = rand_tensor({16, 4}, rng);
    auto v = rand_tensor({16, 3}, rng);
    LshAttentionConfig cfg;
    cfg.rounds = 2;
    cfg.n_buckets = 4;
    cfg.chunk_len = 4;
    cfg.seed = 5;
    auto out = lsh_attention(q, v, cfg);
    for (int x = 0; x < 3; ++x)
        CHECK(out.at({0, x}) == doctest::Approx(v.at({0, x})).epsilon(1e-6));
}

TEST_CASE("lsh_attention equals the explicit-mask oracle") {
    Rng rng(8);
    struct Case {
        int l, d, rounds, buckets, chunk;
    };
    for (const Case& c : {Case{64, 16, 4, 8, 16}, Case{64, 16, 2, 16, 8}, Case{32, 8, 3, 4, 8},
                          Case{48, 4, 2, 6, 12}}) {
        auto q = rand_tensor({c.l, c.d}, rng);
        auto v = rand_tensor({c.l, c.d / 2}, rng);
        LshAttentionConfig cfg;
        cfg.rounds = c.rounds;
        cfg.n_buckets = c.buckets;
        cfg.chunk_len = c.chunk;
        cfg.seed = 17 + static_cast<std::uint64_t>(c.l);
        BucketAssignment asg;
        auto got = lsh_attention(q, v, cfg, &asg);
        auto ref = oracles::explicit_mask_lsh_oracle(q, v, asg);
        for (std::size_t i = 0; i < ref.size(); ++i)
            CHECK(got.data()[i] == doctest::Approx(ref[i]).epsilon(1e-4));
    }
}

TEST_CASE("lsh_attention: chunk divisibility and config errors") {
    Rng rng(9);
    auto q = rand_tensor({12, 4}, rng);
    auto v = rand_tensor({12, 4}, rng);
    LshAttentionConfig cfg;
    cfg.chunk_len = 5;  // does not divide 12
    CHECK_THROWS_AS(lsh_attention(q, v, cfg), ConfigError);
    cfg.chunk_len = 4;
    cfg.n_buckets = 3;
    CHECK_THROWS_AS(lsh_attention(q, v, cfg), ConfigError);
    cfg.n_buckets = 2;
    cfg.rounds = 0;
    CHECK_THROWS_AS(lsh_attention(q, v, cfg), ConfigError);
}

TEST_CASE("lsh_attention: score shift invariance") {
    Rng rng(10);
    auto q = rand_tensor({32, 8}, rng);
    auto v = rand_tensor({32, 4}, rng);
    LshAttentionConfig cfg;
    cfg.rounds = 2;
    cfg.n_buckets = 4;
    cfg.chunk_len = 8;
    cfg.seed = 23;
    auto base = lsh_attention(q, v, cfg);
    cfg.score_bias = 7.5;
    auto shifted = lsh_attention(q, v, cfg);
    for (std::size_t i = 0; i < base.numel(); ++i)
        CHECK(shifted.data()[i] == doctest::Approx(base.data()[i]).epsilon(1e-6));
}

TEST_CASE("lsh_attention: multi-round recall of the causal top-1 key is non-decreasing") {
    Rng rng(11);
    const int l = 64, d = 8;
    std::vector<double> recalls;
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        auto q = rand_tensor({l, d}, rng);
        auto [qq, kk] = shared_qk_normalize(q);
        // exact causal top-1 key per position (self excluded)
        std::vector<int> top1(static_cast<std::size_t>(l), -1);
        for (int i = 1; i < l; ++i) {
            double best = -1e300;
            for (int j = 0; j < i; ++j) {
                double s = 0;
                for (int x = 0; x < d; ++x) s += qq.at({i, x}) * kk.at({j, x});
                if (s > best) {
                    best = s;
                    top1[static_cast<std::size_t>(i)] = j;
                }
            }
        }
        double prev = -1.0;
        for (int rounds : {1, 2, 4, 8}) {
            // P_i from the union of per-round bucket matches
            std::vector<std::vector<int>> buckets;
            for (int g = 0; g < rounds; ++g) buckets.push_back(lsh_hash(kk, 8, seed, g));
            int hit = 0, total = 0;
            for (int i = 1; i < l; ++i) {
                const int j = top1[static_cast<std::size_t>(i)];
                bool in = false;
                for (int g = 0; g < rounds; ++g)
                    in = in || buckets[static_cast<std::size_t>(g)][static_cast<std::size_t>(i)] ==
                                   buckets[static_cast<std::size_t>(g)][static_cast<std::size_t>(j)];
                hit += in;
                total += 1;
            }
            const double recall = static_cast<double>(hit) / total;
            CHECK(recall >= prev);  // rounds are nested unions
            prev = recall;
        }
        recalls.push_back(prev);
    }
    for (double r : recalls) CHECK(r > 0.2);
}

TEST_CASE("lsh_attention memory: no quadratic buffer on a mid-size sequence") {
    Rng rng(12);
    const int l = 512, m = 32;
    auto q = rand_tensor({l, 16}, rng);
    auto v = rand_tensor({l, 16}, rng);
    LshAttentionConfig cfg;
    cfg.rounds = 2;
    cfg.n_buckets = 16;
    cfg.chunk_len = m;
    AllocMeter meter;
    {
        MeterScope scope(meter);
        NoGradGuard ng;
        auto out = lsh_attention(q, v, cfg);
        CHECK(out.numel() == static_cast<std::size_t>(l) * 16);
    }
    CHECK(meter.peak() <= 8 * l * m);
    CHECK(meter.largest_block() < static_cast<std::int64_t>(l) * l);
}

TEST_CASE("attention_gate_2d: shape contract and padding path") {
    Rng rng(13);
    LshAttentionConfig cfg;
    cfg.rounds = 2;
    cfg.n_buckets = 4;
    cfg.chunk_len = 16;
    auto gate = AttentionGateParams<double>::init(3, 4, cfg, rng);
    auto skip = rand_tensor({2, 3, 8, 8}, rng);
    auto g = rand_tensor({2, 3, 8, 8}, rng);
    auto out = attention_gate_2d(skip, g, gate);
    CHECK(out.shape() == skip.shape());

    // 6x6 = 36 positions, chunk 16 forces padding to 48
    auto skip2 = rand_tensor({1, 3, 6, 6}, rng);
    auto g2 = rand_tensor({1, 3, 6, 6}, rng);
    auto out2 = attention_gate_2d(skip2, g2, gate);
    CHECK(out2.shape() == skip2.shape());
    for (double x : out2.data()) CHECK(std::isfinite(x));

    CHECK_THROWS_AS(attention_gate_2d(skip, rand_tensor({2, 3, 4, 4}, rng), gate), ShapeError);
}

TEST_CASE("attention_gate_2d: zero projection mixes bucket-window averages") {
    Rng rng(14);
    LshAttentionConfig cfg;
    cfg.rounds = 2;
    cfg.n_buckets = 4;
    cfg.chunk_len = 8;
    AttentionGateParams<double> gate;
    gate.cfg = cfg;
    gate.wq = Tensor64::zeros({2, 4});
    const int H = 4, W = 4, l = H * W;
    auto skip = rand_tensor({1, 2, H, W}, rng);
    auto g = rand_tensor({1, 2, H, W}, rng);
    auto out = attention_gate_2d(skip, g, gate);

    // all queries are zero -> one bucket, identity sort; every position
    // averages the causal window minus itself (or keeps itself at i=0)
    for (int pos = 0; pos < l; ++pos) {
        const int chunk = pos / cfg.chunk_len;
        const int lo = std::max(0, (chunk - 1) * cfg.chunk_len);
        for (int ch = 0; ch < 2; ++ch) {
            double expect = 0;
            int count = 0;
            for (int j = lo; j < pos; ++j) {
                expect += skip.at({0, ch, j / W, j % W});
                ++count;
            }
            if (count == 0) {
                expect = skip.at({0, ch, pos / W, pos % W});
            } else {
                expect /= count;
            }
            CHECK(out.at({0, ch, pos / W, pos % W}) == doctest::Approx(expect).epsilon(1e-5));
        }
    }
}
