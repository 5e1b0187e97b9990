#pragma once

#include <cstdint>
#include <memory>

#include "raunet/ops.hpp"
#include "raunet/random.hpp"

namespace raunet {

// ---------------------------------------------------------------------------
// scaled dot-product and multi-head attention

template <typename S>
Tensor<S> scaled_dot_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.extent(1) != k.extent(1) ||
        k.extent(0) != v.extent(0))
        throw ShapeError("scaled_dot_attention: incompatible shapes Q" + shape_str(q.shape()) +
                         " K" + shape_str(k.shape()) + " V" + shape_str(v.shape()));
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(q.extent(1)));
    Tensor<S> scores = mul(matmul(q, transpose(k)), inv_sqrt);
    return matmul(softmax(scores, 1), v);
}

template <typename S>
struct MultiHeadParams {
    int heads = 1;
    int d_model = 0, d_k = 0, d_v = 0;
    std::vector<Tensor<S>> wq, wk, wv;  // heads x [d_model, d_k] / [d_model, d_v]
    Tensor<S> wo;                       // [heads*d_v, d_model]

    void validate() const {
        if (heads < 1 || static_cast<int>(wq.size()) != heads ||
            static_cast<int>(wk.size()) != heads || static_cast<int>(wv.size()) != heads)
            throw ConfigError("multi-head attention: need one Q/K/V projection per head");
        for (int h = 0; h < heads; ++h) {
            if (wq[h].shape() != Shape{d_model, d_k} || wk[h].shape() != Shape{d_model, d_k} ||
                wv[h].shape() != Shape{d_model, d_v})
                throw ConfigError("multi-head attention: head " + std::to_string(h) +
                                  " projection shapes inconsistent with d_model=" +
                                  std::to_string(d_model) + " d_k=" + std::to_string(d_k) +
                                  " d_v=" + std::to_string(d_v));
        }
        if (wo.shape() != Shape{heads * d_v, d_model})
            throw ConfigError("multi-head attention: W^O must be [" +
                              std::to_string(heads * d_v) + ", " + std::to_string(d_model) +
                              "], got " + shape_str(wo.shape()));
    }

    static MultiHeadParams init(int heads, int d_model, int d_k, int d_v, Rng& rng) {
        MultiHeadParams p;
        p.heads = heads;
        p.d_model = d_model;
        p.d_k = d_k;
        p.d_v = d_v;
        auto make = [&](int r, int c) {
            Tensor<S> t = Tensor<S>::zeros({r, c}, true);
            const double bound = std::sqrt(6.0 / r);
            for (auto& x : t.mutable_data()) x = static_cast<S>(rng.uniform(-bound, bound));
            return t;
        };
        for (int h = 0; h < heads; ++h) {
            p.wq.push_back(make(d_model, d_k));
            p.wk.push_back(make(d_model, d_k));
            p.wv.push_back(make(d_model, d_v));
        }
        p.wo = make(heads * d_v, d_model);
        return p;
    }
};

template <typename S>
Tensor<S> multi_head_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                               const MultiHeadParams<S>& p) {
    p.validate();
    if (q.rank() != 2 || q.extent(1) != p.d_model || k.extent(1) != p.d_model ||
        v.extent(1) != p.d_model)
        throw ConfigError("multi-head attention: inputs must have feature dim d_model=" +
                          std::to_string(p.d_model) + ", got Q" + shape_str(q.shape()) + " K" +
                          shape_str(k.shape()) + " V" + shape_str(v.shape()));
    std::vector<Tensor<S>> heads;
    heads.reserve(static_cast<std::size_t>(p.heads));
    for (int h = 0; h < p.heads; ++h)
        heads.push_back(scaled_dot_attention(matmul(q, p.wq[static_cast<std::size_t>(h)]),
                                             matmul(k, p.wk[static_cast<std::size_t>(h)]),
                                             matmul(v, p.wv[static_cast<std::size_t>(h)])));
    return matmul(concat(heads, 1), p.wo);
}

// ---------------------------------------------------------------------------
// LSH attention

struct LshAttentionConfig {
    int rounds = 1;        // n_r: number of independent hash rounds
    int n_buckets = 2;     // buckets per round; even, or 1 for the degenerate case
    int chunk_len = 0;     // m; 0 selects the default rule min(l, 2l/rounds)
    std::uint64_t seed = 0;
    double score_bias = 0.0;  // constant added to every pre-softmax score (shift-invariance hook)

    int resolved_chunk(int seq_len) const {
        int m = chunk_len;
        if (m == 0) m = std::min(seq_len, std::max(1, 2 * seq_len / std::max(1, rounds)));
        return m;
    }

    void validate(int seq_len) const {
        if (rounds < 1) throw ConfigError("lsh attention: rounds must be >= 1");
        if (n_buckets < 1 || (n_buckets > 1 && n_buckets % 2 != 0))
            throw ConfigError("lsh attention: n_buckets must be even (or 1), got " +
                              std::to_string(n_buckets));
        const int m = resolved_chunk(seq_len);
        if (m < 1 || seq_len % m != 0)
            throw ConfigError("lsh attention: chunk length m=" + std::to_string(m) +
                              " must divide sequence length l=" + std::to_string(seq_len));
    }
};

// Per-round bucket ids and the sorted position order they induce. Everything
// a brute-force reconstruction of the candidate sets needs.
struct BucketAssignment {
    int rounds = 0;
    int n_buckets = 0;
    int seq_len = 0;
    int chunk_len = 0;
    std::vector<std::vector<int>> bucket_ids;    // [round][position]
    std::vector<std::vector<int>> sorted_order;  // [round][rank] -> position
};

// Angular LSH: project the L2-normalized vector with a seeded Gaussian matrix
// R[d, n_buckets/2]; the bucket is the argmax over [proj; -proj]. Scale
// invariant by construction. Zero rows are normalized with an epsilon floor,
// which leaves them at the origin and deterministically in bucket 0.
template <typename S>
std::vector<int> lsh_hash(const Tensor<S>& vectors, int n_buckets, std::uint64_t seed,
                          int round) {
    if (vectors.rank() != 2)
        throw ShapeError("lsh_hash: expects [l, d], got " + shape_str(vectors.shape()));
    if (n_buckets < 1 || (n_buckets > 1 && n_buckets % 2 != 0))
        throw ConfigError("lsh_hash: n_buckets must be even (or 1), got " +
                          std::to_string(n_buckets));
    const int l = vectors.extent(0), d = vectors.extent(1);
    std::vector<int> buckets(static_cast<std::size_t>(l), 0);
    if (n_buckets == 1) return buckets;

    const int half = n_buckets / 2;
    Rng rng(derive_seed(seed, 0x6c7368ULL /*"lsh"*/, static_cast<std::uint64_t>(round)));
    std::vector<double> rot(static_cast<std::size_t>(d) * half);
    for (auto& x : rot) x = rng.normal();

    const S* data = vectors.data().data();
    for (int i = 0; i < l; ++i) {
        const S* row = data + static_cast<std::size_t>(i) * d;
        double norm = 0.0;
        for (int j = 0; j < d; ++j) norm += static_cast<double>(row[j]) * row[j];
        norm = std::max(std::sqrt(norm), 1e-12);
        int best = 0;
        double best_v = -std::numeric_limits<double>::infinity();
        for (int p = 0; p < half; ++p) {
            double proj = 0.0;
            for (int j = 0; j < d; ++j) proj += static_cast<double>(row[j]) / norm * rot[static_cast<std::size_t>(j) * half + p];
            if (proj > best_v) { best_v = proj; best = p; }
            if (-proj > best_v) { best_v = -proj; best = p + half; }
        }
        buckets[static_cast<std::size_t>(i)] = best;
    }
    return buckets;
}

// Shared-QK: the key of position i is q_i / ||q_i||, so queries and keys of
// the same position always land in the same bucket.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> shared_qk_normalize(const Tensor<S>& q) {
    if (q.rank() != 2)
        throw ShapeError("shared_qk_normalize: expects [l, d], got " + shape_str(q.shape()));
    const int l = q.extent(0), d = q.extent(1);
    constexpr double kEps = 1e-12;

    auto norms = std::make_shared<MVec<S>>(static_cast<std::size_t>(l));
    Tensor<S> k = detail::make_op<S>(
        q.shape(), {q}, [l, d, norms](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int i = 0; i < l; ++i) {
                const S* krow = node.data.data() + static_cast<std::size_t>(i) * d;
                const S* grow = node.grad.data() + static_cast<std::size_t>(i) * d;
                S* dst = p.grad.data() + static_cast<std::size_t>(i) * d;
                const S inv_n = S(1) / (*norms)[static_cast<std::size_t>(i)];
                S dot = S(0);
                for (int j = 0; j < d; ++j) dot += grow[j] * krow[j];
                for (int j = 0; j < d; ++j) dst[j] += (grow[j] - krow[j] * dot) * inv_n;
            }
        });

    const S* src = q.data().data();
    S* dst = k.mutable_data().data();
    for (int i = 0; i < l; ++i) {
        const S* row = src + static_cast<std::size_t>(i) * d;
        double n2 = 0.0;
        for (int j = 0; j < d; ++j) n2 += static_cast<double>(row[j]) * row[j];
        const S n = static_cast<S>(std::max(std::sqrt(n2), kEps));
        (*norms)[static_cast<std::size_t>(i)] = n;
        S* out = dst + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) out[j] = row[j] / n;
    }
    return {q, k};
}

namespace detail {

// Chunk layout shared by the forward and backward sweeps: block `c` of round
// `g` covers sorted ranks [c*m, (c+1)*m) with candidate ranks
// [(c-1)*m, (c+1)*m) clipped at 0 (the own-plus-previous-chunk window).
struct LshPlan {
    int l = 0, d = 0, dv = 0, m = 0, rounds = 0, n_buckets = 0;
    int valid_len = 0;  // positions >= valid_len are padding, never attended to
    double scale = 0.0;
    double score_bias = 0.0;
    std::vector<std::vector<int>> buckets;
    std::vector<std::vector<int>> order;

    int round_count(int i, int j) const {
        int c = 0;
        for (int g = 0; g < rounds; ++g)
            c += buckets[static_cast<std::size_t>(g)][static_cast<std::size_t>(i)] ==
                 buckets[static_cast<std::size_t>(g)][static_cast<std::size_t>(j)];
        return c;
    }
};

// Visit every (round, chunk) block. `fn(g, rows, cands, scores)` receives the
// original position ids of the block's rows and candidate columns plus the
// fully penalized scores (already includes causal / bucket / self masking) as
// a rows.size() x cands.size() row-major buffer.
template <typename S, typename Fn>
void lsh_sweep_blocks(const LshPlan& plan, const S* q, const S* k, Fn&& fn) {
    const int m = plan.m, d = plan.d;
    const int n_chunks = plan.l / m;
    MVec<S> qrows(static_cast<std::size_t>(m) * d);
    MVec<S> kcols(static_cast<std::size_t>(2 * m) * d);
    MVec<S> kct(static_cast<std::size_t>(d) * 2 * m);
    MVec<S> scores(static_cast<std::size_t>(m) * 2 * m);
    std::vector<int> rows(static_cast<std::size_t>(m));
    std::vector<int> cands;
    cands.reserve(static_cast<std::size_t>(2 * m));

    for (int g = 0; g < plan.rounds; ++g) {
        const auto& order = plan.order[static_cast<std::size_t>(g)];
        const auto& bucket = plan.buckets[static_cast<std::size_t>(g)];
        for (int c = 0; c < n_chunks; ++c) {
            const int row_begin = c * m;
            const int cand_begin = std::max(0, (c - 1) * m);
            const int n_cand = row_begin + m - cand_begin;
            cands.assign(order.begin() + cand_begin, order.begin() + row_begin + m);
            for (int r = 0; r < m; ++r) rows[static_cast<std::size_t>(r)] = order[static_cast<std::size_t>(row_begin + r)];

            for (int r = 0; r < m; ++r)
                std::memcpy(qrows.data() + static_cast<std::size_t>(r) * d,
                            q + static_cast<std::size_t>(rows[static_cast<std::size_t>(r)]) * d,
                            static_cast<std::size_t>(d) * sizeof(S));
            for (int t = 0; t < n_cand; ++t)
                std::memcpy(kcols.data() + static_cast<std::size_t>(t) * d,
                            k + static_cast<std::size_t>(cands[static_cast<std::size_t>(t)]) * d,
                            static_cast<std::size_t>(d) * sizeof(S));
            transpose2d(kcols.data(), kct.data(), n_cand, d);
            gemm_nn(qrows.data(), kct.data(), scores.data(), m, d, n_cand, false);

            const S neg_inf = -std::numeric_limits<S>::infinity();
            for (int r = 0; r < m; ++r) {
                const int oi = rows[static_cast<std::size_t>(r)];
                S* srow = scores.data() + static_cast<std::size_t>(r) * n_cand;
                for (int t = 0; t < n_cand; ++t) {
                    const int oj = cands[static_cast<std::size_t>(t)];
                    if (oj > oi || oi >= plan.valid_len || oj >= plan.valid_len ||
                        bucket[static_cast<std::size_t>(oi)] != bucket[static_cast<std::size_t>(oj)]) {
                        srow[t] = neg_inf;
                        continue;
                    }
                    S s = static_cast<S>(srow[t] * plan.scale + plan.score_bias);
                    if (oi == oj)
                        s -= S(1e5);
                    else
                        s -= static_cast<S>(std::log(static_cast<double>(plan.round_count(oi, oj))));
                    srow[t] = s;
                }
            }
            fn(g, std::span<const int>(rows.data(), static_cast<std::size_t>(m)),
               std::span<const int>(cands.data(), static_cast<std::size_t>(n_cand)),
               scores.data());
        }
    }
}

// Fused LSH attention core. Streams chunk blocks through a running
// log-sum-exp merge so no l x l buffer ever exists; the backward pass
// recomputes block scores instead of storing them.
template <typename S>
Tensor<S> lsh_attention_core(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                             const LshAttentionConfig& cfg, int valid_len,
                             BucketAssignment* record) {
    const int l = q.extent(0), d = q.extent(1), dv = v.extent(1);
    const int m = cfg.resolved_chunk(l);

    auto plan = std::make_shared<LshPlan>();
    plan->l = l;
    plan->d = d;
    plan->dv = dv;
    plan->m = m;
    plan->rounds = cfg.rounds;
    plan->n_buckets = cfg.n_buckets;
    plan->valid_len = valid_len;
    plan->scale = 1.0 / std::sqrt(static_cast<double>(d));
    plan->score_bias = cfg.score_bias;
    plan->buckets.resize(static_cast<std::size_t>(cfg.rounds));
    plan->order.resize(static_cast<std::size_t>(cfg.rounds));
    for (int g = 0; g < cfg.rounds; ++g) {
        auto b = lsh_hash(k, cfg.n_buckets, cfg.seed, g);
        // padding positions get a sentinel bucket no real position shares
        for (int i = valid_len; i < l; ++i) b[static_cast<std::size_t>(i)] = cfg.n_buckets;
        std::vector<int> ord(static_cast<std::size_t>(l));
        std::iota(ord.begin(), ord.end(), 0);
        std::stable_sort(ord.begin(), ord.end(), [&b](int x, int y) {
            return b[static_cast<std::size_t>(x)] < b[static_cast<std::size_t>(y)];
        });
        plan->buckets[static_cast<std::size_t>(g)] = std::move(b);
        plan->order[static_cast<std::size_t>(g)] = std::move(ord);
    }
    if (record) {
        record->rounds = cfg.rounds;
        record->n_buckets = cfg.n_buckets;
        record->seq_len = l;
        record->chunk_len = m;
        record->bucket_ids = plan->buckets;
        record->sorted_order = plan->order;
    }

    // z survives for the backward recomputation
    auto zfinal = std::make_shared<MVec<S>>(static_cast<std::size_t>(l));

    Tensor<S> out = make_op<S>(
        {l, dv}, {q, k, v}, [plan, zfinal](Node<S>& node) {
            auto& pq = *node.parents[0];
            auto& pk = *node.parents[1];
            auto& pv = *node.parents[2];
            const int d = plan->d, dv = plan->dv, l = plan->l;
            if (pq.requires_grad) pq.ensure_grad();
            if (pk.requires_grad) pk.ensure_grad();
            if (pv.requires_grad) pv.ensure_grad();

            // r_i = dout_i . out_i
            MVec<S> r(static_cast<std::size_t>(l));
            for (int i = 0; i < l; ++i) {
                S acc = S(0);
                const S* go = node.grad.data() + static_cast<std::size_t>(i) * dv;
                const S* oo = node.data.data() + static_cast<std::size_t>(i) * dv;
                for (int j = 0; j < dv; ++j) acc += go[j] * oo[j];
                r[static_cast<std::size_t>(i)] = acc;
            }
            const S scale = static_cast<S>(plan->scale);
            lsh_sweep_blocks<S>(
                *plan, pq.data.data(), pk.data.data(),
                [&](int, std::span<const int> rows, std::span<const int> cands, const S* scores) {
                    const int n_cand = static_cast<int>(cands.size());
                    for (int ri = 0; ri < static_cast<int>(rows.size()); ++ri) {
                        const int oi = rows[static_cast<std::size_t>(ri)];
                        const S* srow = scores + static_cast<std::size_t>(ri) * n_cand;
                        const S* gout = node.grad.data() + static_cast<std::size_t>(oi) * dv;
                        const S zi = (*zfinal)[static_cast<std::size_t>(oi)];
                        for (int t = 0; t < n_cand; ++t) {
                            if (srow[t] == -std::numeric_limits<S>::infinity()) continue;
                            const int oj = cands[static_cast<std::size_t>(t)];
                            const S e = std::exp(srow[t] - zi);
                            if (e == S(0)) continue;
                            if (pv.requires_grad) {
                                S* dvj = pv.grad.data() + static_cast<std::size_t>(oj) * dv;
                                for (int x = 0; x < dv; ++x) dvj[x] += e * gout[x];
                            }
                            if (!pq.requires_grad && !pk.requires_grad) continue;
                            const S* vj = pv.data.data() + static_cast<std::size_t>(oj) * dv;
                            S u = S(0);
                            for (int x = 0; x < dv; ++x) u += gout[x] * vj[x];
                            const S ds = e * (u - r[static_cast<std::size_t>(oi)]) * scale;
                            if (pq.requires_grad) {
                                S* dqi = pq.grad.data() + static_cast<std::size_t>(oi) * d;
                                const S* kj = pk.data.data() + static_cast<std::size_t>(oj) * d;
                                for (int x = 0; x < d; ++x) dqi[x] += ds * kj[x];
                            }
                            if (pk.requires_grad) {
                                S* dkj = pk.grad.data() + static_cast<std::size_t>(oj) * d;
                                const S* qi = pq.data.data() + static_cast<std::size_t>(oi) * d;
                                for (int x = 0; x < d; ++x) dkj[x] += ds * qi[x];
                            }
                        }
                    }
                });
        });

    // forward: streaming log-sum-exp merge across rounds and chunks
    S* op = out.mutable_data().data();
    std::fill(op, op + out.numel(), S(0));
    MVec<S>& z = *zfinal;
    std::fill(z.begin(), z.end(), -std::numeric_limits<S>::infinity());
    const S* vp = v.data().data();
    lsh_sweep_blocks<S>(
        *plan, q.data().data(), k.data().data(),
        [&](int, std::span<const int> rows, std::span<const int> cands, const S* scores) {
            const int n_cand = static_cast<int>(cands.size());
            for (int ri = 0; ri < static_cast<int>(rows.size()); ++ri) {
                const int oi = rows[static_cast<std::size_t>(ri)];
                const S* srow = scores + static_cast<std::size_t>(ri) * n_cand;
                S mx = -std::numeric_limits<S>::infinity();
                for (int t = 0; t < n_cand; ++t) mx = std::max(mx, srow[t]);
                if (mx == -std::numeric_limits<S>::infinity()) continue;  // pure padding row
                S sum = S(0);
                for (int t = 0; t < n_cand; ++t)
                    if (srow[t] != -std::numeric_limits<S>::infinity())
                        sum += std::exp(srow[t] - mx);
                const S zg = mx + std::log(sum);

                S& zi = z[static_cast<std::size_t>(oi)];
                const S znew = zi == -std::numeric_limits<S>::infinity()
                                   ? zg
                                   : std::max(zi, zg) + std::log(std::exp(std::min(zi, zg) -
                                                                          std::max(zi, zg)) +
                                                                 S(1));
                S* orow = op + static_cast<std::size_t>(oi) * dv;
                if (zi != -std::numeric_limits<S>::infinity() && znew != zi) {
                    const S rescale = std::exp(zi - znew);
                    for (int x = 0; x < dv; ++x) orow[x] *= rescale;
                }
                for (int t = 0; t < n_cand; ++t) {
                    if (srow[t] == -std::numeric_limits<S>::infinity()) continue;
                    const S w = std::exp(srow[t] - znew);
                    if (w == S(0)) continue;
                    const S* vrow = vp + static_cast<std::size_t>(cands[static_cast<std::size_t>(t)]) * dv;
                    for (int x = 0; x < dv; ++x) orow[x] += w * vrow[x];
                }
                zi = znew;
            }
        });
    return out;
}

}  // namespace detail

// Memory-bounded causal self-attention over LSH buckets. Keys are the
// shared-QK normalization of the queries; positions attend within their
// bucket through sorted chunks of length m (own plus previous chunk), with
// the self position demoted by a 1e5 penalty and duplicate cross-round pairs
// corrected by a log-multiplicity term. Peak workspace is O(l*m) scalars.
template <typename S>
Tensor<S> lsh_attention(const Tensor<S>& q, const Tensor<S>& v, const LshAttentionConfig& cfg,
                        BucketAssignment* record = nullptr) {
    if (q.rank() != 2 || v.rank() != 2 || q.extent(0) != v.extent(0))
        throw ShapeError("lsh_attention: expects Q[l,d] and V[l,dv] with equal l, got " +
                         shape_str(q.shape()) + " and " + shape_str(v.shape()));
    cfg.validate(q.extent(0));
    auto [qq, kk] = shared_qk_normalize(q);
    return detail::lsh_attention_core(qq, kk, v, cfg, q.extent(0), record);
}

// ---------------------------------------------------------------------------
// 2D attention gate for skip connections

template <typename S>
struct AttentionGateParams {
    Tensor<S> wq;  // [C, d_k] 1x1 projection of (skip + gate) features
    LshAttentionConfig cfg;

    static AttentionGateParams init(int channels, int d_k, LshAttentionConfig cfg, Rng& rng) {
        AttentionGateParams p;
        p.cfg = cfg;
        p.wq = Tensor<S>::zeros({channels, d_k}, true);
        const double bound = std::sqrt(6.0 / channels);
        for (auto& x : p.wq.mutable_data()) x = static_cast<S>(rng.uniform(-bound, bound));
        return p;
    }
};

// Flatten H*W positions row-major, attend with shared-QK LSH attention using
// queries projected from (skip + gate), and reshape the mixed skip features
// back to [N,C,H,W]. If m does not divide H*W the sequence is padded with
// positions that no real position ever attends to.
template <typename S>
Tensor<S> attention_gate_2d(const Tensor<S>& skip, const Tensor<S>& gate,
                            const AttentionGateParams<S>& p) {
    if (skip.rank() != 4 || skip.shape() != gate.shape())
        throw ShapeError("attention_gate_2d: skip and gate must be aligned [N,C,H,W], got " +
                         shape_str(skip.shape()) + " and " + shape_str(gate.shape()));
    const int N = skip.extent(0), C = skip.extent(1), H = skip.extent(2), W = skip.extent(3);
    if (p.wq.rank() != 2 || p.wq.extent(0) != C)
        throw ShapeError("attention_gate_2d: projection " + shape_str(p.wq.shape()) +
                         " does not accept " + std::to_string(C) + " channels");
    const int l = H * W;
    const int m = p.cfg.resolved_chunk(l) > l ? l : p.cfg.resolved_chunk(l);
    const int padded = (l % m == 0) ? l : (l / m + 1) * m;

    std::vector<Tensor<S>> outputs;
    outputs.reserve(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        Tensor<S> skip_n = select(skip, n);                         // [C,H,W]
        Tensor<S> seq_v = transpose(reshape(skip_n, {C, l}));       // [l,C]
        Tensor<S> fused = add(skip_n, select(gate, n));
        Tensor<S> seq_q = matmul(transpose(reshape(fused, {C, l})), p.wq);  // [l,d_k]

        Tensor<S> attended;
        if (padded == l) {
            LshAttentionConfig cfg = p.cfg;
            cfg.chunk_len = m;
            attended = lsh_attention(seq_q, seq_v, cfg);
        } else {
            Tensor<S> qpad = concat<S>({seq_q, Tensor<S>::zeros({padded - l, p.wq.extent(1)})}, 0);
            Tensor<S> vpad = concat<S>({seq_v, Tensor<S>::zeros({padded - l, C})}, 0);
            LshAttentionConfig cfg = p.cfg;
            cfg.chunk_len = m;
            cfg.validate(padded);
            auto [qq, kk] = shared_qk_normalize(qpad);
            attended = slice0(detail::lsh_attention_core(qq, kk, vpad, cfg, l, nullptr), 0, l);
        }
        outputs.push_back(reshape(transpose(attended), {1, C, H, W}));
    }
    return concat(outputs, 0);
}

}  // namespace raunet
