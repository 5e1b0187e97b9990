#pragma once

#include <functional>
#include <ostream>

#include "raunet/attention.hpp"
#include "raunet/train.hpp"

namespace raunet {

// Central finite differences against reverse-mode gradients, at 64-bit.
// Checks every element by default, or `samples` randomly chosen elements per
// tensor when the parameter space is large.
struct GradCheckCase {
    std::string name;
    std::vector<std::pair<std::string, Tensor64>> params;
    std::function<Tensor64()> loss;  // rebuilds the graph from current param values
    int samples = -1;                // -1 = every element
};

struct GradCheckOutcome {
    double max_rel_err = 0.0;
    std::string worst;  // "case/tensor[index]"
};

inline double gradcheck_rel_err(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    return std::abs(analytic - numeric) / denom;
}

inline GradCheckOutcome run_gradcheck_case(const GradCheckCase& c, double h = 1e-5) {
    // analytic gradients from one reverse pass
    for (const auto& [name, t] : c.params) {
        Tensor64 tt = t;
        tt.zero_grad();
    }
    Tensor64 loss = c.loss();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (const auto& [name, t] : c.params) {
        if (!t.has_grad())
            throw Error("gradcheck '" + c.name + "': tensor '" + name + "' got no gradient");
        analytic.emplace_back(t.grad_data().begin(), t.grad_data().end());
    }

    GradCheckOutcome out;
    Rng rng(derive_seed(0x67726164ULL, std::hash<std::string>{}(c.name)));
    for (std::size_t pi = 0; pi < c.params.size(); ++pi) {
        Tensor64 t = c.params[pi].second;
        auto data = t.mutable_data();
        std::vector<std::size_t> indices;
        if (c.samples < 0 || static_cast<std::size_t>(c.samples) >= data.size()) {
            indices.resize(data.size());
            std::iota(indices.begin(), indices.end(), 0);
        } else {
            for (int s = 0; s < c.samples; ++s)
                indices.push_back(static_cast<std::size_t>(rng.below(data.size())));
        }
        for (std::size_t idx : indices) {
            const double orig = data[idx];
            data[idx] = orig + h;
            const double up = c.loss().item();
            data[idx] = orig - h;
            const double down = c.loss().item();
            data[idx] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double rel = gradcheck_rel_err(analytic[pi][idx], numeric);
            if (rel > out.max_rel_err) {
                out.max_rel_err = rel;
                out.worst = c.name + "/" + c.params[pi].first + "[" + std::to_string(idx) + "]";
            }
        }
    }
    return out;
}

namespace detail {

inline Tensor64 random_tensor(Shape shape, Rng& rng, bool requires_grad, double lo = -1.0,
                              double hi = 1.0) {
    Tensor64 t = Tensor64::zeros(std::move(shape), requires_grad);
    for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
    return t;
}

// Weighted-sum readout so every output component reaches the scalar loss.
inline Tensor64 readout(const Tensor64& y, Rng& rng) {
    Tensor64 w = random_tensor(y.shape(), rng, false);
    return sum(mul(y, w));
}

}  // namespace detail

// The standard suite: every differentiable op plus a tiny end-to-end model.
// Appends per-case outcomes to `cases` when non-null; returns the worst case.
inline GradCheckOutcome run_gradcheck_suite(std::uint64_t seed,
                                            std::vector<std::pair<std::string, double>>* cases =
                                                nullptr) {
    Rng rng(derive_seed(seed, 0x67636865ULL));
    std::vector<GradCheckCase> suite;

    auto simple = [&rng](const std::string& name, Shape shape,
                         std::function<Tensor64(const Tensor64&)> op) {
        GradCheckCase c;
        c.name = name;
        Tensor64 x = detail::random_tensor(std::move(shape), rng, true);
        c.params = {{"x", x}};
        auto r = std::make_shared<Rng>(derive_seed(0x72656164ULL, std::hash<std::string>{}(name)));
        c.loss = [x, op, r]() {
            Rng local = *r;
            return detail::readout(op(x), local);
        };
        return c;
    };

    suite.push_back(simple("relu", {3, 4}, [](const Tensor64& x) { return relu(x); }));
    suite.push_back(simple("sigmoid", {3, 4}, [](const Tensor64& x) { return sigmoid(x); }));
    suite.push_back(simple("softmax", {3, 5}, [](const Tensor64& x) { return softmax(x, 1); }));
    suite.push_back(simple("global_avg_pool", {2, 3, 4, 4},
                           [](const Tensor64& x) { return global_avg_pool(x); }));
    suite.push_back(simple("transpose", {3, 4}, [](const Tensor64& x) { return transpose(x); }));
    suite.push_back(
        simple("permute", {2, 3, 4}, [](const Tensor64& x) { return permute(x, {2, 0, 1}); }));
    suite.push_back(simple("shared_qk_normalize", {5, 3}, [](const Tensor64& x) {
        return shared_qk_normalize(x).second;
    }));

    {
        GradCheckCase c;
        c.name = "matmul";
        Tensor64 a = detail::random_tensor({3, 4}, rng, true);
        Tensor64 b = detail::random_tensor({4, 2}, rng, true);
        c.params = {{"a", a}, {"b", b}};
        c.loss = [a, b]() {
            Rng local(1);
            return detail::readout(matmul(a, b), local);
        };
        suite.push_back(std::move(c));
    }
    {
        GradCheckCase c;
        c.name = "conv2d";
        Tensor64 x = detail::random_tensor({2, 2, 5, 5}, rng, true);
        Tensor64 w = detail::random_tensor({3, 2, 3, 3}, rng, true);
        Tensor64 b = detail::random_tensor({3}, rng, true);
        c.params = {{"x", x}, {"w", w}, {"b", b}};
        c.loss = [x, w, b]() {
            Rng local(2);
            return detail::readout(conv2d(x, w, b, 2, 1), local);
        };
        suite.push_back(std::move(c));
    }
    {
        GradCheckCase c;
        c.name = "conv2d_transpose";
        Tensor64 x = detail::random_tensor({2, 3, 4, 4}, rng, true);
        Tensor64 w = detail::random_tensor({3, 2, 2, 2}, rng, true);
        Tensor64 b = detail::random_tensor({2}, rng, true);
        c.params = {{"x", x}, {"w", w}, {"b", b}};
        c.loss = [x, w, b]() {
            Rng local(3);
            return detail::readout(conv2d_transpose(x, w, b, 2), local);
        };
        suite.push_back(std::move(c));
    }
    {
        GradCheckCase c;
        c.name = "maxpool2d";
        // distinct values so the finite-difference step cannot flip an argmax
        Tensor64 x = Tensor64::zeros({1, 2, 4, 4}, true);
        {
            std::vector<std::size_t> perm(x.numel());
            std::iota(perm.begin(), perm.end(), 0);
            rng.shuffle(perm);
            auto d = x.mutable_data();
            for (std::size_t i = 0; i < d.size(); ++i)
                d[i] = 0.05 * static_cast<double>(perm[i]);
        }
        c.params = {{"x", x}};
        c.loss = [x]() {
            Rng local(4);
            return detail::readout(maxpool2d(x, 2, 2), local);
        };
        suite.push_back(std::move(c));
    }
    {
        GradCheckCase c;
        c.name = "concat_add_mul";
        Tensor64 a = detail::random_tensor({2, 3}, rng, true);
        Tensor64 b = detail::random_tensor({2, 2}, rng, true);
        c.params = {{"a", a}, {"b", b}};
        c.loss = [a, b]() {
            Rng local(5);
            Tensor64 joined = concat<double>({a, b}, 1);
            return detail::readout(mul(add(joined, joined), joined), local);
        };
        suite.push_back(std::move(c));
    }
    {
        GradCheckCase c;
        c.name = "scaled_dot_attention";
        Tensor64 q = detail::random_tensor({4, 3}, rng, true);
        Tensor64 k = detail::random_tensor({5, 3}, rng, true);
        Tensor64 v = detail::random_tensor({5, 2}, rng, true);
        c.params = {{"q", q}, {"k", k}, {"v", v}};
        c.loss = [q, k, v]() {
            Rng local(6);
            return detail::readout(scaled_dot_attention(q, k, v), local);
        };
        suite.push_back(std::move(c));
    }
    {
        GradCheckCase c;
        c.name = "multi_head_attention";
        Rng prng(derive_seed(seed, 77));
        auto mh = std::make_shared<MultiHeadParams<double>>(
            MultiHeadParams<double>::init(2, 4, 3, 3, prng));
        Tensor64 q = detail::random_tensor({4, 4}, rng, true);
        c.params = {{"q", q}, {"wq0", mh->wq[0]}, {"wk1", mh->wk[1]}, {"wo", mh->wo}};
        c.loss = [q, mh]() {
            Rng local(7);
            return detail::readout(multi_head_attention(q, q, q, *mh), local);
        };
        suite.push_back(std::move(c));
    }
    {
        GradCheckCase c;
        c.name = "lsh_attention";
        Tensor64 q = detail::random_tensor({16, 4}, rng, true);
        Tensor64 v = detail::random_tensor({16, 3}, rng, true);
        c.params = {{"q", q}, {"v", v}};
        c.loss = [q, v]() {
            LshAttentionConfig cfg;
            cfg.rounds = 2;
            cfg.n_buckets = 4;
            cfg.chunk_len = 4;
            cfg.seed = 11;
            Rng local(8);
            return detail::readout(lsh_attention(q, v, cfg), local);
        };
        suite.push_back(std::move(c));
    }
    {
        GradCheckCase c;
        c.name = "attention_gate_2d";
        Rng prng(derive_seed(seed, 78));
        LshAttentionConfig acfg;
        acfg.rounds = 2;
        acfg.n_buckets = 4;
        acfg.chunk_len = 8;
        acfg.seed = 13;
        auto gate = std::make_shared<AttentionGateParams<double>>(
            AttentionGateParams<double>::init(3, 4, acfg, prng));
        Tensor64 skip = detail::random_tensor({1, 3, 4, 4}, rng, true);
        Tensor64 g = detail::random_tensor({1, 3, 4, 4}, rng, true);
        c.params = {{"skip", skip}, {"gate_in", g}, {"wq", gate->wq}};
        c.loss = [skip, g, gate]() {
            Rng local(9);
            return detail::readout(attention_gate_2d(skip, g, *gate), local);
        };
        suite.push_back(std::move(c));
    }
    {
        GradCheckCase c;
        c.name = "resnet_block";
        Rng prng(derive_seed(seed, 79));
        auto blk = std::make_shared<ResNetBlockParams<double>>(
            ResNetBlockParams<double>::init(2, 3, 1, prng));
        Tensor64 x = detail::random_tensor({1, 2, 4, 4}, rng, true);
        c.params = {{"x", x}, {"conv1.w", blk->conv1.w}, {"conv2.w", blk->conv2.w},
                    {"proj.w", blk->proj.w}};
        c.loss = [x, blk]() {
            Rng local(10);
            return detail::readout(resnet_block_forward(x, *blk), local);
        };
        suite.push_back(std::move(c));
    }
    {
        GradCheckCase c;
        c.name = "resnext_block";
        Rng prng(derive_seed(seed, 80));
        auto blk = std::make_shared<ResNeXtBlockParams<double>>(
            ResNeXtBlockParams<double>::init(3, 3, 2, 1, prng));
        Tensor64 x = detail::random_tensor({1, 3, 4, 4}, rng, true);
        c.params = {{"x", x},
                    {"b0.reduce.w", blk->branches[0].reduce.w},
                    {"b1.conv.w", blk->branches[1].conv.w},
                    {"b1.expand.w", blk->branches[1].expand.w}};
        c.loss = [x, blk]() {
            Rng local(11);
            return detail::readout(resnext_block_forward(x, *blk), local);
        };
        suite.push_back(std::move(c));
    }
    {
        GradCheckCase c;
        c.name = "cross_entropy";
        Tensor64 logits = detail::random_tensor({2, 4, 3, 3}, rng, true);
        auto masks = std::make_shared<std::vector<LabelMask>>();
        for (int n = 0; n < 2; ++n) {
            LabelMask m(3, 3);
            for (auto& v : m.v) v = static_cast<std::uint8_t>(rng.below(4));
            masks->push_back(std::move(m));
        }
        c.params = {{"logits", logits}};
        c.loss = [logits, masks]() { return cross_entropy(logits, *masks); };
        suite.push_back(std::move(c));
    }
    {
        // tiny full model, 50 sampled parameters
        GradCheckCase c;
        c.name = "model_end_to_end";
        ModelConfig cfg;
        cfg.variant = ModelVariant::kFull;
        cfg.depth = 2;
        cfg.base_channels = 4;
        cfg.cardinality = 2;
        cfg.attn_dk = 4;
        cfg.attn_rounds = 2;
        cfg.attn_chunk = 16;
        auto params = std::make_shared<ModelParams<double>>(
            parameter_init<double>(cfg, derive_seed(seed, 81)));
        Tensor64 x = detail::random_tensor({1, 1, 16, 16}, rng, true, 0.0, 1.0);
        auto masks = std::make_shared<std::vector<LabelMask>>();
        {
            LabelMask m(16, 16);
            for (auto& v : m.v) v = static_cast<std::uint8_t>(rng.below(4));
            masks->push_back(std::move(m));
        }
        c.params = collect_params(*params);
        c.samples = 4;  // ~50 elements across the 13+ tensors sampled below
        // keep the case tractable: sample a subset of tensors
        std::vector<std::pair<std::string, Tensor64>> picked;
        for (std::size_t i = 0; i < c.params.size(); i += 3) picked.push_back(c.params[i]);
        c.params = std::move(picked);
        c.loss = [x, params, masks, cfg]() {
            return cross_entropy(forward(x, *params, cfg), *masks);
        };
        suite.push_back(std::move(c));
    }

    GradCheckOutcome worst;
    for (const auto& c : suite) {
        GradCheckOutcome o = run_gradcheck_case(c);
        if (cases) cases->emplace_back(c.name, o.max_rel_err);
        if (o.max_rel_err > worst.max_rel_err) worst = o;
    }
    return worst;
}

}  // namespace raunet
