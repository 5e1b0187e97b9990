#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <thread>

#include "raunet/data.hpp"
#include "raunet/metrics.hpp"
#include "raunet/model.hpp"

namespace raunet {

// ---------------------------------------------------------------------------
// loss

// Multi-class cross entropy over pixels: softmax across the class axis, then
// the mean of -log p at the true class. Fused log-softmax forward, analytic
// (softmax - onehot)/N backward.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<LabelMask>& masks) {
    if (logits.rank() != 4)
        throw ShapeError("cross_entropy: logits must be [N,C,H,W], got " +
                         shape_str(logits.shape()));
    const int N = logits.extent(0), C = logits.extent(1), H = logits.extent(2),
              W = logits.extent(3);
    if (static_cast<int>(masks.size()) != N)
        throw ShapeError("cross_entropy: " + std::to_string(masks.size()) + " masks for batch " +
                         std::to_string(N));
    for (const auto& m : masks) {
        if (m.h != H || m.w != W)
            throw ShapeError("cross_entropy: mask " + std::to_string(m.h) + "x" +
                             std::to_string(m.w) + " does not match logits " + std::to_string(H) +
                             "x" + std::to_string(W));
        for (std::uint8_t v : m.v)
            if (v >= C)
                throw DataError("cross_entropy: label " + std::to_string(static_cast<int>(v)) +
                                " out of range for " + std::to_string(C) + " classes");
    }

    auto labels = std::make_shared<std::vector<std::uint8_t>>();
    labels->reserve(static_cast<std::size_t>(N) * H * W);
    for (const auto& m : masks) labels->insert(labels->end(), m.v.begin(), m.v.end());

    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t n_obs = static_cast<std::size_t>(N) * plane;

    Tensor<S> out = detail::make_op<S>(
        {1}, {logits}, [N, C, plane, n_obs, labels](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            const S g = node.grad[0] / static_cast<S>(n_obs);
            MVec<S> probs(static_cast<std::size_t>(C));
            for (int n = 0; n < N; ++n) {
                const std::size_t img = static_cast<std::size_t>(n) * C * plane;
                for (std::size_t px = 0; px < plane; ++px) {
                    S mx = p.data[img + px];
                    for (int c = 1; c < C; ++c)
                        mx = std::max(mx, p.data[img + static_cast<std::size_t>(c) * plane + px]);
                    S sum = S(0);
                    for (int c = 0; c < C; ++c) {
                        probs[static_cast<std::size_t>(c)] =
                            std::exp(p.data[img + static_cast<std::size_t>(c) * plane + px] - mx);
                        sum += probs[static_cast<std::size_t>(c)];
                    }
                    const S inv = S(1) / sum;
                    const int truth = (*labels)[static_cast<std::size_t>(n) * plane + px];
                    for (int c = 0; c < C; ++c) {
                        const S soft = probs[static_cast<std::size_t>(c)] * inv;
                        p.grad[img + static_cast<std::size_t>(c) * plane + px] +=
                            g * (soft - (c == truth ? S(1) : S(0)));
                    }
                }
            }
        });

    const S* d = logits.data().data();
    double total = 0.0;
    for (int n = 0; n < N; ++n) {
        const std::size_t img = static_cast<std::size_t>(n) * C * plane;
        for (std::size_t px = 0; px < plane; ++px) {
            S mx = d[img + px];
            for (int c = 1; c < C; ++c)
                mx = std::max(mx, d[img + static_cast<std::size_t>(c) * plane + px]);
            double sum = 0.0;
            for (int c = 0; c < C; ++c)
                sum += std::exp(static_cast<double>(d[img + static_cast<std::size_t>(c) * plane + px] - mx));
            const int truth = (*labels)[static_cast<std::size_t>(n) * plane + px];
            const double logit = static_cast<double>(d[img + static_cast<std::size_t>(truth) * plane + px] - mx);
            total += std::log(sum) - logit;
        }
    }
    out.mutable_data()[0] = static_cast<S>(total / static_cast<double>(n_obs));
    return out;
}

// ---------------------------------------------------------------------------
// Adam

template <typename S>
struct AdamState {
    double alpha = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::map<std::string, std::pair<MVec<S>, MVec<S>>> moments;  // name -> (m, v)
};

// Bias-corrected Adam update applied in parameter-name order.
template <typename S>
void adam_step(std::vector<std::pair<std::string, Tensor<S>>> params, AdamState<S>& state) {
    std::sort(params.begin(), params.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [name, t] : params)
        if (!t.has_grad())
            throw Error("adam_step: parameter '" + name + "' has no gradient");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (auto& [name, t] : params) {
        auto& [m, v] = state.moments[name];
        if (m.size() != t.numel()) {
            m.assign(t.numel(), S(0));
            v.assign(t.numel(), S(0));
        }
        auto data = t.mutable_data();
        auto grad = t.grad_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * g;
            const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * g * g;
            m[i] = static_cast<S>(mi);
            v[i] = static_cast<S>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            data[i] = static_cast<S>(static_cast<double>(data[i]) -
                                     state.alpha * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

template <typename S>
void zero_grads(const std::vector<std::pair<std::string, Tensor<S>>>& params) {
    for (const auto& [name, t] : params) {
        Tensor<S> tt = t;
        tt.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// training loop

struct TrainOptions {
    int epochs = 100;
    int batch_size = 4;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    int fold_limit = 0;   // 0 = run all folds
    int workers = 1;      // folds trained in parallel
    bool eval_originals_only = true;  // skip augmented variants when scoring a fold
    std::string out_dir;  // when set, per-fold checkpoints are written here
};

struct TrainReport {
    std::vector<MetricsReport> per_fold;
    MetricsReport mean;
    std::vector<std::vector<double>> loss_curves;  // [fold][epoch] mean batch loss
};

namespace detail {

template <typename S>
std::pair<Tensor<S>, std::vector<LabelMask>> make_batch(
    const std::vector<SegmentationSample>& samples, const std::vector<int>& idx) {
    const int B = static_cast<int>(idx.size());
    const int H = samples[static_cast<std::size_t>(idx[0])].mask.h;
    const int W = samples[static_cast<std::size_t>(idx[0])].mask.w;
    Tensor<S> x = Tensor<S>::zeros({B, 1, H, W});
    auto d = x.mutable_data();
    std::vector<LabelMask> masks;
    masks.reserve(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
        const auto& s = samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])];
        if (s.mask.h != H || s.mask.w != W)
            throw GeometryError("batch: sample '" + s.id + "' has extent " +
                                std::to_string(s.mask.h) + "x" + std::to_string(s.mask.w) +
                                ", batch wants " + std::to_string(H) + "x" + std::to_string(W));
        auto src = s.image.data();
        S* dst = d.data() + static_cast<std::size_t>(b) * src.size();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<S>(src[i]);
        masks.push_back(s.mask);
    }
    return {x, masks};
}

template <typename S>
MetricsReport eval_on(const ModelConfig& cfg, const ModelParams<S>& params,
                      const std::vector<SegmentationSample>& samples,
                      const std::vector<int>& idx, int batch_size) {
    std::vector<LabelMask> pred, truth;
    for (std::size_t at = 0; at < idx.size(); at += static_cast<std::size_t>(batch_size)) {
        std::vector<int> chunk(idx.begin() + static_cast<std::ptrdiff_t>(at),
                               idx.begin() + static_cast<std::ptrdiff_t>(
                                                 std::min(at + static_cast<std::size_t>(batch_size),
                                                          idx.size())));
        auto [x, masks] = make_batch<S>(samples, chunk);
        auto out = predict_mask(x, params, cfg);
        pred.insert(pred.end(), out.begin(), out.end());
        truth.insert(truth.end(), masks.begin(), masks.end());
    }
    return evaluate_masks(pred, truth, cfg.n_classes);
}

template <typename S>
struct FoldOutcome {
    MetricsReport metrics;
    std::vector<double> losses;
};

template <typename S>
FoldOutcome<S> train_fold(const ModelConfig& cfg, const std::vector<SegmentationSample>& samples,
                          const std::map<std::string, int>& index_of, const FoldPlan& plan,
                          int fold, const TrainOptions& opts) {
    std::vector<int> test_idx, train_idx;
    for (int f = 0; f < plan.k; ++f) {
        for (const auto& id : plan.folds[static_cast<std::size_t>(f)]) {
            auto it = index_of.find(id);
            if (it == index_of.end())
                throw DataError("fold plan id '" + id + "' is not in the dataset");
            if (f == fold) {
                if (!opts.eval_originals_only || !is_derived_id(id)) test_idx.push_back(it->second);
            } else {
                train_idx.push_back(it->second);
            }
        }
    }
    if (train_idx.empty() || test_idx.empty())
        throw DataError("fold " + std::to_string(fold) + " leaves an empty train or test set");

    ModelParams<S> params = parameter_init<S>(cfg, derive_seed(opts.seed, 0x7061726dULL,
                                                               static_cast<std::uint64_t>(fold)));
    auto named = collect_params(params);
    AdamState<S> adam;
    adam.alpha = opts.learning_rate;

    FoldOutcome<S> outcome;
    Rng rng(derive_seed(opts.seed, 0x65706f63ULL, static_cast<std::uint64_t>(fold)));
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        rng.shuffle(train_idx);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t at = 0; at < train_idx.size(); at += static_cast<std::size_t>(opts.batch_size)) {
            std::vector<int> chunk(
                train_idx.begin() + static_cast<std::ptrdiff_t>(at),
                train_idx.begin() + static_cast<std::ptrdiff_t>(
                                        std::min(at + static_cast<std::size_t>(opts.batch_size),
                                                 train_idx.size())));
            auto [x, masks] = make_batch<S>(samples, chunk);
            zero_grads(named);
            Tensor<S> loss = cross_entropy(forward(x, params, cfg), masks);
            const double value = static_cast<double>(loss.item());
            if (!std::isfinite(value))
                throw NumericError("non-finite loss at fold " + std::to_string(fold) + ", epoch " +
                                   std::to_string(epoch) + ", batch " + std::to_string(batches));
            backward(loss);
            adam_step(named, adam);
            loss_sum += value;
            ++batches;
        }
        outcome.losses.push_back(batches > 0 ? loss_sum / batches : 0.0);
    }
    outcome.metrics = eval_on(cfg, params, samples, test_idx, opts.batch_size);

    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        save_checkpoint(params, cfg,
                        (std::filesystem::path(opts.out_dir) /
                         ("fold" + std::to_string(fold) + ".raun"))
                            .string());
    }
    return outcome;
}

}  // namespace detail

// Cross-validated training: for each fold, train on the complement and
// evaluate on the fold. Folds are independent and may run on worker threads;
// reports merge in fold order either way.
template <typename S>
TrainReport train(const ModelConfig& cfg, const std::vector<SegmentationSample>& samples,
                  const FoldPlan& plan, const TrainOptions& opts) {
    if (samples.empty()) throw DataError("train: empty dataset");
    std::map<std::string, int> index_of;
    for (std::size_t i = 0; i < samples.size(); ++i)
        index_of[samples[i].id] = static_cast<int>(i);

    const int n_folds = opts.fold_limit > 0 ? std::min(opts.fold_limit, plan.k) : plan.k;
    std::vector<detail::FoldOutcome<S>> outcomes(static_cast<std::size_t>(n_folds));

    if (opts.workers <= 1 || n_folds == 1) {
        for (int f = 0; f < n_folds; ++f)
            outcomes[static_cast<std::size_t>(f)] =
                detail::train_fold<S>(cfg, samples, index_of, plan, f, opts);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_folds));
        const int n_workers = std::min(opts.workers, n_folds);
        for (int t = 0; t < n_workers; ++t) {
            pool.emplace_back([&]() {
                while (true) {
                    const int f = next.fetch_add(1);
                    if (f >= n_folds) return;
                    try {
                        outcomes[static_cast<std::size_t>(f)] =
                            detail::train_fold<S>(cfg, samples, index_of, plan, f, opts);
                    } catch (...) {
                        errors[static_cast<std::size_t>(f)] = std::current_exception();
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    TrainReport report;
    for (auto& o : outcomes) {
        report.per_fold.push_back(o.metrics);
        report.loss_curves.push_back(std::move(o.losses));
    }
    report.mean = mean_report(report.per_fold);
    return report;
}

// ---------------------------------------------------------------------------
// ablation harness

struct AblationRow {
    ModelVariant variant;
    MetricsReport with_aug;
    MetricsReport no_aug;
};

struct AblationReport {
    std::vector<AblationRow> rows;  // full, ma, mr, unet

    std::string to_tsv() const;
    std::map<std::string, double> to_kv() const;
};

inline std::string AblationReport::to_tsv() const {
    std::string out =
        "model\taug_dsc\taug_acc\taug_precision\tnoaug_dsc\tnoaug_acc\tnoaug_precision\n";
    char buf[256];
    for (const auto& row : rows) {
        std::snprintf(buf, sizeof(buf), "%s\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\n",
                      variant_name(row.variant).c_str(), row.with_aug.macro_dice,
                      row.with_aug.accuracy, row.with_aug.macro_precision, row.no_aug.macro_dice,
                      row.no_aug.accuracy, row.no_aug.macro_precision);
        out += buf;
    }
    return out;
}

inline std::map<std::string, double> AblationReport::to_kv() const {
    std::map<std::string, double> kv;
    for (const auto& row : rows) {
        const std::string name = variant_name(row.variant);
        kv[name + ".aug.dice"] = row.with_aug.macro_dice;
        kv[name + ".aug.accuracy"] = row.with_aug.accuracy;
        kv[name + ".aug.precision"] = row.with_aug.macro_precision;
        kv[name + ".noaug.dice"] = row.no_aug.macro_dice;
        kv[name + ".noaug.accuracy"] = row.no_aug.accuracy;
        kv[name + ".noaug.precision"] = row.no_aug.macro_precision;
    }
    return kv;
}

// Trains the four variants with and without augmentation under identical
// folds and seeds and reports the comparative table.
template <typename S>
AblationReport ablation_suite(const ModelConfig& base_cfg,
                              const std::vector<SegmentationSample>& base_samples, int k_folds,
                              const TrainOptions& base_opts) {
    std::vector<SegmentationSample> augmented = augment_dataset(base_samples);
    std::vector<std::string> aug_ids;
    for (const auto& s : augmented) aug_ids.push_back(s.id);
    // Source-grouped assignment: the same folds serve both configurations.
    FoldPlan plan = make_folds(aug_ids, k_folds, base_opts.seed);
    std::vector<std::string> base_ids;
    for (const auto& s : base_samples) base_ids.push_back(s.id);
    FoldPlan base_plan = make_folds(base_ids, k_folds, base_opts.seed);

    AblationReport report;
    for (ModelVariant variant : {ModelVariant::kFull, ModelVariant::kNoAttention,
                                 ModelVariant::kNoResnext, ModelVariant::kUnet}) {
        ModelConfig cfg = base_cfg;
        cfg.variant = variant;
        AblationRow row;
        row.variant = variant;
        TrainOptions opts = base_opts;
        opts.out_dir.clear();
        row.with_aug = train<S>(cfg, augmented, plan, opts).mean;
        row.no_aug = train<S>(cfg, base_samples, base_plan, opts).mean;
        report.rows.push_back(std::move(row));
    }
    return report;
}

}  // namespace raunet
