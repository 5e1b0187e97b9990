#include "cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "raunet/gradcheck.hpp"
#include "raunet/image_io.hpp"
#include "raunet/train.hpp"

namespace fs = std::filesystem;

namespace raunet::cli {

namespace {

const std::set<std::string> kCommands = {"synth", "augment", "train",    "eval",
                                         "predict", "gradcheck", "ablation"};

const std::set<std::string> kKeys = {"config",     "seed",        "variant", "epochs",
                                     "folds",      "augment",     "data",    "out",
                                     "workers",    "checkpoint",  "n",       "size",
                                     "depth",      "base-channels", "cardinality",
                                     "batch-size"};

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw UsageError("flag --" + key + " wants an unsigned integer, got '" + v + "'");
    }
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw UsageError("flag --" + key + " wants an integer, got '" + v + "'");
    }
}

void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "variant") {
        parse_variant(value);  // validates
        cfg.variant = value;
    } else if (key == "epochs") cfg.epochs = parse_int(key, value);
    else if (key == "folds") cfg.folds = parse_int(key, value);
    else if (key == "augment") {
        if (value == "on") cfg.augment = true;
        else if (value == "off") cfg.augment = false;
        else throw UsageError("flag --augment wants on|off, got '" + value + "'");
    } else if (key == "data") cfg.data = value;
    else if (key == "out") cfg.out = value;
    else if (key == "workers") cfg.workers = parse_int(key, value);
    else if (key == "checkpoint") cfg.checkpoint = value;
    else if (key == "n") cfg.n = parse_int(key, value);
    else if (key == "size") cfg.size = parse_int(key, value);
    else if (key == "depth") cfg.depth = parse_int(key, value);
    else if (key == "base-channels") cfg.base_channels = parse_int(key, value);
    else if (key == "cardinality") cfg.cardinality = parse_int(key, value);
    else if (key == "batch-size") cfg.batch_size = parse_int(key, value);
    else throw UsageError("unknown option '" + key + "'");
}

}  // namespace

std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot read config file: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!kKeys.contains(key) || key == "config")
            throw UsageError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
        kv[key] = value;
    }
    return kv;
}

RunConfig parse_args(const std::vector<std::string>& args) {
    if (args.empty()) throw UsageError("no command given");
    RunConfig cfg;
    cfg.command = args[0];
    if (!kCommands.contains(cfg.command))
        throw UsageError("unknown command '" + cfg.command + "'");

    // gather flags first so file values can be applied below them
    std::vector<std::pair<std::string, std::string>> flags;
    std::string config_path;
    for (std::size_t i = 1; i < args.size(); ++i) {
        std::string arg = args[i];
        if (arg.rfind("--", 0) != 0) throw UsageError("expected a --flag, got '" + arg + "'");
        arg = arg.substr(2);
        std::string value;
        const auto eq = arg.find('=');
        if (eq != std::string::npos) {
            value = arg.substr(eq + 1);
            arg = arg.substr(0, eq);
        } else {
            if (i + 1 >= args.size()) throw UsageError("flag --" + arg + " wants a value");
            value = args[++i];
        }
        if (!kKeys.contains(arg)) throw UsageError("unknown option '" + arg + "'");
        if (arg == "config") config_path = value;
        else flags.emplace_back(arg, value);
    }

    if (!config_path.empty())
        for (const auto& [k, v] : read_config_file(config_path)) apply_kv(cfg, k, v);
    for (const auto& [k, v] : flags) apply_kv(cfg, k, v);

    const char* prec = std::getenv("RAUNET_PRECISION");
    if (prec) {
        cfg.precision = prec;
        if (cfg.precision != "f32" && cfg.precision != "f64")
            throw UsageError("RAUNET_PRECISION must be f32 or f64, got '" + cfg.precision + "'");
    }
    return cfg;
}

std::string synopsis() {
    return "usage: raunet <command> [--flags]\n"
           "commands:\n"
           "  synth      --out DIR [--n N] [--size S] [--seed X]\n"
           "  augment    --data DIR --out DIR\n"
           "  train      --data DIR --out DIR [--variant full|ma|mr|unet] [--epochs E]\n"
           "             [--folds K] [--augment on|off] [--seed X] [--workers W]\n"
           "             [--depth D] [--base-channels B] [--cardinality C] [--batch-size N]\n"
           "  eval       --data DIR --checkpoint FILE [--out DIR]\n"
           "  predict    --data DIR --checkpoint FILE --out DIR\n"
           "  gradcheck  [--seed X]\n"
           "  ablation   --data DIR --out DIR [--epochs E] [--folds K] [--seed X] ...\n"
           "common flags: --config FILE (flat key = value; flags win)\n"
           "env: RAUNET_PRECISION=f32|f64 (default f32; gradcheck always runs f64)\n";
}

namespace {

void require(const RunConfig& cfg, bool has, const std::string& flag) {
    if (!has) throw UsageError("command '" + cfg.command + "' requires --" + flag);
}

ModelConfig model_config_from(const RunConfig& cfg) {
    ModelConfig mc;
    mc.variant = parse_variant(cfg.variant);
    mc.depth = cfg.depth;
    mc.base_channels = cfg.base_channels;
    mc.cardinality = cfg.cardinality;
    mc.input_size = cfg.size;
    return mc;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << text;
    if (!os) throw DataError("write failed: " + path.string());
}

std::string format_train_report(const TrainReport& report) {
    std::ostringstream os;
    char buf[256];
    os << "fold\tdice\taccuracy\tprecision\tdice_ggo\tdice_consolidation\tdice_pleural\n";
    for (std::size_t f = 0; f < report.per_fold.size(); ++f) {
        const auto& r = report.per_fold[f];
        std::snprintf(buf, sizeof(buf), "%zu\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\n", f,
                      r.macro_dice, r.accuracy, r.macro_precision, r.dice[1], r.dice[2],
                      r.dice[3]);
        os << buf;
    }
    const auto& m = report.mean;
    std::snprintf(buf, sizeof(buf), "mean\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\n", m.macro_dice,
                  m.accuracy, m.macro_precision, m.dice[1], m.dice[2], m.dice[3]);
    os << buf;
    return os.str();
}

std::string format_summary(const TrainReport& report) {
    std::ostringstream os;
    char buf[128];
    auto put = [&](const std::string& key, double v) {
        std::snprintf(buf, sizeof(buf), "%s=%.6f\n", key.c_str(), v);
        os << buf;
    };
    put("mean.dice", report.mean.macro_dice);
    put("mean.accuracy", report.mean.accuracy);
    put("mean.precision", report.mean.macro_precision);
    for (std::size_t f = 0; f < report.per_fold.size(); ++f) {
        const std::string p = "fold" + std::to_string(f);
        put(p + ".dice", report.per_fold[f].macro_dice);
        put(p + ".accuracy", report.per_fold[f].accuracy);
        put(p + ".precision", report.per_fold[f].macro_precision);
    }
    return os.str();
}

std::string format_loss_csv(const TrainReport& report) {
    std::ostringstream os;
    os << "epoch,fold,loss\n";
    char buf[96];
    for (std::size_t f = 0; f < report.loss_curves.size(); ++f)
        for (std::size_t e = 0; e < report.loss_curves[f].size(); ++e) {
            std::snprintf(buf, sizeof(buf), "%zu,%zu,%.9g\n", e, f, report.loss_curves[f][e]);
            os << buf;
        }
    return os.str();
}

// Fig-style palette: light gray background, green GGO, yellow consolidation,
// blue pleural effusion.
constexpr std::uint8_t kPalette[4][3] = {
    {200, 200, 200}, {60, 180, 75}, {255, 225, 25}, {0, 130, 200}};

RgbImageU8 render_panel(const SegmentationSample& s, const LabelMask& pred) {
    const int h = s.mask.h, w = s.mask.w, gap = 2;
    RgbImageU8 panel;
    panel.h = h;
    panel.w = w * 3 + gap * 2;
    panel.v.assign(static_cast<std::size_t>(panel.h) * panel.w * 3, 255);
    auto put = [&panel](int r, int c, std::uint8_t rr, std::uint8_t gg, std::uint8_t bb) {
        const std::size_t at = (static_cast<std::size_t>(r) * panel.w + c) * 3;
        panel.v[at] = rr;
        panel.v[at + 1] = gg;
        panel.v[at + 2] = bb;
    };
    auto img = s.image.data();
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const auto g = static_cast<std::uint8_t>(
                std::min(1.0f, std::max(0.0f, img[static_cast<std::size_t>(r) * w + c])) * 255.0f +
                0.5f);
            put(r, c, g, g, g);
            const auto* t = kPalette[s.mask.at(r, c)];
            put(r, c + w + gap, t[0], t[1], t[2]);
            const auto* pcol = kPalette[pred.at(r, c)];
            put(r, c + 2 * (w + gap), pcol[0], pcol[1], pcol[2]);
        }
    return panel;
}

template <typename S>
int run_typed(const RunConfig& cfg, std::ostream& out) {
    if (cfg.command == "synth") {
        require(cfg, !cfg.out.empty(), "out");
        auto samples = synth_dataset(cfg.n, cfg.size, cfg.seed);
        save_dataset(samples, cfg.out);
        out << "wrote " << samples.size() << " samples to " << cfg.out << "\n";
        return 0;
    }
    if (cfg.command == "augment") {
        require(cfg, !cfg.data.empty(), "data");
        require(cfg, !cfg.out.empty(), "out");
        auto samples = load_dataset(cfg.data);
        auto augmented = augment_dataset(samples);
        save_dataset(augmented, cfg.out);
        out << "wrote " << augmented.size() << " samples to " << cfg.out << "\n";
        return 0;
    }
    if (cfg.command == "train") {
        require(cfg, !cfg.data.empty(), "data");
        require(cfg, !cfg.out.empty(), "out");
        auto samples = load_dataset(cfg.data);
        if (cfg.augment) samples = augment_dataset(samples);
        std::vector<std::string> ids;
        for (const auto& s : samples) ids.push_back(s.id);
        FoldPlan plan = make_folds(ids, cfg.folds, cfg.seed);

        ModelConfig mc = model_config_from(cfg);
        mc.input_size = samples.front().mask.h;
        TrainOptions opts;
        opts.epochs = cfg.epochs;
        opts.batch_size = cfg.batch_size;
        opts.seed = cfg.seed;
        opts.workers = cfg.workers;
        opts.out_dir = cfg.out;
        fs::create_directories(cfg.out);
        save_fold_plan(plan, (fs::path(cfg.out) / "folds.tsv").string());
        TrainReport report = train<S>(mc, samples, plan, opts);
        write_text(fs::path(cfg.out) / "report.tsv", format_train_report(report));
        write_text(fs::path(cfg.out) / "summary.txt", format_summary(report));
        write_text(fs::path(cfg.out) / "loss_curves.csv", format_loss_csv(report));
        out << "mean " << report_to_string(report.mean) << "\n";
        return 0;
    }
    if (cfg.command == "eval") {
        require(cfg, !cfg.data.empty(), "data");
        require(cfg, !cfg.checkpoint.empty(), "checkpoint");
        auto [mc, params] = load_checkpoint_auto<S>(cfg.checkpoint);
        auto samples = load_dataset(cfg.data);
        std::vector<LabelMask> pred, truth;
        for (const auto& s : samples) {
            Tensor<S> x = Tensor<S>::zeros({1, 1, s.mask.h, s.mask.w});
            auto src = s.image.data();
            auto dst = x.mutable_data();
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<S>(src[i]);
            pred.push_back(predict_mask(x, params, mc)[0]);
            truth.push_back(s.mask);
        }
        MetricsReport report = evaluate_masks(pred, truth, mc.n_classes);
        out << report_to_string(report) << "\n";
        if (!cfg.out.empty()) {
            fs::create_directories(cfg.out);
            std::ostringstream kv;
            char buf[96];
            std::snprintf(buf, sizeof(buf), "dice=%.6f\naccuracy=%.6f\nprecision=%.6f\n",
                          report.macro_dice, report.accuracy, report.macro_precision);
            kv << buf;
            for (std::size_t c = 0; c < report.dice.size(); ++c) {
                std::snprintf(buf, sizeof(buf), "dice.class%zu=%.6f\n", c, report.dice[c]);
                kv << buf;
            }
            write_text(fs::path(cfg.out) / "metrics.txt", kv.str());
        }
        return 0;
    }
    if (cfg.command == "predict") {
        require(cfg, !cfg.data.empty(), "data");
        require(cfg, !cfg.checkpoint.empty(), "checkpoint");
        require(cfg, !cfg.out.empty(), "out");
        auto [mc, params] = load_checkpoint_auto<S>(cfg.checkpoint);
        auto samples = load_dataset(cfg.data);
        fs::create_directories(cfg.out);
        for (const auto& s : samples) {
            Tensor<S> x = Tensor<S>::zeros({1, 1, s.mask.h, s.mask.w});
            auto src = s.image.data();
            auto dst = x.mutable_data();
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<S>(src[i]);
            LabelMask pred = predict_mask(x, params, mc)[0];
            GrayImageU8 m;
            m.h = pred.h;
            m.w = pred.w;
            m.v = pred.v;
            write_pgm((fs::path(cfg.out) / (s.id + "_pred.pgm")).string(), m);
            write_ppm((fs::path(cfg.out) / (s.id + "_panel.ppm")).string(),
                      render_panel(s, pred));
        }
        out << "wrote predictions for " << samples.size() << " samples to " << cfg.out << "\n";
        return 0;
    }
    if (cfg.command == "ablation") {
        require(cfg, !cfg.data.empty(), "data");
        require(cfg, !cfg.out.empty(), "out");
        auto samples = load_dataset(cfg.data);
        ModelConfig mc = model_config_from(cfg);
        TrainOptions opts;
        opts.epochs = cfg.epochs;
        opts.batch_size = cfg.batch_size;
        opts.seed = cfg.seed;
        opts.workers = cfg.workers;
        AblationReport report = ablation_suite<S>(mc, samples, cfg.folds, opts);
        fs::create_directories(cfg.out);
        write_text(fs::path(cfg.out) / "ablation.tsv", report.to_tsv());
        std::ostringstream kv;
        char buf[96];
        for (const auto& [k, v] : report.to_kv()) {
            std::snprintf(buf, sizeof(buf), "%s=%.6f\n", k.c_str(), v);
            kv << buf;
        }
        write_text(fs::path(cfg.out) / "summary.txt", kv.str());
        out << report.to_tsv();
        return 0;
    }
    throw UsageError("unknown command '" + cfg.command + "'");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    try {
        RunConfig cfg = parse_args(args);
        if (cfg.command == "gradcheck") {
            // finite differences need 64-bit regardless of RAUNET_PRECISION
            std::vector<std::pair<std::string, double>> cases;
            GradCheckOutcome worst = run_gradcheck_suite(cfg.seed, &cases);
            for (const auto& [name, rel] : cases) {
                char buf[160];
                std::snprintf(buf, sizeof(buf), "%-24s max_rel_err=%.3e\n", name.c_str(), rel);
                out << buf;
            }
            char buf[160];
            std::snprintf(buf, sizeof(buf), "max relative error: %.3e (%s)\n", worst.max_rel_err,
                          worst.worst.c_str());
            out << buf;
            return worst.max_rel_err < 1e-3 ? 0 : 4;
        }
        if (cfg.precision == "f64") return run_typed<double>(cfg, out);
        return run_typed<float>(cfg, out);
    } catch (const UsageError& e) {
        err << "raunet: usage error: " << e.what() << "\n" << synopsis();
        return 2;
    } catch (const ConfigError& e) {
        err << "raunet: usage error: " << e.what() << "\n" << synopsis();
        return 2;
    } catch (const NumericError& e) {
        err << "raunet: numeric abort: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        err << "raunet: error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace raunet::cli
