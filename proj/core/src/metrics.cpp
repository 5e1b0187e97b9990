#include "raunet/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "raunet/errors.hpp"

namespace raunet {

namespace {

void check_aligned(const LabelMask& a, const LabelMask& b) {
    if (a.h != b.h || a.w != b.w)
        throw ShapeError("metric: masks are misaligned, " + std::to_string(a.h) + "x" +
                         std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                         std::to_string(b.w));
}

}  // namespace

double dice_score(const LabelMask& pred, const LabelMask& truth, int class_id) {
    check_aligned(pred, truth);
    std::size_t nx = 0, ny = 0, inter = 0;
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
        const bool x = pred.v[i] == class_id;
        const bool y = truth.v[i] == class_id;
        nx += x;
        ny += y;
        inter += x && y;
    }
    if (nx + ny == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(nx + ny);
}

double accuracy(const LabelMask& pred, const LabelMask& truth) {
    check_aligned(pred, truth);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.v.size(); ++i) correct += pred.v[i] == truth.v[i];
    return static_cast<double>(correct) / static_cast<double>(pred.v.size());
}

double precision(const LabelMask& pred, const LabelMask& truth, int class_id) {
    check_aligned(pred, truth);
    std::size_t nx = 0, ny = 0, inter = 0;
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
        const bool x = pred.v[i] == class_id;
        const bool y = truth.v[i] == class_id;
        nx += x;
        ny += y;
        inter += x && y;
    }
    if (nx == 0) return ny == 0 ? 1.0 : 0.0;
    return static_cast<double>(inter) / static_cast<double>(nx);
}

MetricsReport evaluate_masks(const std::vector<LabelMask>& pred,
                             const std::vector<LabelMask>& truth, int n_classes) {
    if (pred.size() != truth.size() || pred.empty())
        throw ShapeError("evaluate_masks: got " + std::to_string(pred.size()) +
                         " predictions for " + std::to_string(truth.size()) + " truths");
    MetricsReport r;
    r.dice.assign(static_cast<std::size_t>(n_classes), 0.0);
    r.precision.assign(static_cast<std::size_t>(n_classes), 0.0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        r.accuracy += accuracy(pred[i], truth[i]);
        for (int c = 0; c < n_classes; ++c) {
            r.dice[static_cast<std::size_t>(c)] += dice_score(pred[i], truth[i], c);
            r.precision[static_cast<std::size_t>(c)] += precision(pred[i], truth[i], c);
        }
    }
    const double inv = 1.0 / static_cast<double>(pred.size());
    r.accuracy *= inv;
    for (int c = 0; c < n_classes; ++c) {
        r.dice[static_cast<std::size_t>(c)] *= inv;
        r.precision[static_cast<std::size_t>(c)] *= inv;
    }
    for (int c = 1; c < n_classes; ++c) {
        r.macro_dice += r.dice[static_cast<std::size_t>(c)];
        r.macro_precision += r.precision[static_cast<std::size_t>(c)];
    }
    r.macro_dice /= static_cast<double>(n_classes - 1);
    r.macro_precision /= static_cast<double>(n_classes - 1);
    return r;
}

MetricsReport mean_report(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw Error("mean_report: no reports");
    MetricsReport out;
    out.dice.assign(reports[0].dice.size(), 0.0);
    out.precision.assign(reports[0].precision.size(), 0.0);
    for (const auto& r : reports) {
        out.accuracy += r.accuracy;
        out.macro_dice += r.macro_dice;
        out.macro_precision += r.macro_precision;
        for (std::size_t c = 0; c < out.dice.size(); ++c) {
            out.dice[c] += r.dice[c];
            out.precision[c] += r.precision[c];
        }
    }
    const double inv = 1.0 / static_cast<double>(reports.size());
    out.accuracy *= inv;
    out.macro_dice *= inv;
    out.macro_precision *= inv;
    for (std::size_t c = 0; c < out.dice.size(); ++c) {
        out.dice[c] *= inv;
        out.precision[c] *= inv;
    }
    return out;
}

std::string report_to_string(const MetricsReport& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "dice=%.4f acc=%.4f prec=%.4f", r.macro_dice, r.accuracy,
                  r.macro_precision);
    std::ostringstream os;
    os << buf << " (per-class dice:";
    for (std::size_t c = 0; c < r.dice.size(); ++c) {
        std::snprintf(buf, sizeof(buf), " %zu=%.4f", c, r.dice[c]);
        os << buf;
    }
    os << ")";
    return os.str();
}

}  // namespace raunet
