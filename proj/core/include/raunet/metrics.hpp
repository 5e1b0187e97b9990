#pragma once

#include <string>
#include <vector>

#include "raunet/mask.hpp"

namespace raunet {

// DSC(X, Y) = 2|X ∩ Y| / (|X| + |Y|) for the pixel sets of one class.
// Both sets empty scores 1.0.
double dice_score(const LabelMask& pred, const LabelMask& truth, int class_id);

// Fraction of pixels whose predicted class matches, over all classes.
double accuracy(const LabelMask& pred, const LabelMask& truth);

// |X ∩ Y| / |X| for class pixels; 1.0 when neither set has pixels, 0.0 when
// only the prediction is empty.
double precision(const LabelMask& pred, const LabelMask& truth, int class_id);

// Per-class and macro metrics. Macro values average the foreground classes
// (1..n-1); background is reported per class but excluded from macros.
struct MetricsReport {
    double accuracy = 0.0;
    std::vector<double> dice;       // per class, index = class id
    std::vector<double> precision;  // per class
    double macro_dice = 0.0;
    double macro_precision = 0.0;
};

// Mean of per-sample metrics over a prediction/truth pairing.
MetricsReport evaluate_masks(const std::vector<LabelMask>& pred,
                             const std::vector<LabelMask>& truth, int n_classes);

// Unweighted mean of reports (per-fold aggregation).
MetricsReport mean_report(const std::vector<MetricsReport>& reports);

std::string report_to_string(const MetricsReport& r);

}  // namespace raunet
