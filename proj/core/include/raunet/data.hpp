#pragma once

#include <string>
#include <vector>

#include "raunet/mask.hpp"
#include "raunet/tensor.hpp"

namespace raunet {

// Mask labels: 0 background, 1 ground-glass opacification, 2 consolidation,
// 3 pleural effusion.
inline constexpr int kNumClasses = 4;

struct SegmentationSample {
    Tensor32 image;  // [1,H,W], grayscale in [0,1]
    LabelMask mask;  // same H,W, values 0..3
    std::string id;
};

// ---------------------------------------------------------------------------
// ingestion and geometric transforms

// Read an image/mask pair, convert to grayscale, resize to target x target
// (bilinear for the image, nearest for the mask) and scale intensities to
// [0,1]. Mask values outside 0..3 raise DataError naming the offenders.
SegmentationSample ingest(const std::string& image_path, const std::string& mask_path,
                          int target_size, const std::string& id = "");

// Exact rotation by 90/180/270 degrees; output(r,c) = input(H-1-c, r) for 90.
SegmentationSample rotate(const SegmentationSample& s, int degrees);

// Rescale by the factor, then restore the original extent: center-crop when
// growing, pad with background when shrinking.
SegmentationSample scale(const SegmentationSample& s, double factor);

// Per input sample emits the three rotations and the 0.5/1.5 scalings with
// deterministic derived ids (id_rot90, ..., id_scale15); 100 in -> 600 out.
std::vector<SegmentationSample> augment_dataset(const std::vector<SegmentationSample>& samples);

// True when the id carries one of the augmentation suffixes.
bool is_derived_id(const std::string& id);
// Strips the augmentation suffix, if any.
std::string source_id(const std::string& id);

// ---------------------------------------------------------------------------
// fold plans

struct FoldPlan {
    int k = 0;
    std::uint64_t seed = 0;
    std::vector<std::vector<std::string>> folds;  // disjoint, union = dataset

    int fold_of(const std::string& id) const;
};

// Seeded shuffle of the distinct source ids, round-robin assignment; derived
// (augmented) ids always land in their source's fold.
FoldPlan make_folds(const std::vector<std::string>& ids, int k, std::uint64_t seed);

void save_fold_plan(const FoldPlan& plan, const std::string& path);
FoldPlan load_fold_plan(const std::string& path);

// ---------------------------------------------------------------------------
// synthetic data

// Deterministic stand-in dataset: a bright lung-like ellipse pair on a dark
// background with blotchy class-1 patches, dense class-2 blobs and thin
// boundary-adjacent class-3 crescents, plus the exact masks.
std::vector<SegmentationSample> synth_dataset(int n, int size, std::uint64_t seed);

// ---------------------------------------------------------------------------
// on-disk dataset layout: images/<id>.pgm, masks/<id>.pgm and manifest.tsv
// with one "id<TAB>image_path<TAB>mask_path" line per sample.

void save_dataset(const std::vector<SegmentationSample>& samples, const std::string& dir);
std::vector<SegmentationSample> load_dataset(const std::string& dir);
std::vector<std::string> dataset_ids(const std::string& dir);

}  // namespace raunet
