#include "raunet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "raunet/errors.hpp"
#include "raunet/image_io.hpp"
#include "raunet/random.hpp"

namespace fs = std::filesystem;

namespace raunet {

namespace {

Tensor32 image_from_u8(const GrayImageU8& img) {
    Tensor32 t = Tensor32::zeros({1, img.h, img.w});
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < img.v.size(); ++i) d[i] = static_cast<float>(img.v[i]) / 255.0f;
    return t;
}

GrayImageU8 image_to_u8(const Tensor32& t) {
    GrayImageU8 img;
    img.h = t.extent(1);
    img.w = t.extent(2);
    img.v.resize(t.numel());
    auto d = t.data();
    for (std::size_t i = 0; i < img.v.size(); ++i) {
        const float v = std::min(1.0f, std::max(0.0f, d[i]));
        img.v[i] = static_cast<std::uint8_t>(v * 255.0f + 0.5f);
    }
    return img;
}

void validate_mask_values(const std::vector<std::uint8_t>& v, const std::string& what) {
    std::set<int> bad;
    for (std::uint8_t x : v)
        if (x >= kNumClasses) bad.insert(static_cast<int>(x));
    if (!bad.empty()) {
        std::ostringstream os;
        os << what << " contains unexpected mask values {";
        bool first = true;
        for (int x : bad) {
            if (!first) os << ", ";
            os << x;
            first = false;
        }
        os << "}; expected 0..3";
        throw DataError(os.str());
    }
}

// dst coordinate -> continuous src coordinate (pixel centers aligned)
inline double src_coord(int dst, int dst_size, int src_size) {
    return (static_cast<double>(dst) + 0.5) * static_cast<double>(src_size) / dst_size - 0.5;
}

Tensor32 resize_bilinear(const Tensor32& img, int oh, int ow) {
    const int h = img.extent(1), w = img.extent(2);
    Tensor32 out = Tensor32::zeros({1, oh, ow});
    auto src = img.data();
    auto dst = out.mutable_data();
    for (int r = 0; r < oh; ++r) {
        const double sy = src_coord(r, oh, h);
        const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, h - 1);
        const int y1 = std::min(y0 + 1, h - 1);
        const double fy = std::clamp(sy - y0, 0.0, 1.0);
        for (int c = 0; c < ow; ++c) {
            const double sx = src_coord(c, ow, w);
            const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, w - 1);
            const int x1 = std::min(x0 + 1, w - 1);
            const double fx = std::clamp(sx - x0, 0.0, 1.0);
            const double top = src[static_cast<std::size_t>(y0) * w + x0] * (1 - fx) +
                               src[static_cast<std::size_t>(y0) * w + x1] * fx;
            const double bot = src[static_cast<std::size_t>(y1) * w + x0] * (1 - fx) +
                               src[static_cast<std::size_t>(y1) * w + x1] * fx;
            dst[static_cast<std::size_t>(r) * ow + c] = static_cast<float>(top * (1 - fy) + bot * fy);
        }
    }
    return out;
}

LabelMask resize_nearest(const LabelMask& mask, int oh, int ow) {
    LabelMask out(oh, ow);
    for (int r = 0; r < oh; ++r) {
        const int sy = std::clamp(
            static_cast<int>(std::floor((static_cast<double>(r) + 0.5) * mask.h / oh)), 0,
            mask.h - 1);
        for (int c = 0; c < ow; ++c) {
            const int sx = std::clamp(
                static_cast<int>(std::floor((static_cast<double>(c) + 0.5) * mask.w / ow)), 0,
                mask.w - 1);
            out.at(r, c) = mask.at(sy, sx);
        }
    }
    return out;
}

}  // namespace

SegmentationSample ingest(const std::string& image_path, const std::string& mask_path,
                          int target_size, const std::string& id) {
    GrayImageU8 raw_img = read_gray_image(image_path);
    GrayImageU8 raw_mask = read_gray_image(mask_path);
    validate_mask_values(raw_mask.v, "mask " + mask_path);

    SegmentationSample s;
    s.id = id.empty() ? fs::path(image_path).stem().string() : id;
    Tensor32 img = image_from_u8(raw_img);
    LabelMask mask;
    mask.h = raw_mask.h;
    mask.w = raw_mask.w;
    mask.v = raw_mask.v;
    if (raw_img.h != target_size || raw_img.w != target_size)
        img = resize_bilinear(img, target_size, target_size);
    if (mask.h != target_size || mask.w != target_size)
        mask = resize_nearest(mask, target_size, target_size);
    s.image = std::move(img);
    s.mask = std::move(mask);
    return s;
}

SegmentationSample rotate(const SegmentationSample& s, int degrees) {
    if (degrees != 90 && degrees != 180 && degrees != 270)
        throw ConfigError("rotate: degrees must be one of 90/180/270, got " +
                          std::to_string(degrees));
    const int h = s.mask.h, w = s.mask.w;
    if (h != w) throw DataError("rotate: sample '" + s.id + "' is not square (" +
                                std::to_string(h) + "x" + std::to_string(w) + ")");

    // one quarter turn: out(r, c) = in(H-1-c, r)
    auto quarter = [h, w](const SegmentationSample& in) {
        SegmentationSample out;
        out.id = in.id;
        out.image = Tensor32::zeros({1, h, w});
        out.mask = LabelMask(h, w);
        auto src = in.image.data();
        auto dst = out.image.mutable_data();
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                const std::size_t from = static_cast<std::size_t>(h - 1 - c) * w + r;
                dst[static_cast<std::size_t>(r) * w + c] = src[from];
                out.mask.at(r, c) = in.mask.v[from];
            }
        return out;
    };

    SegmentationSample out = quarter(s);
    for (int d = 90; d < degrees; d += 90) out = quarter(out);
    out.id = s.id;
    return out;
}

SegmentationSample scale(const SegmentationSample& s, double factor) {
    if (factor <= 0) throw ConfigError("scale: factor must be positive");
    const int h = s.mask.h, w = s.mask.w;
    const int nh = std::max(1, static_cast<int>(std::lround(h * factor)));
    const int nw = std::max(1, static_cast<int>(std::lround(w * factor)));

    Tensor32 img = resize_bilinear(s.image, nh, nw);
    LabelMask mask = resize_nearest(s.mask, nh, nw);

    SegmentationSample out;
    out.id = s.id;
    out.image = Tensor32::zeros({1, h, w});
    out.mask = LabelMask(h, w);  // background padding
    auto src = img.data();
    auto dst = out.image.mutable_data();
    if (nh >= h) {  // center crop back
        const int r0 = (nh - h) / 2, c0 = (nw - w) / 2;
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                dst[static_cast<std::size_t>(r) * w + c] =
                    src[static_cast<std::size_t>(r + r0) * nw + (c + c0)];
                out.mask.at(r, c) = mask.at(r + r0, c + c0);
            }
    } else {  // center pad back
        const int r0 = (h - nh) / 2, c0 = (w - nw) / 2;
        for (int r = 0; r < nh; ++r)
            for (int c = 0; c < nw; ++c) {
                dst[static_cast<std::size_t>(r + r0) * w + (c + c0)] =
                    src[static_cast<std::size_t>(r) * nw + c];
                out.mask.at(r + r0, c + c0) = mask.at(r, c);
            }
    }
    return out;
}

namespace {
const char* kDerivedSuffixes[] = {"_rot90", "_rot180", "_rot270", "_scale05", "_scale15"};
}

bool is_derived_id(const std::string& id) {
    for (const char* suf : kDerivedSuffixes)
        if (id.size() > std::strlen(suf) && id.ends_with(suf)) return true;
    return false;
}

std::string source_id(const std::string& id) {
    for (const char* suf : kDerivedSuffixes)
        if (id.size() > std::strlen(suf) && id.ends_with(suf))
            return id.substr(0, id.size() - std::strlen(suf));
    return id;
}

std::vector<SegmentationSample> augment_dataset(const std::vector<SegmentationSample>& samples) {
    std::vector<SegmentationSample> out;
    out.reserve(samples.size() * 6);
    std::set<std::string> ids;
    auto push = [&out, &ids](SegmentationSample s) {
        if (!ids.insert(s.id).second)
            throw DataError("augment: duplicate sample id '" + s.id + "'");
        out.push_back(std::move(s));
    };
    for (const auto& s : samples) {
        push(s);
        for (int deg : {90, 180, 270}) {
            SegmentationSample r = rotate(s, deg);
            r.id = s.id + "_rot" + std::to_string(deg);
            push(std::move(r));
        }
        SegmentationSample s05 = scale(s, 0.5);
        s05.id = s.id + "_scale05";
        push(std::move(s05));
        SegmentationSample s15 = scale(s, 1.5);
        s15.id = s.id + "_scale15";
        push(std::move(s15));
    }
    return out;
}

int FoldPlan::fold_of(const std::string& id) const {
    for (int f = 0; f < k; ++f)
        for (const auto& x : folds[static_cast<std::size_t>(f)])
            if (x == id) return f;
    return -1;
}

FoldPlan make_folds(const std::vector<std::string>& ids, int k, std::uint64_t seed) {
    std::vector<std::string> sources;
    std::set<std::string> seen;
    for (const auto& id : ids) {
        std::string src = source_id(id);
        if (seen.insert(src).second) sources.push_back(std::move(src));
    }
    if (k < 1 || k > static_cast<int>(sources.size()))
        throw ConfigError("make_folds: k=" + std::to_string(k) + " exceeds the " +
                          std::to_string(sources.size()) + " distinct source ids");

    std::sort(sources.begin(), sources.end());
    Rng rng(derive_seed(seed, 0xf01d5ULL));
    rng.shuffle(sources);

    std::map<std::string, int> fold_of_source;
    for (std::size_t i = 0; i < sources.size(); ++i)
        fold_of_source[sources[i]] = static_cast<int>(i % static_cast<std::size_t>(k));

    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.folds.resize(static_cast<std::size_t>(k));
    for (const auto& id : ids)
        plan.folds[static_cast<std::size_t>(fold_of_source.at(source_id(id)))].push_back(id);
    return plan;
}

void save_fold_plan(const FoldPlan& plan, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write fold plan: " + path);
    for (int f = 0; f < plan.k; ++f)
        for (const auto& id : plan.folds[static_cast<std::size_t>(f)]) os << f << "\t" << id << "\n";
    if (!os) throw DataError("fold plan write failed: " + path);
}

FoldPlan load_fold_plan(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read fold plan: " + path);
    FoldPlan plan;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw DataError("malformed fold plan line: '" + line + "'");
        const int f = std::stoi(line.substr(0, tab));
        if (f < 0) throw DataError("negative fold index in " + path);
        if (f >= static_cast<int>(plan.folds.size())) plan.folds.resize(static_cast<std::size_t>(f) + 1);
        plan.folds[static_cast<std::size_t>(f)].push_back(line.substr(tab + 1));
    }
    plan.k = static_cast<int>(plan.folds.size());
    return plan;
}

// ---------------------------------------------------------------------------
// synthetic data

namespace {

struct Ellipse {
    double cx, cy, rx, ry;

    double rnorm2(double x, double y) const {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        return dx * dx + dy * dy;
    }
    bool contains(double x, double y) const { return rnorm2(x, y) <= 1.0; }
};

}  // namespace

std::vector<SegmentationSample> synth_dataset(int n, int size, std::uint64_t seed) {
    std::vector<SegmentationSample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, 0x73796e74ULL /*"synt"*/, static_cast<std::uint64_t>(i)));
        const int sz = size;
        std::vector<float> img(static_cast<std::size_t>(sz) * sz, 0.08f);
        LabelMask mask(sz, sz);

        Ellipse lungs[2];
        for (int lu = 0; lu < 2; ++lu) {
            lungs[lu].cx = (lu == 0 ? 0.31 : 0.69) * sz + rng.uniform(-0.02, 0.02) * sz;
            lungs[lu].cy = 0.52 * sz + rng.uniform(-0.03, 0.03) * sz;
            lungs[lu].rx = rng.uniform(0.15, 0.20) * sz;
            lungs[lu].ry = rng.uniform(0.24, 0.32) * sz;
        }
        const float lung_base = static_cast<float>(0.40 + rng.uniform(-0.03, 0.03));
        for (int r = 0; r < sz; ++r)
            for (int c = 0; c < sz; ++c)
                if (lungs[0].contains(c, r) || lungs[1].contains(c, r))
                    img[static_cast<std::size_t>(r) * sz + c] = lung_base;

        auto paint = [&](int r, int c, float value, std::uint8_t label) {
            if (r < 0 || r >= sz || c < 0 || c >= sz) return;
            if (!lungs[0].contains(c, r) && !lungs[1].contains(c, r) && label != 3) return;
            img[static_cast<std::size_t>(r) * sz + c] = value;
            mask.at(r, c) = label;
        };

        // class 1: blotchy low-contrast patches (drawn first, overdrawn by 3 and 2)
        if (rng.uniform() < 0.9) {
            const int patches = rng.range(1, 2);
            for (int pa = 0; pa < patches; ++pa) {
                const Ellipse& lung = lungs[rng.range(0, 1)];
                const double ang = rng.uniform(0, 2 * M_PI);
                const double rad = rng.uniform(0, 0.5);
                const double px = lung.cx + std::cos(ang) * rad * lung.rx;
                const double py = lung.cy + std::sin(ang) * rad * lung.ry;
                const int disks = rng.range(7, 13);
                for (int dk = 0; dk < disks; ++dk) {
                    const double dx = px + rng.normal() * 0.035 * sz;
                    const double dy = py + rng.normal() * 0.035 * sz;
                    const double dr = rng.uniform(0.015, 0.035) * sz;
                    const float v = lung_base + 0.15f + static_cast<float>(rng.uniform(-0.04, 0.04));
                    for (int r = static_cast<int>(dy - dr); r <= static_cast<int>(dy + dr) + 1; ++r)
                        for (int c = static_cast<int>(dx - dr); c <= static_cast<int>(dx + dr) + 1; ++c)
                            if ((r - dy) * (r - dy) + (c - dx) * (c - dx) <= dr * dr)
                                paint(r, c, v, 1);
                }
            }
        }

        // class 3: thin crescent hugging a lung boundary
        if (rng.uniform() < 0.9) {
            const Ellipse& lung = lungs[rng.range(0, 1)];
            const double a0 = rng.uniform(0, 2 * M_PI);
            const double span = rng.uniform(M_PI / 2.5, M_PI / 1.3);
            for (int r = 0; r < sz; ++r)
                for (int c = 0; c < sz; ++c) {
                    const double rn2 = lung.rnorm2(c, r);
                    if (rn2 < 0.64 || rn2 > 1.0) continue;
                    double ang = std::atan2(r - lung.cy, c - lung.cx) - a0;
                    while (ang < 0) ang += 2 * M_PI;
                    if (ang <= span) paint(r, c, 0.72f, 3);
                }
        }

        // class 2: dense compact blob (highest priority)
        if (rng.uniform() < 0.9) {
            const Ellipse& lung = lungs[rng.range(0, 1)];
            Ellipse blob;
            const double ang = rng.uniform(0, 2 * M_PI);
            const double rad = rng.uniform(0, 0.45);
            blob.cx = lung.cx + std::cos(ang) * rad * lung.rx;
            blob.cy = lung.cy + std::sin(ang) * rad * lung.ry;
            blob.rx = rng.uniform(0.025, 0.06) * sz;
            blob.ry = rng.uniform(0.025, 0.06) * sz;
            for (int r = static_cast<int>(blob.cy - blob.ry); r <= static_cast<int>(blob.cy + blob.ry) + 1; ++r)
                for (int c = static_cast<int>(blob.cx - blob.rx); c <= static_cast<int>(blob.cx + blob.rx) + 1; ++c)
                    if (blob.contains(c, r)) paint(r, c, 0.85f, 2);
        }

        // sensor noise, then 8-bit quantization so files round-trip bitwise
        SegmentationSample s;
        s.id = "s" + std::to_string(i);
        s.image = Tensor32::zeros({1, sz, sz});
        auto d = s.image.mutable_data();
        for (std::size_t px = 0; px < img.size(); ++px) {
            const double v = std::clamp(img[px] + rng.normal() * 0.02, 0.0, 1.0);
            d[px] = static_cast<float>(static_cast<std::uint8_t>(v * 255.0 + 0.5)) / 255.0f;
        }
        s.mask = std::move(mask);
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// dataset directories

void save_dataset(const std::vector<SegmentationSample>& samples, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    std::ofstream manifest(fs::path(dir) / "manifest.tsv");
    if (!manifest) throw DataError("cannot write manifest in " + dir);
    for (const auto& s : samples) {
        const std::string img_rel = "images/" + s.id + ".pgm";
        const std::string mask_rel = "masks/" + s.id + ".pgm";
        write_pgm((fs::path(dir) / img_rel).string(), image_to_u8(s.image));
        GrayImageU8 m;
        m.h = s.mask.h;
        m.w = s.mask.w;
        m.v = s.mask.v;
        write_pgm((fs::path(dir) / mask_rel).string(), m);
        manifest << s.id << "\t" << img_rel << "\t" << mask_rel << "\n";
    }
    if (!manifest) throw DataError("manifest write failed in " + dir);
}

std::vector<SegmentationSample> load_dataset(const std::string& dir) {
    std::ifstream manifest(fs::path(dir) / "manifest.tsv");
    if (!manifest) throw DataError("cannot read manifest in " + dir);
    std::vector<SegmentationSample> samples;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string id, img_rel, mask_rel;
        if (!std::getline(ls, id, '\t') || !std::getline(ls, img_rel, '\t') ||
            !std::getline(ls, mask_rel, '\t'))
            throw DataError("malformed manifest line: '" + line + "'");
        GrayImageU8 raw_img = read_gray_image((fs::path(dir) / img_rel).string());
        GrayImageU8 raw_mask = read_gray_image((fs::path(dir) / mask_rel).string());
        validate_mask_values(raw_mask.v, "mask " + mask_rel);
        if (raw_img.h != raw_mask.h || raw_img.w != raw_mask.w)
            throw DataError("image/mask size mismatch for sample '" + id + "'");
        SegmentationSample s;
        s.id = id;
        s.image = image_from_u8(raw_img);
        s.mask.h = raw_mask.h;
        s.mask.w = raw_mask.w;
        s.mask.v = raw_mask.v;
        samples.push_back(std::move(s));
    }
    return samples;
}

std::vector<std::string> dataset_ids(const std::string& dir) {
    std::ifstream manifest(fs::path(dir) / "manifest.tsv");
    if (!manifest) throw DataError("cannot read manifest in " + dir);
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        ids.push_back(line.substr(0, line.find('\t')));
    }
    return ids;
}

}  // namespace raunet
