#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>

#include "raunet/attention.hpp"
#include "raunet/blocks.hpp"
#include "raunet/mask.hpp"

namespace raunet {

enum class ModelVariant { kFull, kNoAttention, kNoResnext, kUnet };

inline std::string variant_name(ModelVariant v) {
    switch (v) {
        case ModelVariant::kFull: return "full";
        case ModelVariant::kNoAttention: return "ma";
        case ModelVariant::kNoResnext: return "mr";
        case ModelVariant::kUnet: return "unet";
    }
    return "full";
}

inline ModelVariant parse_variant(const std::string& s) {
    if (s == "full") return ModelVariant::kFull;
    if (s == "ma") return ModelVariant::kNoAttention;
    if (s == "mr") return ModelVariant::kNoResnext;
    if (s == "unet") return ModelVariant::kUnet;
    throw ConfigError("unknown model variant '" + s + "' (expected full|ma|mr|unet)");
}

struct ModelConfig {
    ModelVariant variant = ModelVariant::kFull;
    int depth = 4;           // down-sampling stages
    int base_channels = 32;  // doubled per stage
    int cardinality = 8;
    int in_channels = 1;
    int n_classes = 4;
    int input_size = 368;  // expected H=W; forward accepts any divisible geometry

    // attention gate policy
    int attn_rounds = 2;
    int attn_chunk = 64;  // target chunk length; per-stage value divides H*W
    int attn_dk = 16;
    std::uint64_t attn_hash_seed = 0x7261756eULL;

    // Test/ablation hook: keep gate parameters but pass skips through
    // untouched. Not serialized.
    bool identity_gates = false;

    bool uses_resnext() const {
        return variant == ModelVariant::kFull || variant == ModelVariant::kNoAttention;
    }
    bool has_gate_params() const {
        return variant == ModelVariant::kFull || variant == ModelVariant::kNoResnext;
    }
    bool uses_attention() const { return has_gate_params() && !identity_gates; }

    void validate() const {
        if (depth < 1) throw ConfigError("model: depth must be >= 1");
        if (base_channels < 1) throw ConfigError("model: base_channels must be >= 1");
        if (cardinality < 1) throw ConfigError("model: cardinality must be >= 1");
        if (n_classes < 2) throw ConfigError("model: n_classes must be >= 2");
    }

    int channels_at(int stage) const { return base_channels << stage; }
};

// Largest divisor of l not exceeding the target, and the bucket count the
// gate derives from it (2l/m, even by construction, capped at 512).
inline int gate_chunk_len(int l, int target) {
    target = std::max(1, std::min(target, l));
    for (int m = target; m >= 1; --m)
        if (l % m == 0) return m;
    return 1;
}

inline int gate_bucket_count(int l, int m) {
    const int nb = 2 * (l / m);
    return std::max(2, std::min(nb, 512));
}

template <typename S>
struct DoubleConvParams {
    Conv2dLayer<S> c1, c2;

    static DoubleConvParams init(int in_ch, int out_ch, Rng& rng) {
        DoubleConvParams p;
        p.c1 = Conv2dLayer<S>::init(in_ch, out_ch, 3, 1, 1, rng);
        p.c2 = Conv2dLayer<S>::init(out_ch, out_ch, 3, 1, 1, rng);
        return p;
    }
};

template <typename S>
Tensor<S> double_conv_forward(const Tensor<S>& x, const DoubleConvParams<S>& p) {
    return relu(p.c2(relu(p.c1(x))));
}

template <typename S>
struct EncoderStageParams {
    bool resnext = false;
    ResNeXtBlockParams<S> xblock;
    DoubleConvParams<S> dconv;
};

template <typename S>
struct DecoderStageParams {
    Tensor<S> up_w;  // [in, out, 2, 2] transposed-conv kernel
    Tensor<S> up_b;  // [out]
    bool has_gate = false;
    AttentionGateParams<S> gate;
    DoubleConvParams<S> dconv;
};

template <typename S>
struct ModelParams {
    std::vector<EncoderStageParams<S>> encoder;
    EncoderStageParams<S> bridge;
    std::vector<DecoderStageParams<S>> decoder;
    Conv2dLayer<S> classifier;  // 1x1 -> n_classes
};

namespace detail {

template <typename S>
EncoderStageParams<S> init_stage(const ModelConfig& cfg, int in_ch, int out_ch, Rng& rng) {
    EncoderStageParams<S> st;
    st.resnext = cfg.uses_resnext();
    if (st.resnext)
        st.xblock = ResNeXtBlockParams<S>::init(in_ch, out_ch, cfg.cardinality, 1, rng);
    else
        st.dconv = DoubleConvParams<S>::init(in_ch, out_ch, rng);
    return st;
}

}  // namespace detail

// Fan-in scaled uniform init for every conv / projection weight, zero biases;
// bitwise deterministic per seed.
template <typename S>
ModelParams<S> parameter_init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x696e6974ULL /*"init"*/));
    ModelParams<S> p;
    for (int k = 0; k < cfg.depth; ++k) {
        const int in_ch = k == 0 ? cfg.in_channels : cfg.channels_at(k - 1);
        p.encoder.push_back(detail::init_stage<S>(cfg, in_ch, cfg.channels_at(k), rng));
    }
    p.bridge = detail::init_stage<S>(cfg, cfg.channels_at(cfg.depth - 1), cfg.channels_at(cfg.depth), rng);
    for (int k = cfg.depth - 1; k >= 0; --k) {
        DecoderStageParams<S> st;
        const int in_ch = cfg.channels_at(k + 1);
        const int out_ch = cfg.channels_at(k);
        st.up_w = Tensor<S>::zeros({in_ch, out_ch, 2, 2}, true);
        const double bound = std::sqrt(6.0 / (static_cast<double>(in_ch) * 4));
        for (auto& x : st.up_w.mutable_data()) x = static_cast<S>(rng.uniform(-bound, bound));
        st.up_b = Tensor<S>::zeros({out_ch}, true);
        if (cfg.has_gate_params()) {
            st.has_gate = true;
            LshAttentionConfig acfg;
            acfg.rounds = cfg.attn_rounds;
            acfg.seed = derive_seed(cfg.attn_hash_seed, static_cast<std::uint64_t>(k));
            st.gate = AttentionGateParams<S>::init(out_ch, cfg.attn_dk, acfg, rng);
        }
        st.dconv = DoubleConvParams<S>::init(out_ch * 2, out_ch, rng);
        p.decoder.push_back(std::move(st));
    }
    p.classifier = Conv2dLayer<S>::init(cfg.base_channels, cfg.n_classes, 1, 1, 0, rng);
    return p;
}

// Deterministically ordered (name, tensor) pairs covering every trainable
// parameter. Handles share storage with the model.
template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> collect_params(const ModelParams<S>& p) {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    auto add_conv = [&out](const std::string& prefix, const Conv2dLayer<S>& c) {
        out.emplace_back(prefix + ".w", c.w);
        if (c.b.defined()) out.emplace_back(prefix + ".b", c.b);
    };
    auto add_stage = [&](const std::string& prefix, const EncoderStageParams<S>& st) {
        if (st.resnext) {
            for (std::size_t c = 0; c < st.xblock.branches.size(); ++c) {
                const auto& br = st.xblock.branches[c];
                add_conv(prefix + ".branch" + std::to_string(c) + ".reduce", br.reduce);
                add_conv(prefix + ".branch" + std::to_string(c) + ".conv", br.conv);
                add_conv(prefix + ".branch" + std::to_string(c) + ".expand", br.expand);
            }
            if (st.xblock.has_proj) add_conv(prefix + ".proj", st.xblock.proj);
        } else {
            add_conv(prefix + ".conv1", st.dconv.c1);
            add_conv(prefix + ".conv2", st.dconv.c2);
        }
    };
    for (std::size_t k = 0; k < p.encoder.size(); ++k)
        add_stage("enc" + std::to_string(k), p.encoder[k]);
    add_stage("bridge", p.bridge);
    for (std::size_t k = 0; k < p.decoder.size(); ++k) {
        const std::string prefix = "dec" + std::to_string(k);
        const auto& st = p.decoder[k];
        out.emplace_back(prefix + ".up.w", st.up_w);
        out.emplace_back(prefix + ".up.b", st.up_b);
        if (st.has_gate) out.emplace_back(prefix + ".gate.wq", st.gate.wq);
        add_conv(prefix + ".conv1", st.dconv.c1);
        add_conv(prefix + ".conv2", st.dconv.c2);
    }
    add_conv("final", p.classifier);
    return out;
}

// Optional record of per-stage output shapes, for geometry tests.
struct StageTrace {
    std::vector<Shape> encoder_outputs;  // pre-pool skip shapes
    Shape bridge_output;
    std::vector<Shape> decoder_outputs;
};

template <typename S>
Tensor<S> forward(const Tensor<S>& x, const ModelParams<S>& p, const ModelConfig& cfg,
                  StageTrace* trace = nullptr) {
    cfg.validate();
    if (x.rank() != 4 || x.extent(1) != cfg.in_channels)
        throw GeometryError("model forward: expected input [N," + std::to_string(cfg.in_channels) +
                            ",H,W], got " + shape_str(x.shape()));
    const int H = x.extent(2), W = x.extent(3);
    for (int k = 0; k < cfg.depth; ++k) {
        const int div = 1 << (k + 1);
        if (H % div != 0 || W % div != 0)
            throw GeometryError("model forward: input " + std::to_string(H) + "x" +
                                std::to_string(W) + " cannot be pooled at encoder stage " +
                                std::to_string(k) + " (needs divisibility by " +
                                std::to_string(div) + ")");
    }
    if (static_cast<int>(p.encoder.size()) != cfg.depth ||
        static_cast<int>(p.decoder.size()) != cfg.depth)
        throw ConfigError("model forward: params built for depth " +
                          std::to_string(p.encoder.size()) + ", config wants " +
                          std::to_string(cfg.depth));

    auto run_stage = [](const Tensor<S>& in, const EncoderStageParams<S>& st) {
        return st.resnext ? resnext_block_forward(in, st.xblock)
                          : double_conv_forward(in, st.dconv);
    };

    std::vector<Tensor<S>> skips;
    Tensor<S> cur = x;
    for (int k = 0; k < cfg.depth; ++k) {
        Tensor<S> s = run_stage(cur, p.encoder[static_cast<std::size_t>(k)]);
        skips.push_back(s);
        if (trace) trace->encoder_outputs.push_back(s.shape());
        cur = maxpool2d(s, 2, 2);
    }
    cur = run_stage(cur, p.bridge);
    if (trace) trace->bridge_output = cur.shape();

    for (std::size_t i = 0; i < p.decoder.size(); ++i) {
        const auto& st = p.decoder[i];
        const int stage = cfg.depth - 1 - static_cast<int>(i);
        cur = conv2d_transpose(cur, st.up_w, st.up_b, 2);
        Tensor<S> skip = skips[static_cast<std::size_t>(stage)];
        if (st.has_gate && cfg.uses_attention()) {
            AttentionGateParams<S> gate = st.gate;
            const int l = skip.extent(2) * skip.extent(3);
            gate.cfg.chunk_len = gate_chunk_len(l, cfg.attn_chunk);
            gate.cfg.n_buckets = gate_bucket_count(l, gate.cfg.chunk_len);
            skip = attention_gate_2d(skip, cur, gate);
        }
        cur = double_conv_forward(concat<S>({cur, skip}, 1), st.dconv);
        if (trace) trace->decoder_outputs.push_back(cur.shape());
    }
    return p.classifier(cur);  // per-pixel class scores
}

// Per-pixel argmax over classes; ties resolve to the lower class index.
template <typename S>
std::vector<LabelMask> predict_mask(const Tensor<S>& x, const ModelParams<S>& p,
                                    const ModelConfig& cfg) {
    NoGradGuard ng;
    Tensor<S> logits = forward(x, p, cfg);
    const int N = logits.extent(0), C = logits.extent(1), H = logits.extent(2),
              W = logits.extent(3);
    std::vector<LabelMask> masks;
    masks.reserve(static_cast<std::size_t>(N));
    const S* d = logits.data().data();
    for (int n = 0; n < N; ++n) {
        LabelMask mask(H, W);
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                const std::size_t base =
                    ((static_cast<std::size_t>(n) * C) * H + r) * W + c;
                const std::size_t plane = static_cast<std::size_t>(H) * W;
                int best = 0;
                S best_v = d[base];
                for (int cl = 1; cl < C; ++cl)
                    if (d[base + static_cast<std::size_t>(cl) * plane] > best_v) {
                        best_v = d[base + static_cast<std::size_t>(cl) * plane];
                        best = cl;
                    }
                mask.at(r, c) = static_cast<std::uint8_t>(best);
            }
        masks.push_back(std::move(mask));
    }
    return masks;
}

// ---------------------------------------------------------------------------
// checkpoint format: "RAUN" magic, u32 version, length-prefixed key=value
// config text, then per-tensor records (u32 name length, name bytes, u32
// rank, u32 extents, raw little-endian f32 data) until EOF.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::map<std::string, std::string> config_to_kv(const ModelConfig& cfg) {
    std::map<std::string, std::string> kv;
    kv["variant"] = variant_name(cfg.variant);
    kv["depth"] = std::to_string(cfg.depth);
    kv["base_channels"] = std::to_string(cfg.base_channels);
    kv["cardinality"] = std::to_string(cfg.cardinality);
    kv["in_channels"] = std::to_string(cfg.in_channels);
    kv["n_classes"] = std::to_string(cfg.n_classes);
    kv["input_size"] = std::to_string(cfg.input_size);
    kv["attn_rounds"] = std::to_string(cfg.attn_rounds);
    kv["attn_chunk"] = std::to_string(cfg.attn_chunk);
    kv["attn_dk"] = std::to_string(cfg.attn_dk);
    kv["attn_hash_seed"] = std::to_string(cfg.attn_hash_seed);
    return kv;
}

inline ModelConfig config_from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig cfg;
    auto get = [&kv](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw CorruptFileError("checkpoint config missing key '" + key + "'");
        return it->second;
    };
    cfg.variant = parse_variant(get("variant"));
    cfg.depth = std::stoi(get("depth"));
    cfg.base_channels = std::stoi(get("base_channels"));
    cfg.cardinality = std::stoi(get("cardinality"));
    cfg.in_channels = std::stoi(get("in_channels"));
    cfg.n_classes = std::stoi(get("n_classes"));
    cfg.input_size = std::stoi(get("input_size"));
    cfg.attn_rounds = std::stoi(get("attn_rounds"));
    cfg.attn_chunk = std::stoi(get("attn_chunk"));
    cfg.attn_dk = std::stoi(get("attn_dk"));
    cfg.attn_hash_seed = std::stoull(get("attn_hash_seed"));
    return cfg;
}

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw CorruptFileError("checkpoint truncated while reading a length field");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

template <typename S>
void save_checkpoint(const ModelParams<S>& params, const ModelConfig& cfg,
                     const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write("RAUN", 4);
    detail::write_u32(os, kCheckpointVersion);
    std::string cfg_text;
    for (const auto& [k, v] : config_to_kv(cfg)) cfg_text += k + "=" + v + "\n";
    detail::write_u32(os, static_cast<std::uint32_t>(cfg_text.size()));
    os.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
    for (const auto& [name, t] : collect_params(params)) {
        detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i)
            detail::write_u32(os, static_cast<std::uint32_t>(t.extent(i)));
        for (S v : t.data()) {
            const float f = static_cast<float>(v);
            os.write(reinterpret_cast<const char*>(&f), sizeof(float));
        }
    }
    if (!os) throw DataError("checkpoint write failed: " + path);
}

struct RawCheckpoint {
    std::map<std::string, std::string> config;
    std::vector<std::pair<std::string, std::pair<Shape, std::vector<float>>>> tensors;
};

inline RawCheckpoint read_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "RAUN")
        throw CorruptFileError("not a checkpoint file (bad magic): " + path);
    const std::uint32_t version = detail::read_u32(is);
    if (version != kCheckpointVersion)
        throw VersionMismatchError("checkpoint version " + std::to_string(version) +
                                   " unsupported (expected " +
                                   std::to_string(kCheckpointVersion) + ")");
    const std::uint32_t cfg_len = detail::read_u32(is);
    std::string cfg_text(cfg_len, '\0');
    is.read(cfg_text.data(), cfg_len);
    if (!is) throw CorruptFileError("checkpoint truncated inside the config block");

    RawCheckpoint raw;
    std::istringstream cfg_stream(cfg_text);
    std::string line;
    while (std::getline(cfg_stream, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) raw.config[line.substr(0, eq)] = line.substr(eq + 1);
    }
    while (true) {
        is.peek();
        if (is.eof()) break;
        const std::uint32_t name_len = detail::read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw CorruptFileError("checkpoint truncated inside a tensor name");
        const std::uint32_t rank = detail::read_u32(is);
        Shape shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape[i] = static_cast<int>(detail::read_u32(is));
            numel *= static_cast<std::size_t>(shape[i]);
        }
        std::vector<float> data(numel);
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(numel * sizeof(float)));
        if (!is) throw CorruptFileError("checkpoint truncated inside tensor '" + name + "'");
        raw.tensors.emplace_back(std::move(name), std::make_pair(std::move(shape), std::move(data)));
    }
    return raw;
}

// Load against a known config; every expected tensor must be present with the
// exact shape (first offending tensor is named).
template <typename S>
ModelParams<S> load_checkpoint(const std::string& path, const ModelConfig& cfg) {
    RawCheckpoint raw = read_checkpoint_file(path);
    std::map<std::string, std::pair<Shape, std::vector<float>>> lookup;
    for (auto& [name, rec] : raw.tensors) lookup[name] = std::move(rec);

    ModelParams<S> params = parameter_init<S>(cfg, 0);
    for (auto& [name, tensor] : collect_params(params)) {
        auto it = lookup.find(name);
        if (it == lookup.end())
            throw ShapeError("checkpoint is missing tensor '" + name + "' required by config " +
                             variant_name(cfg.variant) + "/depth=" + std::to_string(cfg.depth));
        if (it->second.first != tensor.shape())
            throw ShapeError("checkpoint tensor '" + name + "' has shape " +
                             shape_str(it->second.first) + ", config wants " +
                             shape_str(tensor.shape()));
        auto dst = tensor.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(it->second.second[i]);
    }
    return params;
}

// Load with the config recorded in the file.
template <typename S>
std::pair<ModelConfig, ModelParams<S>> load_checkpoint_auto(const std::string& path) {
    RawCheckpoint raw = read_checkpoint_file(path);
    ModelConfig cfg = config_from_kv(raw.config);
    return {cfg, load_checkpoint<S>(path, cfg)};
}

}  // namespace raunet
