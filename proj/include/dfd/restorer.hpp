#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dfd/autograd.hpp"
#include "dfd/dftcore.hpp"
#include "dfd/dictionary.hpp"
#include "dfd/features.hpp"
#include "dfd/image.hpp"
#include "dfd/nn.hpp"
#include "dfd/serialize.hpp"

namespace dfd {

// ---------------------------------------------------------------------------
// SFT: output = alpha ⊙ feature + beta, alpha/beta conditioned on F_hat
// ---------------------------------------------------------------------------

/// Condition trunk (3x3 conv + LeakyReLU) feeding a 2C-channel head whose
/// halves are alpha and beta; each of alpha/beta is thus the output of two
/// stacked 3x3 convolutions. The head starts at identity: alpha=1, beta=0.
struct SftBlock {
    Conv2d trunk, head;
    int channels = 0;

    static SftBlock make(int channels, Rng& rng, const std::string& name) {
        SftBlock b;
        b.channels = channels;
        b.trunk = Conv2d::make(channels, channels, 3, 1, rng, name + ".trunk");
        b.head = Conv2d::make(channels, 2 * channels, 3, 1, rng, name + ".head");
        // Identity start: zero head weights, bias 1 on the alpha half.
        zero_fill(b.head.w);
        zero_fill(b.head.b);
        for (int c = 0; c < channels; ++c) b.head.b->value[c] = 1.0f;
        return b;
    }

    Var operator()(const Var& feature, const Var& condition) const {
        if (feature->value.dim(0) != channels || condition->value.dim(0) != channels)
            throw shape_error("sft: channel mismatch");
        if (feature->value.dim(1) != condition->value.dim(1) ||
            feature->value.dim(2) != condition->value.dim(2))
            throw shape_error("sft: spatial mismatch between feature and condition");
        const Var h = head(leaky_relu(trunk(condition), 0.2f));
        const Var alpha = slice_ch(h, 0, channels);
        const Var beta = slice_ch(h, channels, 2 * channels);
        return add(mul(alpha, feature), beta);
    }

    void collect(std::vector<Var>& out) const {
        trunk.collect(out);
        head.collect(out);
    }
};

// ---------------------------------------------------------------------------
// Generator configuration and parameters
// ---------------------------------------------------------------------------

struct GeneratorConfig {
    int resolution = 256;
    std::vector<int> channels = {64, 128, 256, 512}; // encoder widths, mirrored by the decoder
    int dft_blocks = 4;                              // 0 | 2 | 4
    DftOptions dft;

    void validate() const {
        if (resolution < 32 || resolution % 8 != 0)
            throw config_error("generator: resolution must be a multiple of 8, at least 32");
        if (channels.size() != 4) throw config_error("generator: exactly 4 stages required");
        if (dft_blocks != 0 && dft_blocks != 2 && dft_blocks != 4)
            throw config_error("generator: dft_blocks must be 0, 2 or 4");
    }

    /// Scales (1..4) whose trunk features pass through a DFT block.
    bool dft_active(int scale) const {
        if (dft_blocks == 4) return true;
        if (dft_blocks == 2) return scale >= 3;
        return false;
    }
};

struct GeneratorParams {
    GeneratorConfig config;
    Encoder encoder; // frozen
    Conv2d conv_in;  // C4 -> C4 at the bottleneck
    std::array<Conv2d, 3> up_convs; // C4->C3, C3->C2, C2->C1
    Conv2d conv_out;                // C1 -> 3
    std::array<SftBlock, 4> sft;    // per scale 1..4 (index scale-1)
    std::array<ConfidenceBlock, 4> conf; // per scale, created for active scales only

    std::vector<Var> trainable() const {
        std::vector<Var> out;
        conv_in.collect(out);
        for (const auto& c : up_convs) c.collect(out);
        conv_out.collect(out);
        for (const auto& s : sft) s.collect(out);
        for (int sc = 1; sc <= 4; ++sc)
            if (config.dft_active(sc)) conf[static_cast<std::size_t>(sc - 1)].collect(out);
        return out;
    }
};

inline GeneratorParams build_generator(const GeneratorConfig& config, const Encoder& encoder,
                                       std::uint64_t seed) {
    config.validate();
    if (encoder.config.resolution != config.resolution)
        throw config_error("generator: encoder resolution " +
                           std::to_string(encoder.config.resolution) + " != configured " +
                           std::to_string(config.resolution));
    if (encoder.config.channels != config.channels)
        throw config_error("generator: encoder channel widths do not match config");

    GeneratorParams p;
    p.config = config;
    p.encoder = encoder;
    Rng rng(derive_seed(seed, 0x9e4e7a70ull));
    const auto& ch = config.channels;
    p.conv_in = Conv2d::make(ch[3], ch[3], 3, 1, rng, "dec.conv_in");
    p.up_convs[0] = Conv2d::make(ch[3], ch[2], 3, 1, rng, "dec.up3");
    p.up_convs[1] = Conv2d::make(ch[2], ch[1], 3, 1, rng, "dec.up2");
    p.up_convs[2] = Conv2d::make(ch[1], ch[0], 3, 1, rng, "dec.up1");
    p.conv_out = Conv2d::make(ch[0], 3, 3, 1, rng, "dec.out");
    for (int s = 1; s <= 4; ++s)
        p.sft[static_cast<std::size_t>(s - 1)] =
            SftBlock::make(ch[static_cast<std::size_t>(s - 1)], rng, "sft" + std::to_string(s));
    for (int s = 1; s <= 4; ++s)
        if (config.dft_active(s))
            p.conf[static_cast<std::size_t>(s - 1)] =
                ConfidenceBlock::make(ch[static_cast<std::size_t>(s - 1)], rng, "conf" + std::to_string(s));
    return p;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct RestorationOutput {
    Image image;
    std::vector<DftDiagnostic> diagnostics;
};

namespace detail {
inline std::array<std::optional<RoiBox>, 4> safe_rois(const LandmarkSet& lm, int w, int h) {
    std::array<std::optional<RoiBox>, 4> boxes;
    for (Component c : kComponents) {
        try {
            boxes[static_cast<std::size_t>(c)] = component_roi(lm, c, w, h);
        } catch (const degenerate_roi_error&) {
            boxes[static_cast<std::size_t>(c)] = std::nullopt;
        }
    }
    return boxes;
}
} // namespace detail

/// Differentiable restoration graph. `degraded` must already be at the
/// network resolution. Gradients reach only the trainable decoder-side
/// parameters; the encoder runs as a frozen constant producer.
inline Var restore_forward(const GeneratorParams& p, const Tensor& degraded,
                           const LandmarkSet& lm, const DictionarySet& dict,
                           std::vector<DftDiagnostic>* diagnostics = nullptr) {
    const int res = p.config.resolution;
    if (degraded.rank() != 3 || degraded.dim(0) != 3 || degraded.dim(1) != res ||
        degraded.dim(2) != res)
        throw shape_error("restore: expected (3," + std::to_string(res) + "," +
                          std::to_string(res) + ") input, got " + degraded.shape_string());
    if (p.config.dft_blocks > 0 && dict.encoder_hash != p.encoder.content_hash())
        throw config_error("restore: dictionary encoder hash " + hex64(dict.encoder_hash) +
                           " does not match checkpoint encoder " + p.encoder.hash_string());

    const auto fms = p.encoder.extract(degraded);
    const auto boxes = detail::safe_rois(lm, res, res);

    // Per-scale condition features: DFT output where active, trunk otherwise.
    std::array<Var, 4> cond;
    for (int s = 1; s <= 4; ++s) {
        const Var trunk = constant(fms[static_cast<std::size_t>(s - 1)].data);
        if (p.config.dft_active(s))
            cond[static_cast<std::size_t>(s - 1)] =
                dft_block(trunk, s, boxes, dict, p.conf[static_cast<std::size_t>(s - 1)],
                          p.config.dft, res, diagnostics);
        else
            cond[static_cast<std::size_t>(s - 1)] = trunk;
    }

    // Decoder: bottleneck at scale 4, then three upsample stages, each
    // modulated by SFT against the matching-scale condition.
    Var x = leaky_relu(p.conv_in(cond[3]), 0.2f);
    x = p.sft[3](x, cond[3]);
    for (int s = 3; s >= 1; --s) {
        x = upsample_nearest2(x);
        x = leaky_relu(p.up_convs[static_cast<std::size_t>(3 - s)](x), 0.2f);
        x = p.sft[static_cast<std::size_t>(s - 1)](x, cond[static_cast<std::size_t>(s - 1)]);
    }
    // Bounded output in [0,1].
    return mul_scalar(add_scalar(tanh_op(p.conv_out(x)), 1.0f), 0.5f);
}

inline RestorationOutput restore(const GeneratorParams& p, const Image& degraded,
                                 const LandmarkSet& lm, const DictionarySet& dict) {
    RestorationOutput out;
    Tensor input = image_to_tensor(degraded);
    LandmarkSet marks = lm;
    if (degraded.height != p.config.resolution || degraded.width != p.config.resolution) {
        // Landmarks arrive in the input image's frame; move them along.
        const float sx = static_cast<float>(p.config.resolution) / static_cast<float>(degraded.width);
        const float sy = static_cast<float>(p.config.resolution) / static_cast<float>(degraded.height);
        for (std::size_t i = 0; i < marks.x.size(); ++i) {
            marks.x[i] *= sx;
            marks.y[i] *= sy;
        }
        input = resize_bicubic(input, p.config.resolution, p.config.resolution);
    }
    const Var y = restore_forward(p, input, marks, dict, &out.diagnostics);
    out.image = tensor_to_image(y->value);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: one archive embedding config text, trainable weights and the
// frozen encoder
// ---------------------------------------------------------------------------

inline std::string generator_config_text(const GeneratorConfig& c) {
    std::ostringstream os;
    os << "format_version=1\nkind=generator\nresolution=" << c.resolution << "\nchannels=";
    for (std::size_t i = 0; i < c.channels.size(); ++i) os << (i ? "," : "") << c.channels[i];
    os << "\ndft_blocks=" << c.dft_blocks << "\nuse_cadain=" << (c.dft.use_cadain ? 1 : 0)
       << "\nuse_confidence=" << (c.dft.use_confidence ? 1 : 0)
       << "\nmatch_mode=" << match_mode_name(c.dft.match_mode) << "\n";
    return os.str();
}

inline GeneratorConfig generator_config_from_text(const std::string& text) {
    auto m = kv_map(kv_from_string(text));
    GeneratorConfig c;
    c.resolution = std::stoi(m.at("resolution"));
    c.channels.clear();
    std::istringstream iss(m.at("channels"));
    std::string tok;
    while (std::getline(iss, tok, ',')) c.channels.push_back(std::stoi(tok));
    c.dft_blocks = std::stoi(m.at("dft_blocks"));
    c.dft.use_cadain = m.at("use_cadain") == "1";
    c.dft.use_confidence = m.at("use_confidence") == "1";
    c.dft.match_mode = match_mode_from_name(m.at("match_mode"));
    c.validate();
    return c;
}

inline void add_generator_blobs(BlobArchive& a, const GeneratorParams& p) {
    for (const auto& v : p.trainable()) a.add(v->name, v->value);
    for (int s = 0; s < 4; ++s) {
        a.add("enc.conv" + std::to_string(s) + ".w", p.encoder.w[static_cast<std::size_t>(s)]);
        a.add("enc.conv" + std::to_string(s) + ".b", p.encoder.b[static_cast<std::size_t>(s)]);
    }
}

inline void save_generator(const GeneratorParams& p, const std::string& path,
                           const std::string& extra_text = "") {
    BlobArchive a;
    a.text = generator_config_text(p.config) + extra_text;
    add_generator_blobs(a, p);
    write_archive(path, a);
}

inline GeneratorParams generator_from_archive(const BlobArchive& a) {
    const GeneratorConfig config = generator_config_from_text(a.text);

    Encoder enc;
    enc.config.resolution = config.resolution;
    enc.config.channels = config.channels;
    enc.config.validate();
    for (int s = 0; s < 4; ++s) {
        enc.w.push_back(a.get("enc.conv" + std::to_string(s) + ".w"));
        enc.b.push_back(a.get("enc.conv" + std::to_string(s) + ".b"));
    }

    GeneratorParams p = build_generator(config, enc, /*seed=*/0);
    for (auto& v : p.trainable()) {
        const Tensor& stored = a.get(v->name);
        if (!stored.same_shape(v->value))
            throw corruption_error("checkpoint: shape mismatch for " + v->name);
        v->value = stored;
    }
    return p;
}

inline GeneratorParams load_generator(const std::string& path) {
    return generator_from_archive(read_archive(path));
}

} // namespace dfd
