#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dfd/autograd.hpp"
#include "dfd/dictionary.hpp"
#include "dfd/features.hpp"
#include "dfd/nn.hpp"
#include "dfd/tensor.hpp"

namespace dfd {

// ---------------------------------------------------------------------------
// CAdaIN: re-norm a dictionary cluster to the input's per-channel statistics
// ---------------------------------------------------------------------------

struct ChannelStats {
    std::vector<float> mean, std; // per channel; std includes the epsilon
};

inline constexpr float kStatsEps = 1e-5f;

inline ChannelStats channel_stats(const Tensor& t) {
    if (t.rank() != 3) throw shape_error("channel_stats: expected (C,H,W)");
    const int c = static_cast<int>(t.dim(0));
    const std::int64_t plane = t.dim(1) * t.dim(2);
    ChannelStats s;
    s.mean.resize(static_cast<std::size_t>(c));
    s.std.resize(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        const float* p = t.ptr() + static_cast<std::int64_t>(ch) * plane;
        double m = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) m += p[i];
        m /= static_cast<double>(plane);
        double var = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) {
            const double d = p[i] - m;
            var += d * d;
        }
        var /= static_cast<double>(plane);
        s.mean[static_cast<std::size_t>(ch)] = static_cast<float>(m);
        s.std[static_cast<std::size_t>(ch)] = static_cast<float>(std::sqrt(var + kStatsEps));
    }
    return s;
}

/// RDic = sigma(F) * (Dic - mu(Dic)) / sigma(Dic) + mu(F), per channel.
inline Tensor cadain(const Tensor& cluster, const Tensor& input_comp) {
    require_same_shape(cluster, input_comp, "cadain");
    const ChannelStats ds = channel_stats(cluster);
    const ChannelStats fs = channel_stats(input_comp);
    const int c = static_cast<int>(cluster.dim(0));
    const std::int64_t plane = cluster.dim(1) * cluster.dim(2);
    Tensor out(cluster.dims);
    for (int ch = 0; ch < c; ++ch) {
        const float* src = cluster.ptr() + static_cast<std::int64_t>(ch) * plane;
        float* dst = out.ptr() + static_cast<std::int64_t>(ch) * plane;
        const float scale = fs.std[static_cast<std::size_t>(ch)] / ds.std[static_cast<std::size_t>(ch)];
        const float mu_d = ds.mean[static_cast<std::size_t>(ch)];
        const float mu_f = fs.mean[static_cast<std::size_t>(ch)];
        for (std::int64_t i = 0; i < plane; ++i) dst[i] = scale * (src[i] - mu_d) + mu_f;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Feature match (inner product per cluster after CAdaIN, batched as a GEMV)
// ---------------------------------------------------------------------------

enum class MatchMode { inner, cosine };

inline const char* match_mode_name(MatchMode m) { return m == MatchMode::inner ? "inner" : "cosine"; }
inline MatchMode match_mode_from_name(const std::string& s) {
    if (s == "inner") return MatchMode::inner;
    if (s == "cosine") return MatchMode::cosine;
    throw parameter_error("unknown match mode: " + s + " (use inner|cosine)");
}

struct MatchResult {
    Tensor scores;    // (K)
    int k_star = 0;   // argmax, smallest index on ties
    Tensor selected;  // renormed cluster k_star, shape (C,h,w)
};

/// Scores every (optionally re-normed) cluster against the input component.
/// The K scores come from one matrix-vector product over flattened features,
/// which the tests verify against a per-cluster loop.
inline MatchResult feature_match(const Tensor& input_comp, const ComponentDictionary& dict,
                                 MatchMode mode = MatchMode::inner, bool use_cadain = true) {
    if (dict.clusters.rank() != 4) throw shape_error("feature_match: dictionary must be (K,C,h,w)");
    const int k = dict.k();
    if (k < 1) throw parameter_error("feature_match: empty dictionary");
    if (dict.clusters.dim(1) != input_comp.dim(0) || dict.clusters.dim(2) != input_comp.dim(1) ||
        dict.clusters.dim(3) != input_comp.dim(2))
        throw shape_error("feature_match: cluster shape " + dict.clusters.shape_string() +
                          " does not match input " + input_comp.shape_string());

    const std::int64_t d = input_comp.numel();
    Tensor renormed({k, d});
    for (int i = 0; i < k; ++i) {
        Tensor cluster({input_comp.dims});
        std::copy(dict.clusters.ptr() + static_cast<std::int64_t>(i) * d,
                  dict.clusters.ptr() + static_cast<std::int64_t>(i + 1) * d, cluster.ptr());
        Tensor r = use_cadain ? cadain(cluster, input_comp) : std::move(cluster);
        std::copy(r.data.begin(), r.data.end(), renormed.ptr() + static_cast<std::int64_t>(i) * d);
    }

    using RM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RM> rm(renormed.ptr(), k, d);
    Eigen::Map<const Eigen::VectorXf> fv(input_comp.ptr(), d);
    Eigen::VectorXf s = rm * fv;

    MatchResult res;
    res.scores = Tensor({k});
    if (mode == MatchMode::cosine) {
        const float fn = fv.norm();
        for (int i = 0; i < k; ++i) {
            const float cn = rm.row(i).norm();
            res.scores[i] = s(i) / (fn * cn + 1e-12f);
        }
    } else {
        for (int i = 0; i < k; ++i) res.scores[i] = s(i);
    }

    res.k_star = 0;
    for (int i = 1; i < k; ++i)
        if (res.scores[i] > res.scores[res.k_star]) res.k_star = i;

    res.selected = Tensor(input_comp.dims);
    std::copy(renormed.ptr() + static_cast<std::int64_t>(res.k_star) * d,
              renormed.ptr() + static_cast<std::int64_t>(res.k_star + 1) * d, res.selected.ptr());
    return res;
}

// ---------------------------------------------------------------------------
// Confidence block and fusion
// ---------------------------------------------------------------------------

/// Two 3x3 convolutions with LeakyReLU between and a sigmoid output, giving a
/// per-element score in (0,1).
struct ConfidenceBlock {
    Conv2d c1, c2;

    static ConfidenceBlock make(int channels, Rng& rng, const std::string& name) {
        ConfidenceBlock b;
        b.c1 = Conv2d::make(channels, channels, 3, 1, rng, name + ".c1");
        b.c2 = Conv2d::make(channels, channels, 3, 1, rng, name + ".c2");
        return b;
    }

    Var forward(const Var& x) const { return sigmoid(c2(leaky_relu(c1(x), 0.2f))); }

    void collect(std::vector<Var>& out) const {
        c1.collect(out);
        c2.collect(out);
    }
};

/// F_hat = F + RDic* ⊙ conf. `conf` is usually ConfidenceBlock::forward of
/// (RDic* - F); tests may pass a forced constant instead.
inline Var confidence_fuse(const Var& f, const Var& rdic_star, const Var& conf) {
    require_same_shape(f->value, rdic_star->value, "confidence_fuse");
    require_same_shape(f->value, conf->value, "confidence_fuse");
    return add(f, mul(rdic_star, conf));
}

// ---------------------------------------------------------------------------
// DFT block: crop -> match -> fuse -> paste, per component
// ---------------------------------------------------------------------------

struct DftOptions {
    bool use_cadain = true;      // off reproduces the -Ada variant
    bool use_confidence = true;  // off reproduces the -CS variant (direct swap)
    MatchMode match_mode = MatchMode::inner;
    // Test hook: when set, the confidence map is this constant everywhere.
    std::optional<float> confidence_override;
};

struct DftDiagnostic {
    int scale = 0;
    Component component = Component::left_eye;
    int k_star = -1;
    double mean_confidence = 0.0;
    bool skipped = false;
};

/// One Dictionary Feature Transfer block at the feature map's scale. `fm` is
/// the frozen trunk feature (constant); gradients flow only through the

/// confidence block into the pasted regions.
inline Var dft_block(const Var& fm, int scale,
                     const std::array<std::optional<RoiBox>, 4>& boxes, const DictionarySet& dict,
                     const ConfidenceBlock& conf_block, const DftOptions& opt, int resolution,
                     std::vector<DftDiagnostic>* diagnostics = nullptr) {
    Var out = fm;
    for (Component c : kComponents) {
        DftDiagnostic diag;
        diag.scale = scale;
        diag.component = c;
        const auto& box_opt = boxes[static_cast<std::size_t>(c)];
        if (!box_opt) {
            diag.skipped = true;
            if (diagnostics) diagnostics->push_back(diag);
            continue;
        }
        try {
            const int sz = component_size(c, scale, resolution);
            // Crops always come from the original trunk features; sequential
            // pastes of overlapping boxes overwrite in component order.
            const FeatureMap view{scale, 1 << (scale - 1), fm->value};
            const Tensor f = roi_align(view, *box_opt, sz, sz);
            const MatchResult match =
                feature_match(f, dict.at(scale, c), opt.match_mode, opt.use_cadain);
            diag.k_star = match.k_star;

            const Var f_const = constant(f);
            const Var rdic = constant(match.selected);
            Var fused;
            if (opt.confidence_override) {
                const Var conf = constant(Tensor::full(f.dims, *opt.confidence_override));
                diag.mean_confidence = *opt.confidence_override;
                fused = confidence_fuse(f_const, rdic, conf);
            } else if (opt.use_confidence) {
                const Var conf = conf_block.forward(sub(rdic, f_const));
                diag.mean_confidence = conf->value.mean();
                fused = confidence_fuse(f_const, rdic, conf);
            } else {
                fused = rdic; // direct swap
                diag.mean_confidence = 1.0;
            }
            out = reverse_roi_align_op(out, fused, *box_opt, scale);
        } catch (const degenerate_roi_error&) {
            diag.skipped = true;
        }
        if (diagnostics) diagnostics->push_back(diag);
    }
    return out;
}

} // namespace dfd
