#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dfd/errors.hpp"
#include "dfd/image.hpp"
#include "dfd/nn.hpp"
#include "dfd/rng.hpp"
#include "dfd/serialize.hpp"
#include "dfd/tensor.hpp"

namespace dfd {

// ---------------------------------------------------------------------------
// Components
// ---------------------------------------------------------------------------

enum class Component { left_eye = 0, right_eye = 1, nose = 2, mouth = 3 };

inline constexpr std::array<Component, 4> kComponents = {Component::left_eye, Component::right_eye,
                                                         Component::nose, Component::mouth};

inline const char* component_name(Component c) {
    switch (c) {
        case Component::left_eye: return "left_eye";
        case Component::right_eye: return "right_eye";
        case Component::nose: return "nose";
        case Component::mouth: return "mouth";
    }
    throw parameter_error("component_name: bad component");
}

inline Component component_from_name(const std::string& s) {
    for (Component c : kComponents)
        if (s == component_name(c)) return c;
    throw parameter_error("unknown component name: " + s);
}

/// Crop size at scale 1 for the given working resolution. The canonical sizes
/// at 256 px are eyes 40, nose 25, mouth 55; other resolutions scale linearly
/// (minimum 4 so toy resolutions keep usable crops).
inline int component_base_size(Component c, int resolution) {
    int base = 0;
    switch (c) {
        case Component::left_eye:
        case Component::right_eye: base = 40; break;
        case Component::nose: base = 25; break;
        case Component::mouth: base = 55; break;
    }
    const int scaled = static_cast<int>(std::lround(base * static_cast<double>(resolution) / 256.0));
    return std::max(4, scaled);
}

/// Crop size at scale s (1-based): the scale-1 size halved per scale, ceil.
inline int component_size(Component c, int scale, int resolution) {
    if (scale < 1 || scale > 4) throw parameter_error("component_size: scale out of [1,4]");
    const int s1 = component_base_size(c, resolution);
    const int div = 1 << (scale - 1);
    return (s1 + div - 1) / div;
}

// ---------------------------------------------------------------------------
// Landmarks (68-point convention, 1-indexed groups)
// ---------------------------------------------------------------------------

struct LandmarkSet {
    std::vector<float> x, y; // 68 entries each

    std::size_t size() const { return x.size(); }
};

inline LandmarkSet load_landmarks(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("landmarks: cannot open " + path);
    LandmarkSet lm;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream iss(line);
        float px = 0, py = 0;
        if (!(iss >> px >> py)) throw data_error("landmarks: malformed line in " + path + ": " + line);
        lm.x.push_back(px);
        lm.y.push_back(py);
    }
    if (lm.size() != 68)
        throw data_error("landmarks: expected 68 points, got " + std::to_string(lm.size()) + " in " + path);
    return lm;
}

inline void save_landmarks(const std::string& path, const LandmarkSet& lm) {
    if (lm.size() != 68) throw parameter_error("landmarks: expected 68 points");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("landmarks: cannot write " + path);
    // max_digits10 so that coordinates survive the text round trip bitwise.
    out << std::setprecision(std::numeric_limits<float>::max_digits10);
    for (std::size_t i = 0; i < 68; ++i) out << lm.x[i] << " " << lm.y[i] << "\n";
}

// ---------------------------------------------------------------------------
// RoI boxes (pixel-edge coordinate space; feature boxes divide by stride)
// ---------------------------------------------------------------------------

struct RoiBox {
    Component component = Component::left_eye;
    float x0 = 0, y0 = 0, x1 = 0, y1 = 0; // pixel-space edges, x1>x0, y1>y0

    float width() const { return x1 - x0; }
    float height() const { return y1 - y0; }

    /// Feature-space edges at scale s (stride 2^{s-1}).
    RoiBox at_scale(int scale) const {
        const float inv = 1.0f / static_cast<float>(1 << (scale - 1));
        RoiBox b = *this;
        b.x0 *= inv;
        b.y0 *= inv;
        b.x1 *= inv;
        b.y1 *= inv;
        return b;
    }
};

namespace detail {
// 1-indexed inclusive landmark ranges per component.
inline std::pair<int, int> component_point_range(Component c) {
    switch (c) {
        case Component::left_eye: return {37, 42};
        case Component::right_eye: return {43, 48};
        case Component::nose: return {28, 36};
        case Component::mouth: return {49, 68};
    }
    throw parameter_error("component_point_range: bad component");
}

inline float component_margin(Component c) {
    switch (c) {
        case Component::left_eye:
        case Component::right_eye: return 1.4f;
        case Component::nose: return 1.3f;
        case Component::mouth: return 1.2f;
    }
    throw parameter_error("component_margin: bad component");
}
} // namespace detail

/// Square box centered on the component's landmark centroid with half-extent
/// margin x the largest centroid-to-point distance, clamped to the image.
inline RoiBox component_roi(const LandmarkSet& lm, Component c, int img_w, int img_h) {
    if (lm.size() != 68) throw parameter_error("component_roi: expected 68 landmarks");
    const auto [lo, hi] = detail::component_point_range(c);
    double cx = 0.0, cy = 0.0;
    for (int i = lo; i <= hi; ++i) {
        cx += lm.x[static_cast<std::size_t>(i - 1)];
        cy += lm.y[static_cast<std::size_t>(i - 1)];
    }
    const int n = hi - lo + 1;
    cx /= n;
    cy /= n;
    double radius = 0.0;
    for (int i = lo; i <= hi; ++i) {
        const double dx = lm.x[static_cast<std::size_t>(i - 1)] - cx;
        const double dy = lm.y[static_cast<std::size_t>(i - 1)] - cy;
        radius = std::max(radius, std::hypot(dx, dy));
    }
    const double half = detail::component_margin(c) * radius;
    RoiBox b;
    b.component = c;
    b.x0 = static_cast<float>(std::max(0.0, cx - half));
    b.y0 = static_cast<float>(std::max(0.0, cy - half));
    b.x1 = static_cast<float>(std::min(static_cast<double>(img_w), cx + half));
    b.y1 = static_cast<float>(std::min(static_cast<double>(img_h), cy + half));
    if (b.width() < 1e-3f || b.height() < 1e-3f)
        throw degenerate_roi_error(std::string("component_roi: ") + component_name(c) +
                                   " collapsed to zero area after clamping");
    return b;
}

inline std::array<RoiBox, 4> component_rois(const LandmarkSet& lm, int img_w, int img_h) {
    return {component_roi(lm, Component::left_eye, img_w, img_h),
            component_roi(lm, Component::right_eye, img_w, img_h),
            component_roi(lm, Component::nose, img_w, img_h),
            component_roi(lm, Component::mouth, img_w, img_h)};
}

// ---------------------------------------------------------------------------
// Frozen multi-scale encoder
// ---------------------------------------------------------------------------

struct FeatureMap {
    int scale = 1;  // 1..4
    int stride = 1; // 2^{scale-1}
    Tensor data;    // (C_s, H/stride, W/stride)
};

struct EncoderConfig {
    int resolution = 256;
    std::vector<int> channels = {64, 128, 256, 512};

    void validate() const {
        if (channels.size() != 4) throw config_error("encoder: exactly 4 stages required");
        if (resolution < 8 || resolution % 8 != 0)
            throw config_error("encoder: resolution must be a multiple of 8, at least 8");
        for (int c : channels)
            if (c < 1) throw config_error("encoder: channel counts must be positive");
    }
};

/// Four conv stages (3x3, LeakyReLU 0.2) with 2x average pooling between
/// stages. Weights are frozen after construction or load.
struct Encoder {
    EncoderConfig config;
    std::vector<Tensor> w, b;        // 4 stages
    mutable std::vector<Var> w_vars; // cached frozen constants for graph passes
    mutable std::vector<Var> b_vars;

    static Encoder random_toy(std::uint64_t seed, int resolution = 64,
                              std::vector<int> channels = {16, 32, 64, 128}) {
        Encoder e;
        e.config.resolution = resolution;
        e.config.channels = std::move(channels);
        e.config.validate();
        Rng rng(derive_seed(seed, 0xe4c0de2ull));
        int in_c = 3;
        for (int s = 0; s < 4; ++s) {
            const int out_c = e.config.channels[static_cast<std::size_t>(s)];
            Tensor wt({out_c, in_c, 3, 3});
            wt.fill_normal(rng, std::sqrt(2.0f / static_cast<float>(in_c * 9)));
            Tensor bt({out_c});
            bt.fill_normal(rng, 0.05f);
            e.w.push_back(std::move(wt));
            e.b.push_back(std::move(bt));
            in_c = out_c;
        }
        return e;
    }

    /// Content hash binding dictionaries and checkpoints to these weights.
    std::uint64_t content_hash() const {
        std::uint64_t h = fnv1a64(&config.resolution, sizeof(config.resolution));
        for (int c : config.channels) h = fnv1a64(&c, sizeof(c), h);
        for (int s = 0; s < 4; ++s) {
            h = fnv1a64(w[static_cast<std::size_t>(s)].data.data(),
                        w[static_cast<std::size_t>(s)].data.size() * sizeof(float), h);
            h = fnv1a64(b[static_cast<std::size_t>(s)].data.data(),
                        b[static_cast<std::size_t>(s)].data.size() * sizeof(float), h);
        }
        return h;
    }
    std::string hash_string() const { return hex64(content_hash()); }

    void save(const std::string& path) const {
        BlobArchive a;
        std::string chans;
        for (std::size_t i = 0; i < config.channels.size(); ++i)
            chans += (i ? "," : "") + std::to_string(config.channels[i]);
        a.text = "format_version=1\nkind=encoder\nresolution=" + std::to_string(config.resolution) +
                 "\nchannels=" + chans + "\n";
        for (int s = 0; s < 4; ++s) {
            a.add("enc.conv" + std::to_string(s) + ".w", w[static_cast<std::size_t>(s)]);
            a.add("enc.conv" + std::to_string(s) + ".b", b[static_cast<std::size_t>(s)]);
        }
        write_archive(path, a);
    }

    static Encoder load(const std::string& path) {
        BlobArchive a = read_archive(path);
        auto m = kv_map(kv_from_string(a.text));
        Encoder e;
        e.config.resolution = std::stoi(m.at("resolution"));
        e.config.channels.clear();
        std::istringstream iss(m.at("channels"));
        std::string tok;
        while (std::getline(iss, tok, ',')) e.config.channels.push_back(std::stoi(tok));
        e.config.validate();
        for (int s = 0; s < 4; ++s) {
            e.w.push_back(a.get("enc.conv" + std::to_string(s) + ".w"));
            e.b.push_back(a.get("enc.conv" + std::to_string(s) + ".b"));
        }
        return e;
    }

    /// Frozen forward on plain tensors (no graph).
    std::array<FeatureMap, 4> extract(const Tensor& img) const {
        if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != config.resolution ||
            img.dim(2) != config.resolution)
            throw shape_error("encoder: expected (3," + std::to_string(config.resolution) + "," +
                              std::to_string(config.resolution) + ") input, got " + img.shape_string());
        std::array<FeatureMap, 4> out;
        Tensor x = img;
        for (int s = 0; s < 4; ++s) {
            if (s > 0) x = avg_pool2_plain(x);
            x = leaky_relu_plain(
                conv2d_plain(x, w[static_cast<std::size_t>(s)], b[static_cast<std::size_t>(s)], 1, 1));
            out[static_cast<std::size_t>(s)] = {s + 1, 1 << s, x};
        }
        return out;
    }
    std::array<FeatureMap, 4> extract(const Image& im) const { return extract(image_to_tensor(im)); }

    /// Differentiable forward for perceptual losses; weights stay frozen
    /// (constants), gradients flow to the input only.
    std::array<Var, 4> extract_graph(const Var& img) const {
        if (w_vars.empty()) {
            for (int s = 0; s < 4; ++s) {
                w_vars.push_back(constant(w[static_cast<std::size_t>(s)]));
                b_vars.push_back(constant(b[static_cast<std::size_t>(s)]));
            }
        }
        std::array<Var, 4> out;
        Var x = img;
        for (int s = 0; s < 4; ++s) {
            if (s > 0) x = avg_pool2(x);
            x = leaky_relu(conv2d(x, w_vars[static_cast<std::size_t>(s)],
                                  b_vars[static_cast<std::size_t>(s)], 1, 1),
                           0.2f);
            out[static_cast<std::size_t>(s)] = x;
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// RoIAlign and its reverse
// ---------------------------------------------------------------------------

namespace detail {
/// Bilinear sample of plane (H,W) at center-space point (fy,fx), clamped.
inline float bilinear_at(const float* plane, int h, int w, float fy, float fx) {
    fy = std::clamp(fy, 0.0f, static_cast<float>(h - 1));
    fx = std::clamp(fx, 0.0f, static_cast<float>(w - 1));
    const int y0 = std::min(static_cast<int>(fy), h - 1);
    const int x0 = std::min(static_cast<int>(fx), w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const int x1 = std::min(x0 + 1, w - 1);
    const float ay = fy - static_cast<float>(y0);
    const float ax = fx - static_cast<float>(x0);
    const float v00 = plane[static_cast<std::int64_t>(y0) * w + x0];
    const float v01 = plane[static_cast<std::int64_t>(y0) * w + x1];
    const float v10 = plane[static_cast<std::int64_t>(y1) * w + x0];
    const float v11 = plane[static_cast<std::int64_t>(y1) * w + x1];
    return (1.0f - ay) * ((1.0f - ax) * v00 + ax * v01) + ay * ((1.0f - ax) * v10 + ax * v11);
}
} // namespace detail

/// Bilinear crop-and-resample: one sample per output bin center. The box is
/// given in pixel space and divided by the map's stride here.
inline Tensor roi_align(const FeatureMap& fm, const RoiBox& box, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw parameter_error("roi_align: empty output size");
    const RoiBox fb = box.at_scale(fm.scale);
    if (fb.width() <= 0.0f || fb.height() <= 0.0f)
        throw degenerate_roi_error("roi_align: empty box");
    const int c = static_cast<int>(fm.data.dim(0));
    const int h = static_cast<int>(fm.data.dim(1));
    const int w = static_cast<int>(fm.data.dim(2));
    Tensor out({c, out_h, out_w});
    const float bh = fb.height() / static_cast<float>(out_h);
    const float bw = fb.width() / static_cast<float>(out_w);
    for (int ch = 0; ch < c; ++ch) {
        const float* plane = fm.data.ptr() + static_cast<std::int64_t>(ch) * h * w;
        for (int i = 0; i < out_h; ++i) {
            const float fy = fb.y0 + (static_cast<float>(i) + 0.5f) * bh - 0.5f;
            for (int j = 0; j < out_w; ++j) {
                const float fx = fb.x0 + (static_cast<float>(j) + 0.5f) * bw - 0.5f;
                out.at3(ch, i, j) = detail::bilinear_at(plane, h, w, fy, fx);
            }
        }
    }
    return out;
}

namespace detail {
struct ReversePlan {
    int ys = 0, ye = 0, xs = 0, xe = 0; // target pixel ranges [ys,ye) x [xs,xe)
    // per target pixel: bilinear taps into comp (index pairs + weights)
    std::vector<float> uy, ux; // comp-space center coords per row / per col
};

inline ReversePlan make_reverse_plan(const RoiBox& fb, int h, int w, int comp_h, int comp_w) {
    ReversePlan p;
    p.ys = std::max(0, static_cast<int>(std::ceil(fb.y0 - 0.5f)));
    p.xs = std::max(0, static_cast<int>(std::ceil(fb.x0 - 0.5f)));
    p.ye = std::min(h, static_cast<int>(std::ceil(fb.y1 - 0.5f)));
    p.xe = std::min(w, static_cast<int>(std::ceil(fb.x1 - 0.5f)));
    // Double arithmetic with one final rounding keeps integer-aligned,
    // size-matched boxes bitwise-exact on the round trip (float-only math
    // drifts by an ulp for sizes that are not powers of two).
    for (int y = p.ys; y < p.ye; ++y)
        p.uy.push_back(static_cast<float>((static_cast<double>(y) + 0.5 - fb.y0) /
                                              static_cast<double>(fb.height()) * comp_h -
                                          0.5));
    for (int x = p.xs; x < p.xe; ++x)
        p.ux.push_back(static_cast<float>((static_cast<double>(x) + 0.5 - fb.x0) /
                                              static_cast<double>(fb.width()) * comp_w -
                                          0.5));
    return p;
}
} // namespace detail

/// Paste `comp` back over `fm` inside `box`: comp is bilinearly resampled to
/// the box's feature-space extent; pixels outside the box are untouched.
inline Tensor reverse_roi_align(const Tensor& fm_data, int scale, const Tensor& comp,
                                const RoiBox& box) {
    if (fm_data.rank() != 3 || comp.rank() != 3) throw shape_error("reverse_roi_align: rank");
    if (fm_data.dim(0) != comp.dim(0)) throw shape_error("reverse_roi_align: channel mismatch");
    const RoiBox fb = box.at_scale(scale);
    if (fb.width() <= 0.0f || fb.height() <= 0.0f)
        throw degenerate_roi_error("reverse_roi_align: empty box");
    const int c = static_cast<int>(fm_data.dim(0));
    const int h = static_cast<int>(fm_data.dim(1));
    const int w = static_cast<int>(fm_data.dim(2));
    const int ch_ = static_cast<int>(comp.dim(1));
    const int cw_ = static_cast<int>(comp.dim(2));
    const auto plan = detail::make_reverse_plan(fb, h, w, ch_, cw_);
    Tensor out = fm_data;
    for (int ch = 0; ch < c; ++ch) {
        const float* src = comp.ptr() + static_cast<std::int64_t>(ch) * ch_ * cw_;
        float* dst = out.ptr() + static_cast<std::int64_t>(ch) * h * w;
        for (int y = plan.ys; y < plan.ye; ++y)
            for (int x = plan.xs; x < plan.xe; ++x)
                dst[static_cast<std::int64_t>(y) * w + x] = detail::bilinear_at(
                    src, ch_, cw_, plan.uy[static_cast<std::size_t>(y - plan.ys)],
                    plan.ux[static_cast<std::size_t>(x - plan.xs)]);
    }
    return out;
}

inline Tensor reverse_roi_align(const FeatureMap& fm, const Tensor& comp, const RoiBox& box) {
    return reverse_roi_align(fm.data, fm.scale, comp, box);
}

/// Autograd reverse RoIAlign: gradient passes through to `fm` outside the box
/// and through the bilinear adjoint to `comp` inside it.
inline Var reverse_roi_align_op(const Var& fm, const Var& comp, const RoiBox& box, int scale) {
    Tensor out = reverse_roi_align(fm->value, scale, comp->value, box);
    const int h = static_cast<int>(fm->value.dim(1));
    const int w = static_cast<int>(fm->value.dim(2));
    const int ch_ = static_cast<int>(comp->value.dim(1));
    const int cw_ = static_cast<int>(comp->value.dim(2));
    const RoiBox fb = box.at_scale(scale);
    return make_op(std::move(out), {fm, comp}, [fm, comp, fb, h, w, ch_, cw_](Node& n) {
        const int c = static_cast<int>(n.grad.dim(0));
        const auto plan = detail::make_reverse_plan(fb, h, w, ch_, cw_);
        if (fm->requires_grad) {
            fm->ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                const float* g = n.grad.ptr() + static_cast<std::int64_t>(ch) * h * w;
                float* d = fm->grad.ptr() + static_cast<std::int64_t>(ch) * h * w;
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) {
                        const bool inside =
                            y >= plan.ys && y < plan.ye && x >= plan.xs && x < plan.xe;
                        if (!inside) d[static_cast<std::int64_t>(y) * w + x] += g[static_cast<std::int64_t>(y) * w + x];
                    }
            }
        }
        if (comp->requires_grad) {
            comp->ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                const float* g = n.grad.ptr() + static_cast<std::int64_t>(ch) * h * w;
                float* d = comp->grad.ptr() + static_cast<std::int64_t>(ch) * ch_ * cw_;
                for (int y = plan.ys; y < plan.ye; ++y)
                    for (int x = plan.xs; x < plan.xe; ++x) {
                        float fy = std::clamp(plan.uy[static_cast<std::size_t>(y - plan.ys)], 0.0f,
                                              static_cast<float>(ch_ - 1));
                        float fx = std::clamp(plan.ux[static_cast<std::size_t>(x - plan.xs)], 0.0f,
                                              static_cast<float>(cw_ - 1));
                        const int y0 = std::min(static_cast<int>(fy), ch_ - 1);
                        const int x0 = std::min(static_cast<int>(fx), cw_ - 1);
                        const int y1 = std::min(y0 + 1, ch_ - 1);
                        const int x1 = std::min(x0 + 1, cw_ - 1);
                        const float ay = fy - static_cast<float>(y0);
                        const float ax = fx - static_cast<float>(x0);
                        const float gv = g[static_cast<std::int64_t>(y) * w + x];
                        d[static_cast<std::int64_t>(y0) * cw_ + x0] += (1 - ay) * (1 - ax) * gv;
                        d[static_cast<std::int64_t>(y0) * cw_ + x1] += (1 - ay) * ax * gv;
                        d[static_cast<std::int64_t>(y1) * cw_ + x0] += ay * (1 - ax) * gv;
                        d[static_cast<std::int64_t>(y1) * cw_ + x1] += ay * ax * gv;
                    }
            }
        }
    });
}

} // namespace dfd
