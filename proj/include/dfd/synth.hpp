#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "dfd/features.hpp"
#include "dfd/image.hpp"
#include "dfd/rng.hpp"

namespace dfd {

// ---------------------------------------------------------------------------
// Procedural toy faces. Component appearance varies over small discrete
// style families (plus continuous jitter), so component dictionaries built
// from these images carry transferable detail.
// ---------------------------------------------------------------------------

struct ToyFace {
    Image image;
    LandmarkSet landmarks;
    int eye_style = 0, mouth_style = 0, nose_style = 0;
};

namespace detail {

struct Rgb {
    float r, g, b;
};

inline float smoothstep(float e0, float e1, float x) {
    const float t = std::clamp((x - e0) / (e1 - e0), 0.0f, 1.0f);
    return t * t * (3.0f - 2.0f * t);
}

inline void blend(Image& im, int y, int x, const Rgb& c, float a) {
    if (a <= 0.0f || y < 0 || y >= im.height || x < 0 || x >= im.width) return;
    im.at(y, x, 0) += a * (c.r - im.at(y, x, 0));
    im.at(y, x, 1) += a * (c.g - im.at(y, x, 1));
    im.at(y, x, 2) += a * (c.b - im.at(y, x, 2));
}

/// Soft-edged ellipse: alpha 1 inside, feathered over `soft` normalized units.
inline void fill_ellipse(Image& im, float cx, float cy, float rx, float ry, const Rgb& c,
                         float soft = 0.15f, float alpha = 1.0f) {
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - ry * (1 + soft) - 1)));
    const int y1 = std::min(im.height - 1, static_cast<int>(std::ceil(cy + ry * (1 + soft) + 1)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - rx * (1 + soft) - 1)));
    const int x1 = std::min(im.width - 1, static_cast<int>(std::ceil(cx + rx * (1 + soft) + 1)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const float dx = (static_cast<float>(x) + 0.5f - cx) / rx;
            const float dy = (static_cast<float>(y) + 0.5f - cy) / ry;
            const float d = dx * dx + dy * dy;
            blend(im, y, x, c, alpha * (1.0f - smoothstep(1.0f - soft, 1.0f + soft, d)));
        }
}

/// Soft ring (annulus) between radii r_in..r_out (relative to rx, ry).
inline void fill_ring(Image& im, float cx, float cy, float rx, float ry, float r_in, float r_out,
                      const Rgb& c, float alpha = 1.0f) {
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - ry * r_out - 2)));
    const int y1 = std::min(im.height - 1, static_cast<int>(std::ceil(cy + ry * r_out + 2)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - rx * r_out - 2)));
    const int x1 = std::min(im.width - 1, static_cast<int>(std::ceil(cx + rx * r_out + 2)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const float dx = (static_cast<float>(x) + 0.5f - cx) / rx;
            const float dy = (static_cast<float>(y) + 0.5f - cy) / ry;
            const float d = std::sqrt(dx * dx + dy * dy);
            const float a = smoothstep(r_in - 0.12f, r_in + 0.12f, d) *
                            (1.0f - smoothstep(r_out - 0.12f, r_out + 0.12f, d));
            blend(im, y, x, c, alpha * a);
        }
}

} // namespace detail

/// Deterministic toy face for (seed, index) at the given square resolution.
inline ToyFace make_toy_face(std::uint64_t seed, int index, int resolution) {
    using detail::Rgb;
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(index) + 101));
    const float R = static_cast<float>(resolution);

    ToyFace face;
    face.eye_style = rng.uniform_int(0, 3);
    face.mouth_style = rng.uniform_int(0, 3);
    face.nose_style = rng.uniform_int(0, 2);
    const float illum = static_cast<float>(rng.uniform(0.85, 1.1));
    const float jx = static_cast<float>(rng.uniform(-0.015, 0.015)) * R;
    const float jy = static_cast<float>(rng.uniform(-0.015, 0.015)) * R;
    const float tint = static_cast<float>(rng.uniform(-0.05, 0.05));

    Image& im = face.image;
    im = Image(resolution, resolution);

    // Background: vertical gradient with a per-image hue.
    const Rgb bg_top{0.32f + tint, 0.36f, 0.46f - tint};
    const Rgb bg_bot{0.16f + tint * 0.5f, 0.18f, 0.26f};
    for (int y = 0; y < resolution; ++y) {
        const float t = static_cast<float>(y) / R;
        for (int x = 0; x < resolution; ++x) {
            im.at(y, x, 0) = bg_top.r + t * (bg_bot.r - bg_top.r);
            im.at(y, x, 1) = bg_top.g + t * (bg_bot.g - bg_top.g);
            im.at(y, x, 2) = bg_top.b + t * (bg_bot.b - bg_top.b);
        }
    }

    // Face oval and ears-level shading.
    const float fcx = 0.5f * R + jx, fcy = 0.54f * R + jy;
    const float frx = 0.335f * R, fry = 0.42f * R;
    const Rgb skin{std::min(1.0f, 0.84f * illum + tint), std::min(1.0f, 0.66f * illum),
                   std::min(1.0f, 0.54f * illum - tint * 0.5f)};
    detail::fill_ellipse(im, fcx, fcy, frx, fry, skin, 0.08f);
    const Rgb shade{skin.r * 0.86f, skin.g * 0.84f, skin.b * 0.84f};
    detail::fill_ellipse(im, fcx, fcy + 0.30f * fry, frx * 0.85f, fry * 0.45f, shade, 0.5f, 0.35f);

    // Eyes.
    const float eyx = 0.155f * R, eyy = 0.42f * R + jy;
    const float lex = fcx - eyx, rex = fcx + eyx;
    const float erx = 0.085f * R, ery = 0.05f * R;
    const Rgb sclera{0.96f, 0.96f, 0.94f};
    const Rgb browc{0.22f, 0.15f, 0.10f};
    std::array<Rgb, 4> iris_colors = {Rgb{0.30f, 0.18f, 0.08f}, Rgb{0.20f, 0.38f, 0.62f},
                                      Rgb{0.18f, 0.45f, 0.25f}, Rgb{0.62f, 0.42f, 0.12f}};
    for (const float ex : {lex, rex}) {
        // Brow: flat soft bar above the eye.
        detail::fill_ellipse(im, ex, eyy - 0.085f * R, erx * 1.15f, 0.016f * R, browc, 0.5f, 0.9f);
        detail::fill_ellipse(im, ex, eyy, erx, ery, sclera, 0.12f);
        const Rgb ic = iris_colors[static_cast<std::size_t>(face.eye_style)];
        const float ir = 0.034f * R;
        switch (face.eye_style) {
            case 0:
                detail::fill_ellipse(im, ex, eyy, ir, ir, ic, 0.2f);
                detail::fill_ellipse(im, ex, eyy, ir * 0.42f, ir * 0.42f, Rgb{0.05f, 0.04f, 0.04f}, 0.3f);
                break;
            case 1:
                detail::fill_ellipse(im, ex, eyy, ir, ir, ic, 0.2f);
                detail::fill_ellipse(im, ex, eyy, ir * 0.45f, ir * 0.45f, Rgb{0.05f, 0.05f, 0.08f}, 0.3f);
                detail::fill_ellipse(im, ex + ir * 0.35f, eyy - ir * 0.35f, ir * 0.22f, ir * 0.22f,
                                     Rgb{0.98f, 0.98f, 0.98f}, 0.4f);
                break;
            case 2:
                detail::fill_ellipse(im, ex, eyy, ir, ir, ic, 0.2f);
                detail::fill_ring(im, ex, eyy, ir, ir, 0.75f, 1.05f, Rgb{0.06f, 0.10f, 0.06f});
                detail::fill_ellipse(im, ex, eyy, ir * 0.4f, ir * 0.4f, Rgb{0.04f, 0.04f, 0.04f}, 0.3f);
                break;
            default:
                detail::fill_ring(im, ex, eyy, ir, ir, 0.7f, 1.0f, ic);
                detail::fill_ellipse(im, ex, eyy, ir * 0.68f, ir * 0.68f, Rgb{0.06f, 0.05f, 0.05f}, 0.25f);
                break;
        }
    }

    // Nose: ridge shading + nostrils; style varies width and darkness.
    const float nw = (0.030f + 0.008f * static_cast<float>(face.nose_style)) * R;
    const float ntop = 0.46f * R + jy, nbot = 0.615f * R + jy;
    const Rgb nshade{skin.r * 0.82f, skin.g * 0.78f, skin.b * 0.78f};
    for (int step = 0; step <= 24; ++step) {
        const float t = static_cast<float>(step) / 24.0f;
        const float y = ntop + t * (nbot - ntop);
        detail::fill_ellipse(im, fcx, y, nw * (0.55f + 0.45f * t), 0.016f * R, nshade, 0.6f, 0.5f);
    }
    const float nostril_dark = 0.12f + 0.06f * static_cast<float>(face.nose_style);
    const Rgb nostril{nostril_dark, nostril_dark * 0.8f, nostril_dark * 0.8f};
    detail::fill_ellipse(im, fcx - nw * 0.8f, nbot, 0.013f * R, 0.009f * R, nostril, 0.5f);
    detail::fill_ellipse(im, fcx + nw * 0.8f, nbot, 0.013f * R, 0.009f * R, nostril, 0.5f);

    // Mouth.
    const float mcx = fcx, mcy = 0.745f * R + jy;
    const float mw = 0.115f * R, mh = 0.040f * R;
    switch (face.mouth_style) {
        case 0: { // thin closed lips
            const Rgb lip{0.55f, 0.20f, 0.22f};
            detail::fill_ellipse(im, mcx, mcy, mw, mh * 0.55f, lip, 0.25f);
            detail::fill_ellipse(im, mcx, mcy, mw * 0.96f, 0.006f * R, Rgb{0.30f, 0.10f, 0.12f}, 0.6f);
            break;
        }
        case 1: { // full two-tone lips
            const Rgb upper{0.48f, 0.16f, 0.20f}, lower{0.70f, 0.30f, 0.32f};
            detail::fill_ellipse(im, mcx, mcy - mh * 0.35f, mw, mh * 0.62f, upper, 0.25f);
            detail::fill_ellipse(im, mcx, mcy + mh * 0.42f, mw * 0.88f, mh * 0.66f, lower, 0.25f);
            break;
        }
        case 2: { // open smile with teeth
            const Rgb lip{0.50f, 0.17f, 0.20f};
            detail::fill_ellipse(im, mcx, mcy, mw, mh, lip, 0.2f);
            detail::fill_ellipse(im, mcx, mcy - mh * 0.05f, mw * 0.78f, mh * 0.45f,
                                 Rgb{0.93f, 0.92f, 0.88f}, 0.25f);
            detail::fill_ellipse(im, mcx, mcy + mh * 0.04f, mw * 0.78f, 0.004f * R,
                                 Rgb{0.75f, 0.72f, 0.68f}, 0.6f);
            break;
        }
        default: { // small rounded lips
            const Rgb lip{0.52f, 0.22f, 0.38f};
            detail::fill_ellipse(im, mcx, mcy, mw * 0.7f, mh * 0.9f, lip, 0.25f);
            detail::fill_ellipse(im, mcx, mcy, mw * 0.66f, 0.005f * R, Rgb{0.28f, 0.10f, 0.20f}, 0.6f);
            break;
        }
    }
    im.clamp01();

    // ---- 68 landmarks consistent with the drawn geometry ----
    auto& lx = face.landmarks.x;
    auto& ly = face.landmarks.y;
    lx.resize(68);
    ly.resize(68);
    auto set = [&](int one_based, float x, float y) {
        lx[static_cast<std::size_t>(one_based - 1)] = x;
        ly[static_cast<std::size_t>(one_based - 1)] = y;
    };
    constexpr float pi = std::numbers::pi_v<float>;
    // Jaw 1..17 along the lower face oval (left ear -> chin -> right ear).
    for (int i = 0; i < 17; ++i) {
        const float a = pi - pi * static_cast<float>(i) / 16.0f;
        set(1 + i, fcx + frx * std::cos(a), fcy + fry * std::sin(a));
    }
    // Brows 18..22 (left), 23..27 (right).
    for (int i = 0; i < 5; ++i) {
        const float t = static_cast<float>(i) / 4.0f; // 0..1
        const float bx = -erx * 1.15f + t * 2.0f * erx * 1.15f;
        const float arch = -0.012f * R * std::sin(pi * t);
        set(18 + i, lex + bx, eyy - 0.085f * R + arch);
        set(23 + i, rex + bx, eyy - 0.085f * R + arch);
    }
    // Nose 28..31 bridge, 32..36 base.
    for (int i = 0; i < 4; ++i)
        set(28 + i, fcx, ntop + (nbot - ntop) * (static_cast<float>(i) / 3.0f) * 0.82f);
    for (int i = 0; i < 5; ++i) {
        const float t = static_cast<float>(i) / 4.0f - 0.5f;
        set(32 + i, fcx + t * 2.0f * nw * 0.9f, nbot + 0.004f * R);
    }
    // Eyes 37..42 (left), 43..48 (right): 6 contour points on each ellipse.
    const std::array<float, 6> eye_angles = {pi, 2.0f * pi / 3.0f, pi / 3.0f, 0.0f, -pi / 3.0f,
                                             -2.0f * pi / 3.0f};
    for (int i = 0; i < 6; ++i) {
        const float a = eye_angles[static_cast<std::size_t>(i)];
        set(37 + i, lex + erx * std::cos(a), eyy - ery * std::sin(a));
        set(43 + i, rex + erx * std::cos(a), eyy - ery * std::sin(a));
    }
    // Mouth 49..60 outer (12 points), 61..68 inner (8 points).
    for (int i = 0; i < 12; ++i) {
        const float a = pi - 2.0f * pi * static_cast<float>(i) / 12.0f;
        set(49 + i, mcx + mw * std::cos(a), mcy + mh * std::sin(a));
    }
    for (int i = 0; i < 8; ++i) {
        const float a = pi - 2.0f * pi * static_cast<float>(i) / 8.0f;
        set(61 + i, mcx + mw * 0.6f * std::cos(a), mcy + mh * 0.5f * std::sin(a));
    }
    return face;
}

/// Writes `count` faces as face_NNNN.ppm plus face_NNNN.txt landmark files.
inline void write_toy_dataset(const std::string& dir, int count, std::uint64_t seed,
                              int resolution) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (int i = 0; i < count; ++i) {
        const ToyFace f = make_toy_face(seed, i, resolution);
        char name[32];
        std::snprintf(name, sizeof(name), "face_%04d", i);
        save_ppm((fs::path(dir) / (std::string(name) + ".ppm")).string(), f.image);
        save_landmarks((fs::path(dir) / (std::string(name) + ".txt")).string(), f.landmarks);
    }
}

} // namespace dfd
