#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dfd/errors.hpp"
#include "dfd/image.hpp"
#include "dfd/motion_bank_data.hpp"
#include "dfd/rng.hpp"
#include "dfd/serialize.hpp"
#include "dfd/tensor.hpp"

namespace dfd {

// ---------------------------------------------------------------------------
// Blur kernels
// ---------------------------------------------------------------------------

struct BlurKernel {
    enum class Kind { gaussian, motion };
    Kind kind = Kind::gaussian;
    double gaussian_sigma = 0.0; // set when kind == gaussian
    int motion_index = -1;       // set when kind == motion
    Tensor taps;                 // 2-D, odd extent, non-negative, unit sum

    int size() const { return static_cast<int>(taps.dim(0)); }
};

inline BlurKernel delta_kernel() {
    BlurKernel k;
    k.kind = BlurKernel::Kind::gaussian;
    k.gaussian_sigma = 0.0;
    k.taps = Tensor({1, 1});
    k.taps[0] = 1.0f;
    return k;
}

inline BlurKernel gaussian_kernel(double sigma, int size) {
    if (sigma <= 0.0) throw parameter_error("gaussian_kernel: sigma must be positive");
    if (size < 1 || size % 2 == 0) throw parameter_error("gaussian_kernel: size must be odd");
    BlurKernel k;
    k.kind = BlurKernel::Kind::gaussian;
    k.gaussian_sigma = sigma;
    if (sigma < 1e-4) { // below a meaningful width the discretization is a delta
        k.taps = Tensor::zeros({size, size});
        k.taps[static_cast<std::int64_t>(size / 2) * size + size / 2] = 1.0f;
        return k;
    }
    k.taps = Tensor({size, size});
    const int c = size / 2;
    double sum = 0.0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dy = y - c, dx = x - c;
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            k.taps[static_cast<std::int64_t>(y) * size + x] = static_cast<float>(v);
            sum += v;
        }
    for (auto& v : k.taps.data) v = static_cast<float>(v / sum);
    return k;
}

inline int gaussian_auto_size(double sigma) {
    int s = 2 * static_cast<int>(std::ceil(3.0 * sigma)) + 1;
    return std::max(s, 3);
}

// ---------------------------------------------------------------------------
// Motion kernels: procedural random-walk trajectory, Catmull-Rom smoothed,
// rasterized with bilinear anti-aliasing. Deterministic per (index, seed).
// ---------------------------------------------------------------------------

namespace detail {
inline void catmull_rom(const std::vector<double>& px, const std::vector<double>& py,
                        int samples_per_seg, std::vector<double>& ox, std::vector<double>& oy) {
    const int n = static_cast<int>(px.size());
    if (n == 1) {
        ox = px;
        oy = py;
        return;
    }
    auto at = [&](int i) {
        i = std::clamp(i, 0, n - 1);
        return std::pair<double, double>(px[static_cast<std::size_t>(i)], py[static_cast<std::size_t>(i)]);
    };
    for (int seg = 0; seg + 1 < n; ++seg) {
        auto [x0, y0] = at(seg - 1);
        auto [x1, y1] = at(seg);
        auto [x2, y2] = at(seg + 1);
        auto [x3, y3] = at(seg + 2);
        for (int s = 0; s < samples_per_seg; ++s) {
            const double t = static_cast<double>(s) / samples_per_seg;
            const double t2 = t * t, t3 = t2 * t;
            const double b0 = -0.5 * t3 + t2 - 0.5 * t;
            const double b1 = 1.5 * t3 - 2.5 * t2 + 1.0;
            const double b2 = -1.5 * t3 + 2.0 * t2 + 0.5 * t;
            const double b3 = 0.5 * t3 - 0.5 * t2;
            ox.push_back(b0 * x0 + b1 * x1 + b2 * x2 + b3 * x3);
            oy.push_back(b0 * y0 + b1 * y1 + b2 * y2 + b3 * y3);
        }
    }
    ox.push_back(px.back());
    oy.push_back(py.back());
}
} // namespace detail

inline BlurKernel motion_kernel(int index, std::uint64_t rng_seed) {
    if (index < 0 || index > 31) throw parameter_error("motion_kernel: index out of [0,31]");
    Rng rng(derive_seed(rng_seed, static_cast<std::uint64_t>(index) + 1));

    // Random-walk trajectory; index steers the walk length so the bank spans
    // short to long streaks. index 0 is a single point (delta).
    const int steps = index;
    std::vector<double> px{0.0}, py{0.0};
    double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double step_len = 0.55;
    for (int i = 0; i < steps; ++i) {
        theta += 0.45 * rng.normal();
        px.push_back(px.back() + step_len * std::cos(theta));
        py.push_back(py.back() + step_len * std::sin(theta));
    }

    std::vector<double> sx, sy;
    detail::catmull_rom(px, py, 8, sx, sy);

    // Center on the centroid, then choose an odd extent that covers the curve.
    double cx = 0.0, cy = 0.0;
    for (std::size_t i = 0; i < sx.size(); ++i) {
        cx += sx[i];
        cy += sy[i];
    }
    cx /= static_cast<double>(sx.size());
    cy /= static_cast<double>(sy.size());
    double ext = 0.0;
    for (std::size_t i = 0; i < sx.size(); ++i) {
        sx[i] -= cx;
        sy[i] -= cy;
        ext = std::max(ext, std::max(std::fabs(sx[i]), std::fabs(sy[i])));
    }
    const int half = static_cast<int>(std::ceil(ext)) + 1;
    const int size = std::min(2 * half + 1, 25);
    const int c = size / 2;

    BlurKernel k;
    k.kind = BlurKernel::Kind::motion;
    k.motion_index = index;
    k.taps = Tensor::zeros({size, size});
    const float w_each = 1.0f / static_cast<float>(sx.size());
    for (std::size_t i = 0; i < sx.size(); ++i) {
        const double fx = std::clamp(sx[i] + c, 0.0, static_cast<double>(size - 1) - 1e-9);
        const double fy = std::clamp(sy[i] + c, 0.0, static_cast<double>(size - 1) - 1e-9);
        const int x0 = static_cast<int>(std::floor(fx));
        const int y0 = static_cast<int>(std::floor(fy));
        const double ax = fx - x0, ay = fy - y0;
        auto splat = [&](int y, int x, double w) {
            if (y >= 0 && y < size && x >= 0 && x < size)
                k.taps[static_cast<std::int64_t>(y) * size + x] += static_cast<float>(w) * w_each;
        };
        splat(y0, x0, (1 - ax) * (1 - ay));
        splat(y0, x0 + 1, ax * (1 - ay));
        splat(y0 + 1, x0, (1 - ax) * ay);
        splat(y0 + 1, x0 + 1, ax * ay);
    }
    double sum = 0.0;
    for (float v : k.taps.data) sum += v;
    for (auto& v : k.taps.data) v = static_cast<float>(v / sum);
    return k;
}

/// Seed that froze the committed 32-kernel bank.
inline constexpr std::uint64_t kMotionBankSeed = 0x6d6f74696f6e3031ull;

inline std::vector<BlurKernel> make_motion_bank(std::uint64_t seed = kMotionBankSeed) {
    std::vector<BlurKernel> bank;
    bank.reserve(32);
    for (int i = 0; i < 32; ++i) bank.push_back(motion_kernel(i, seed));
    return bank;
}

inline void save_motion_bank(const std::string& path, const std::vector<BlurKernel>& bank) {
    BlobArchive a;
    a.text = "format_version=1\nkind=motion_bank\ncount=" + std::to_string(bank.size()) + "\n";
    for (std::size_t i = 0; i < bank.size(); ++i) a.add("motion_" + std::to_string(i), bank[i].taps);
    write_archive(path, a);
}

inline std::vector<BlurKernel> load_motion_bank(const std::string& path) {
    BlobArchive a = read_archive(path);
    std::vector<BlurKernel> bank;
    for (int i = 0; i < 32; ++i) {
        const std::string name = "motion_" + std::to_string(i);
        if (!a.has(name)) throw corruption_error("motion bank: missing kernel " + name);
        BlurKernel k;
        k.kind = BlurKernel::Kind::motion;
        k.motion_index = i;
        k.taps = a.get(name);
        double sum = 0.0;
        for (float v : k.taps.data) {
            if (v < 0.0f) throw corruption_error("motion bank: negative tap in " + name);
            sum += v;
        }
        if (std::fabs(sum - 1.0) > 1e-6) throw corruption_error("motion bank: kernel " + name + " not unit-sum");
        bank.push_back(std::move(k));
    }
    return bank;
}

/// Canonical shared bank, decoded from compiled-in constants so that every
/// build — and the committed data/motion_kernels_v1.bin copy — agrees bitwise
/// no matter the compiler flags. make_motion_bank() is the generator these
/// constants were frozen from and reproduces them to within float rounding.
inline const std::vector<BlurKernel>& motion_bank() {
    static const std::vector<BlurKernel> bank = [] {
        std::vector<BlurKernel> b;
        b.reserve(detail::kMotionBankCount);
        std::int64_t offset = 0;
        for (int i = 0; i < detail::kMotionBankCount; ++i) {
            BlurKernel k;
            k.kind = BlurKernel::Kind::motion;
            k.motion_index = i;
            const int n = detail::kMotionBankSizes[i];
            k.taps = Tensor({n, n});
            for (std::int64_t j = 0; j < static_cast<std::int64_t>(n) * n; ++j)
                k.taps[j] = detail::kMotionBankTaps[offset + j];
            offset += static_cast<std::int64_t>(n) * n;
            b.push_back(std::move(k));
        }
        return b;
    }();
    return bank;
}

// ---------------------------------------------------------------------------
// Degradation parameters and sampling
// ---------------------------------------------------------------------------

struct DegradationParams {
    BlurKernel kernel;
    double r = 1.0;      // downsample factor, [1,8]
    double sigma = 0.0;  // noise std on the 0-255 scale, [0,15]
    int q = 80;          // JPEG quality, [40,80]
    bool jpeg_bypass = false; // test hook only

    void validate() const {
        if (r < 1.0 || r > 8.0) throw parameter_error("degradation: r out of [1,8]");
        if (sigma < 0.0 || sigma > 15.0) throw parameter_error("degradation: sigma out of [0,15]");
        if (!jpeg_bypass && (q < 40 || q > 80)) throw parameter_error("degradation: q out of [40,80]");
        if (kernel.taps.rank() != 2 || kernel.size() % 2 == 0)
            throw parameter_error("degradation: kernel taps must be odd 2-D");
    }
};

/// Draw order is fixed: kind, kernel parameter, r, sigma, q.
inline DegradationParams sample_degradation(Rng& rng,
                                            const std::vector<BlurKernel>& bank = motion_bank()) {
    DegradationParams p;
    if (rng.uniform_int(0, 1) == 0) {
        const double rho = rng.grid(1.0, 5.0, 0.1);
        p.kernel = gaussian_kernel(rho, gaussian_auto_size(rho));
    } else {
        p.kernel = bank[static_cast<std::size_t>(rng.uniform_int(0, 31))];
    }
    p.r = rng.grid(1.0, 8.0, 0.1);
    p.sigma = rng.grid(0.0, 15.0, 1.0);
    p.q = rng.uniform_int(40, 80);
    return p;
}

inline KvPairs degradation_to_kv(const DegradationParams& p) {
    KvPairs kv;
    kv.emplace_back("kernel_kind", p.kernel.kind == BlurKernel::Kind::gaussian ? "gaussian" : "motion");
    if (p.kernel.kind == BlurKernel::Kind::gaussian)
        kv.emplace_back("kernel_sigma", std::to_string(p.kernel.gaussian_sigma));
    else
        kv.emplace_back("kernel_index", std::to_string(p.kernel.motion_index));
    kv.emplace_back("r", std::to_string(p.r));
    kv.emplace_back("sigma", std::to_string(p.sigma));
    kv.emplace_back("q", std::to_string(p.q));
    return kv;
}

inline DegradationParams degradation_from_kv(const KvPairs& kv,
                                             const std::vector<BlurKernel>& bank = motion_bank()) {
    auto m = kv_map(kv);
    DegradationParams p;
    const std::string kind = m.at("kernel_kind");
    if (kind == "gaussian") {
        const double rho = std::stod(m.at("kernel_sigma"));
        p.kernel = rho < 1e-4 ? delta_kernel() : gaussian_kernel(rho, gaussian_auto_size(rho));
    } else if (kind == "motion") {
        p.kernel = bank.at(static_cast<std::size_t>(std::stoi(m.at("kernel_index"))));
    } else {
        throw data_error("degradation manifest: unknown kernel_kind " + kind);
    }
    p.r = std::stod(m.at("r"));
    p.sigma = std::stod(m.at("sigma"));
    p.q = std::stoi(m.at("q"));
    return p;
}

// ---------------------------------------------------------------------------
// Pipeline: blur -> downsample -> noise -> JPEG
// ---------------------------------------------------------------------------

namespace detail {
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}
} // namespace detail

/// Channel-wise 2-D convolution with symmetric reflect padding.
inline Image convolve_reflect(const Image& im, const BlurKernel& k) {
    const int s = k.size();
    const int c0 = s / 2;
    Image out(im.width, im.height);
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x) {
            double acc[3] = {0.0, 0.0, 0.0};
            for (int ky = 0; ky < s; ++ky) {
                const int iy = detail::reflect_index(y + ky - c0, im.height);
                for (int kx = 0; kx < s; ++kx) {
                    const int ix = detail::reflect_index(x + kx - c0, im.width);
                    const float w = k.taps[static_cast<std::int64_t>(ky) * s + kx];
                    if (w == 0.0f) continue;
                    for (int ch = 0; ch < 3; ++ch) acc[ch] += static_cast<double>(w) * im.at(iy, ix, ch);
                }
            }
            for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = static_cast<float>(acc[ch]);
        }
    // A pure delta kernel must be a bitwise identity.
    if (s == 1 || (k.taps.numel() == s * s && [&] {
            for (std::int64_t i = 0; i < k.taps.numel(); ++i) {
                const bool center = i == (static_cast<std::int64_t>(c0) * s + c0);
                if (center && k.taps[i] != 1.0f) return false;
                if (!center && k.taps[i] != 0.0f) return false;
            }
            return true;
        }()))
        return im;
    return out;
}

inline Image apply_degradation(const Image& im, const DegradationParams& p,
                               std::uint64_t noise_seed) {
    p.validate();
    Image x = convolve_reflect(im, p.kernel);

    const int oh = std::max(1, static_cast<int>(std::lround(im.height / p.r)));
    const int ow = std::max(1, static_cast<int>(std::lround(im.width / p.r)));
    if (oh != x.height || ow != x.width) {
        x = resize_image(x, ow, oh, /*antialias=*/true);
        x.clamp01();
    }

    if (p.sigma > 0.0) {
        Rng nrng(noise_seed);
        const float ns = static_cast<float>(p.sigma / 255.0);
        for (auto& v : x.rgb) v += ns * nrng.normalf();
        x.clamp01();
    }

    if (!p.jpeg_bypass) x = jpeg_roundtrip(x, p.q);
    return x;
}

} // namespace dfd
