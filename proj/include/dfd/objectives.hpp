#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dfd/autograd.hpp"
#include "dfd/features.hpp"
#include "dfd/nn.hpp"
#include "dfd/tensor.hpp"

namespace dfd {

// ---------------------------------------------------------------------------
// Loss weights
// ---------------------------------------------------------------------------

struct LossWeights {
    float l2 = 100.0f;
    std::array<float, 4> perceptual = {0.5f, 1.0f, 2.0f, 4.0f};   // m = 1..4
    std::array<float, 4> adversarial = {4.0f, 2.0f, 1.0f, 1.0f};  // r = 1,2,4,8
    enum class PixelReduction { mean, sum };
    PixelReduction pixel_reduction = PixelReduction::mean;

    void validate() const {
        if (l2 < 0) throw parameter_error("loss weights: l2 must be >= 0");
        for (float v : perceptual)
            if (v < 0) throw parameter_error("loss weights: perceptual must be >= 0");
        for (float v : adversarial)
            if (v < 0) throw parameter_error("loss weights: adversarial must be >= 0");
    }
};

inline constexpr std::array<int, 4> kDiscriminatorScales = {1, 2, 4, 8};

// ---------------------------------------------------------------------------
// Reconstruction: pixel term + per-scale perceptual terms through the frozen
// encoder. Zero exactly when restored == target.
// ---------------------------------------------------------------------------

inline Var reconstruction_loss(const Var& restored, const Tensor& target, const Encoder& psi,
                               const LossWeights& w) {
    require_same_shape(restored->value, target, "reconstruction_loss");
    Var pixel = w.pixel_reduction == LossWeights::PixelReduction::mean
                    ? mse_against(restored, target)
                    : sse_against(restored, target);
    Var loss = mul_scalar(pixel, w.l2);

    bool any_perceptual = false;
    for (float v : w.perceptual) any_perceptual = any_perceptual || v > 0.0f;
    if (any_perceptual) {
        const auto psi_restored = psi.extract_graph(restored);
        const auto psi_target = psi.extract(target);
        for (int m = 0; m < 4; ++m) {
            const float lam = w.perceptual[static_cast<std::size_t>(m)];
            if (lam <= 0.0f) continue;
            // lambda/(C*H*W) * ||psi_m(restored) - psi_m(target)||^2 == lambda * MSE
            loss = add(loss, mul_scalar(mse_against(psi_restored[static_cast<std::size_t>(m)],
                                                    psi_target[static_cast<std::size_t>(m)].data),
                                        lam));
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Multi-scale spectral-normalized discriminators
// ---------------------------------------------------------------------------

/// Four stride-2 SN conv blocks with LeakyReLU, then an SN conv to a 1-channel
/// patch map. Scores are patch-level; callers average.
struct Discriminator {
    int scale_r = 1;
    std::vector<SNConv2d> blocks;
    SNConv2d out_conv;

    static Discriminator make(int scale_r, int base_width, Rng& rng, const std::string& name) {
        Discriminator d;
        d.scale_r = scale_r;
        int in_c = 3;
        int width = base_width;
        for (int i = 0; i < 4; ++i) {
            d.blocks.push_back(SNConv2d::make(in_c, width, 3, 2, rng, name + ".b" + std::to_string(i)));
            in_c = width;
            width = std::min(width * 2, 8 * base_width);
        }
        d.out_conv = SNConv2d::make(in_c, 1, 3, 1, rng, name + ".out");
        return d;
    }

    /// Patch map (1,h,w). `update_u` refreshes power-iteration state and must
    /// be set only during discriminator training forwards.
    Var forward(const Var& x, bool update_u) {
        Var h = x;
        for (auto& b : blocks) h = leaky_relu(b(h, update_u), 0.2f);
        return out_conv(h, update_u);
    }

    void collect(std::vector<Var>& out) const {
        for (const auto& b : blocks) b.collect(out);
        out_conv.collect(out);
    }
};

struct DiscriminatorBank {
    std::array<Discriminator, 4> d; // r = 1,2,4,8

    static DiscriminatorBank make(int base_width, std::uint64_t seed) {
        DiscriminatorBank bank;
        Rng rng(derive_seed(seed, 0xd15cull));
        for (std::size_t i = 0; i < 4; ++i)
            bank.d[i] = Discriminator::make(kDiscriminatorScales[i], base_width, rng,
                                            "disc.r" + std::to_string(kDiscriminatorScales[i]));
        return bank;
    }

    std::vector<Var> trainable() const {
        std::vector<Var> out;
        for (const auto& disc : d) disc.collect(out);
        return out;
    }
};

namespace detail {
inline Tensor pyramid_level(const Tensor& img, int r) {
    if (r == 1) return img;
    const int oh = static_cast<int>(img.dim(1)) / r;
    const int ow = static_cast<int>(img.dim(2)) / r;
    return resize_bicubic(img, oh, ow, /*antialias=*/true);
}

inline Var pyramid_level_op(const Var& img, int r) {
    if (r == 1) return img;
    const int oh = static_cast<int>(img->value.dim(1)) / r;
    const int ow = static_cast<int>(img->value.dim(2)) / r;
    return resize_bicubic_op(img, oh, ow, /*antialias=*/true);
}

inline Var hinge_real(const Var& d_map) { // mean(max(0, 1 - D))
    return mean_all(relu(add_scalar(mul_scalar(d_map, -1.0f), 1.0f)));
}
inline Var hinge_fake(const Var& d_map) { // mean(max(0, 1 + D))
    return mean_all(relu(add_scalar(d_map, 1.0f)));
}
} // namespace detail

/// Hinge loss over r in {1,2,4,8}:
/// sum_r E[max(0, 1 - D_r(real))] + E[max(0, 1 + D_r(fake))].
/// `fake` must already be detached from the generator.
inline Var discriminator_loss(DiscriminatorBank& bank, const Tensor& real, const Tensor& fake,
                              bool update_u = true) {
    require_same_shape(real, fake, "discriminator_loss");
    Var total;
    for (std::size_t i = 0; i < 4; ++i) {
        const int r = kDiscriminatorScales[i];
        const Var d_real = bank.d[i].forward(constant(detail::pyramid_level(real, r)), update_u);
        const Var d_fake = bank.d[i].forward(constant(detail::pyramid_level(fake, r)), update_u);
        const Var term = add(detail::hinge_real(d_real), detail::hinge_fake(d_fake));
        total = total ? add(total, term) : term;
    }
    return total;
}

/// Generator side: -sum_r lambda_{a,r} * E[D_r(fake)], discriminators frozen.
inline Var generator_adv_loss(DiscriminatorBank& bank, const Var& fake, const LossWeights& w) {
    Var total;
    for (std::size_t i = 0; i < 4; ++i) {
        const int r = kDiscriminatorScales[i];
        const float lam = w.adversarial[i];
        if (lam <= 0.0f) continue;
        const Var d_fake = bank.d[i].forward(detail::pyramid_level_op(fake, r), /*update_u=*/false);
        const Var term = mul_scalar(mean_all(d_fake), -lam);
        total = total ? add(total, term) : term;
    }
    if (!total) total = constant(Tensor::full({1}, 0.0f));
    return total;
}

inline Var total_loss(const Var& rec, const Var& adv_g) { return add(rec, adv_g); }

} // namespace dfd
