#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include "dfd/objectives.hpp"
#include "dfd/synth.hpp"
#include "gradcheck.hpp"

using namespace dfd;

namespace {

Tensor random_tensor(std::vector<std::int64_t> dims, std::uint64_t seed, float scale = 1.0f) {
    Tensor t(std::move(dims));
    Rng r(seed);
    t.fill_normal(r, scale);
    return t;
}

/// Largest singular value by direct decomposition, in double.
double direct_sigma(const Tensor& w2d) {
    Eigen::MatrixXd m(w2d.dim(0), w2d.dim(1));
    for (std::int64_t r = 0; r < w2d.dim(0); ++r)
        for (std::int64_t c = 0; c < w2d.dim(1); ++c)
            m(r, c) = w2d[r * w2d.dim(1) + c];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    return svd.singularValues()(0);
}

void zero_all(DiscriminatorBank& bank) {
    for (const Var& v : bank.trainable()) std::fill(v->value.data.begin(), v->value.data.end(), 0.0f);
}

double mean_hinge_real(const Tensor& d) {
    double s = 0.0;
    for (float v : d.data) s += std::max(0.0, 1.0 - static_cast<double>(v));
    return s / static_cast<double>(d.numel());
}

double mean_hinge_fake(const Tensor& d) {
    double s = 0.0;
    for (float v : d.data) s += std::max(0.0, 1.0 + static_cast<double>(v));
    return s / static_cast<double>(d.numel());
}

} // namespace

TEST_CASE("reconstruction: identical images give exactly zero") {
    const Encoder psi = Encoder::random_toy(3, 64, {8, 12, 16, 20});
    const Tensor img = image_to_tensor(make_toy_face(4, 0, 64).image);
    const LossWeights w;
    const Var loss = reconstruction_loss(constant(img), img, psi, w);
    REQUIRE(loss->value.numel() == 1);
    REQUIRE(loss->value[0] == 0.0f);
}

TEST_CASE("reconstruction: pixel-only loss of a constant offset has closed form") {
    const Encoder psi = Encoder::random_toy(5, 64, {8, 12, 16, 20});
    const Tensor target = image_to_tensor(make_toy_face(6, 1, 64).image);
    Tensor shifted = target;
    for (auto& v : shifted.data) v += 0.25f;
    LossWeights w;
    w.perceptual = {0.0f, 0.0f, 0.0f, 0.0f};

    // Mean reduction: l2 * delta^2.
    const Var mean_loss = reconstruction_loss(constant(shifted), target, psi, w);
    REQUIRE(mean_loss->value[0] == Catch::Approx(100.0 * 0.0625).epsilon(1e-5));

    // Sum reduction scales with the element count.
    w.pixel_reduction = LossWeights::PixelReduction::sum;
    const Var sum_loss = reconstruction_loss(constant(shifted), target, psi, w);
    REQUIRE(sum_loss->value[0] ==
            Catch::Approx(100.0 * 0.0625 * static_cast<double>(target.numel())).epsilon(1e-5));
}

TEST_CASE("reconstruction: default weights and validation") {
    const LossWeights w;
    REQUIRE(w.l2 == 100.0f);
    REQUIRE(w.perceptual == std::array<float, 4>{0.5f, 1.0f, 2.0f, 4.0f});
    REQUIRE(w.adversarial == std::array<float, 4>{4.0f, 2.0f, 1.0f, 1.0f});
    REQUIRE(w.pixel_reduction == LossWeights::PixelReduction::mean);
    LossWeights bad = w;
    bad.l2 = -1.0f;
    REQUIRE_THROWS_AS(bad.validate(), parameter_error);
    bad = w;
    bad.perceptual[2] = -0.5f;
    REQUIRE_THROWS_AS(bad.validate(), parameter_error);
}

TEST_CASE("reconstruction: full loss matches a hand-rolled oracle") {
    const Encoder psi = Encoder::random_toy(7, 64, {8, 12, 16, 20});
    const Tensor target = image_to_tensor(make_toy_face(8, 2, 64).image);
    Tensor restored = image_to_tensor(make_toy_face(8, 3, 64).image);
    const LossWeights w;

    double expect = 0.0;
    {
        double s = 0.0;
        for (std::int64_t i = 0; i < target.numel(); ++i) {
            const double d = static_cast<double>(restored[i]) - target[i];
            s += d * d;
        }
        expect += static_cast<double>(w.l2) * s / static_cast<double>(target.numel());
    }
    const auto fa = psi.extract(restored);
    const auto fb = psi.extract(target);
    for (int m = 0; m < 4; ++m) {
        double s = 0.0;
        const Tensor& a = fa[static_cast<std::size_t>(m)].data;
        const Tensor& b = fb[static_cast<std::size_t>(m)].data;
        for (std::int64_t i = 0; i < a.numel(); ++i) {
            const double d = static_cast<double>(a[i]) - b[i];
            s += d * d;
        }
        expect += static_cast<double>(w.perceptual[static_cast<std::size_t>(m)]) * s /
                  static_cast<double>(a.numel());
    }

    const Var loss = reconstruction_loss(constant(restored), target, psi, w);
    REQUIRE(loss->value[0] == Catch::Approx(expect).epsilon(1e-4));

    Tensor wrong({3, 32, 32});
    REQUIRE_THROWS_AS(reconstruction_loss(constant(wrong), target, psi, w), shape_error);
}

TEST_CASE("reconstruction: gradients reach the restored image") {
    const Encoder psi = Encoder::random_toy(9, 64, {8, 12, 16, 20});
    const Tensor target = image_to_tensor(make_toy_face(10, 0, 64).image);
    const Var restored = make_param(image_to_tensor(make_toy_face(10, 1, 64).image), "img");
    const LossWeights w;
    const Var loss = reconstruction_loss(restored, target, psi, w);
    backward(loss);
    REQUIRE(restored->grad.numel() == target.numel());
    bool any = false;
    for (float g : restored->grad.data) {
        REQUIRE(std::isfinite(g));
        any = any || g != 0.0f;
    }
    REQUIRE(any);
}

TEST_CASE("spectral_normalize: scaled identity converges to unit norm") {
    Tensor w2d({8, 8});
    for (int i = 0; i < 8; ++i) w2d[i * 8 + i] = 3.0f;
    Tensor u({8});
    Rng rng(11);
    u.fill_normal(rng);
    const auto [wn, sigma] = spectral_normalize(w2d, u, 50);
    REQUIRE(sigma == Catch::Approx(3.0).margin(1e-3));
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            REQUIRE(wn[i * 8 + j] == Catch::Approx(i == j ? 1.0 : 0.0).margin(1e-3));
}

TEST_CASE("spectral_normalize: estimate matches a direct decomposition") {
    for (std::uint64_t seed : {22ull, 25ull, 27ull, 29ull}) {
        const Tensor w2d = random_tensor({16, 16}, seed);
        // Power iteration needs a spectral gap to converge in 50 cold-start
        // steps; these seeds keep sigma_2/sigma_1 below 0.95, asserted here so
        // a seed change cannot silently move the test out of that envelope.
        {
            Eigen::MatrixXd m(16, 16);
            for (int r = 0; r < 16; ++r)
                for (int c = 0; c < 16; ++c) m(r, c) = w2d[r * 16 + c];
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
            REQUIRE(svd.singularValues()(1) / svd.singularValues()(0) < 0.95);
        }
        Tensor u({16});
        Rng rng(seed + 100);
        u.fill_normal(rng);
        const auto [wn, sigma] = spectral_normalize(w2d, u, 50);
        const double direct = direct_sigma(w2d);
        REQUIRE(sigma == Catch::Approx(direct).margin(1e-3));
        // The normalized matrix has unit spectral norm.
        REQUIRE(direct_sigma(wn) == Catch::Approx(1.0).margin(1e-2));
    }
}

TEST_CASE("spectral_normalize: zero matrix stays zero") {
    Tensor w2d({4, 6});
    Tensor u({4});
    Rng rng(30);
    u.fill_normal(rng);
    const auto [wn, sigma] = spectral_normalize(w2d, u, 5);
    REQUIRE(sigma > 0.0);
    for (float v : wn.data) REQUIRE(v == 0.0f);
    REQUIRE_THROWS_AS(spectral_normalize(random_tensor({4, 4, 4}, 1), u, 1), shape_error);
}

TEST_CASE("hinge terms: satisfied margins give zero loss") {
    // Real patches scored at +1 and fake patches at -1 sit exactly on the
    // hinge margin, so both terms vanish.
    const Var d_real = constant(Tensor::full({1, 2, 2}, 1.0f));
    const Var d_fake = constant(Tensor::full({1, 2, 2}, -1.0f));
    REQUIRE(detail::hinge_real(d_real)->value[0] == 0.0f);
    REQUIRE(detail::hinge_fake(d_fake)->value[0] == 0.0f);
    // An undecided discriminator pays 1 per side.
    const Var d_zero = constant(Tensor({1, 2, 2}));
    REQUIRE(detail::hinge_real(d_zero)->value[0] == 1.0f);
    REQUIRE(detail::hinge_fake(d_zero)->value[0] == 1.0f);
}

TEST_CASE("discriminator_loss: all-zero bank scores 2 per scale") {
    DiscriminatorBank bank = DiscriminatorBank::make(8, 40);
    zero_all(bank);
    const Tensor real = image_to_tensor(make_toy_face(41, 0, 32).image);
    const Tensor fake = image_to_tensor(make_toy_face(41, 1, 32).image);
    const Var loss = discriminator_loss(bank, real, fake, /*update_u=*/false);
    REQUIRE(loss->value[0] == 8.0f);
}

TEST_CASE("discriminator_loss: matches a per-scale loop oracle") {
    DiscriminatorBank bank = DiscriminatorBank::make(8, 50);
    const Tensor real = image_to_tensor(make_toy_face(51, 0, 32).image);
    const Tensor fake = image_to_tensor(make_toy_face(51, 1, 32).image);
    double expect = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        const int r = kDiscriminatorScales[i];
        const Var d_real = bank.d[i].forward(constant(detail::pyramid_level(real, r)), false);
        const Var d_fake = bank.d[i].forward(constant(detail::pyramid_level(fake, r)), false);
        expect += mean_hinge_real(d_real->value) + mean_hinge_fake(d_fake->value);
    }
    const Var loss = discriminator_loss(bank, real, fake, /*update_u=*/false);
    REQUIRE(loss->value[0] == Catch::Approx(expect).margin(1e-6));
    Tensor wrong({3, 16, 16});
    REQUIRE_THROWS_AS(discriminator_loss(bank, real, wrong, false), shape_error);
}

TEST_CASE("discriminator: frozen evaluation is bitwise deterministic") {
    DiscriminatorBank bank = DiscriminatorBank::make(8, 60);
    const Tensor real = image_to_tensor(make_toy_face(61, 0, 32).image);
    const Tensor fake = image_to_tensor(make_toy_face(61, 1, 32).image);
    const Var a = discriminator_loss(bank, real, fake, /*update_u=*/false);
    const Var b = discriminator_loss(bank, real, fake, /*update_u=*/false);
    REQUIRE(a->value[0] == b->value[0]);
    // Power-iteration state moves only when requested.
    const Tensor u_before = bank.d[0].blocks[0].u;
    (void)discriminator_loss(bank, real, fake, /*update_u=*/false);
    REQUIRE(bank.d[0].blocks[0].u.data == u_before.data);
    (void)discriminator_loss(bank, real, fake, /*update_u=*/true);
    REQUIRE(bank.d[0].blocks[0].u.data != u_before.data);
    // Freshly built banks with the same seed agree bitwise.
    DiscriminatorBank twin = DiscriminatorBank::make(8, 60);
    const Var c = discriminator_loss(twin, real, fake, /*update_u=*/false);
    REQUIRE(a->value[0] == c->value[0]);
}

TEST_CASE("generator_adv_loss: constant discriminators give closed forms") {
    DiscriminatorBank bank = DiscriminatorBank::make(8, 70);
    const Var fake = constant(image_to_tensor(make_toy_face(71, 0, 32).image));
    const LossWeights w;
    zero_all(bank);
    REQUIRE(generator_adv_loss(bank, fake, w)->value[0] == 0.0f);
    // Bias the patch output to a constant +1: loss = -(4+2+1+1).
    for (auto& d : bank.d) d.out_conv.b->value[0] = 1.0f;
    REQUIRE(generator_adv_loss(bank, fake, w)->value[0] == -8.0f);
    // All-zero adversarial weights short-circuit to zero.
    LossWeights off;
    off.adversarial = {0.0f, 0.0f, 0.0f, 0.0f};
    REQUIRE(generator_adv_loss(bank, fake, off)->value[0] == 0.0f);
}

TEST_CASE("generator_adv_loss: gradients flow back to the fake image") {
    DiscriminatorBank bank = DiscriminatorBank::make(8, 80);
    const Var fake = make_param(image_to_tensor(make_toy_face(81, 0, 32).image), "fake");
    const LossWeights w;
    const Var loss = generator_adv_loss(bank, fake, w);
    backward(loss);
    bool any = false;
    for (float g : fake->grad.data) {
        REQUIRE(std::isfinite(g));
        any = any || g != 0.0f;
    }
    REQUIRE(any);
}

TEST_CASE("total_loss: adds the two parts") {
    const Var rec = constant(Tensor::full({1}, 3.25f));
    const Var adv = constant(Tensor::full({1}, -1.5f));
    REQUIRE(total_loss(rec, adv)->value[0] == 1.75f);
    const Var zero = constant(Tensor::full({1}, 0.0f));
    REQUIRE(total_loss(rec, zero)->value[0] == rec->value[0]);
}

TEST_CASE("discriminator: normalized layer norms stay near one after training forwards") {
    DiscriminatorBank bank = DiscriminatorBank::make(8, 90);
    const Tensor real = image_to_tensor(make_toy_face(91, 0, 32).image);
    const Tensor fake = image_to_tensor(make_toy_face(91, 1, 32).image);
    for (int it = 0; it < 50; ++it) (void)discriminator_loss(bank, real, fake, /*update_u=*/true);
    for (const auto& disc : bank.d) {
        std::vector<const SNConv2d*> layers;
        for (const auto& blk : disc.blocks) layers.push_back(&blk);
        layers.push_back(&disc.out_conv);
        for (const SNConv2d* c : layers) {
            const std::int64_t oc = c->w->value.dim(0);
            const Tensor w2d = c->w->value.reshaped({oc, c->w->value.numel() / oc});
            const auto [sigma, v] = detail::sn_sigma_fixed_u(w2d, c->u);
            Tensor wn = w2d;
            for (auto& x : wn.data) x = static_cast<float>(x / sigma);
            const double norm = direct_sigma(wn);
            REQUIRE(norm >= 0.99);
            REQUIRE(norm <= 1.01);
        }
    }
}

TEST_CASE("sn conv: gradients match finite differences with frozen u") {
    // Activation-free, so the loss is smooth in w and the sigma-dependence of
    // the normalized weight (including its rank-one correction) is what gets
    // measured.
    Rng rng(95);
    SNConv2d c = SNConv2d::make(3, 4, 3, 2, rng, "snc");
    const Tensor img = image_to_tensor(make_toy_face(96, 0, 16).image);
    const Tensor target = random_tensor({4, 8, 8}, 97, 0.5f);
    const auto report = dfd::test::gradcheck(
        {c.w, c.b},
        [&] { return sse_against(c(constant(img), /*update_u=*/false), target); }, 1e-3, 8);
    INFO(report.first_failure);
    REQUIRE(report.failed == 0);
}

TEST_CASE("discriminator: gradients match finite differences with frozen u") {
    Rng rng(95);
    Discriminator d = Discriminator::make(1, 4, rng, "d");
    // Zero-init biases park flat image regions exactly on the leaky-relu
    // kink, where a centered difference measures the average of both slopes;
    // move every pre-activation off zero first.
    for (auto& blk : d.blocks) blk.b->value.fill_normal(rng, 0.3f);
    d.out_conv.b->value.fill_normal(rng, 0.3f);
    const Tensor img = image_to_tensor(make_toy_face(96, 0, 16).image);
    const Tensor target = random_tensor({1, 1, 1}, 97);
    std::vector<Var> params;
    d.collect(params);
    const auto report = dfd::test::gradcheck(
        params,
        [&] { return sse_against(d.forward(constant(img), /*update_u=*/false), target); }, 1e-3, 5,
        1234, 1e-3);
    INFO(report.first_failure);
    REQUIRE(report.failed == 0);
}
