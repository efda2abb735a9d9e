#include <catch2/catch_amalgamated.hpp>

#include "dfd/dftcore.hpp"
#include "gradcheck.hpp"

using namespace dfd;

namespace {

Tensor random_tensor(std::vector<std::int64_t> dims, std::uint64_t seed, float scale = 1.0f) {
    Tensor t(std::move(dims));
    Rng r(seed);
    t.fill_normal(r, scale);
    return t;
}

ComponentDictionary make_dict(Tensor clusters, int scale = 1,
                              Component c = Component::left_eye) {
    ComponentDictionary d;
    d.scale = scale;
    d.component = c;
    d.clusters = std::move(clusters);
    return d;
}

// Population mean/std per channel recomputed independently in double.
std::pair<std::vector<double>, std::vector<double>> stats_oracle(const Tensor& t) {
    const int c = static_cast<int>(t.dim(0));
    const std::int64_t plane = t.dim(1) * t.dim(2);
    std::vector<double> mean(static_cast<std::size_t>(c)), stdev(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        const float* p = t.ptr() + static_cast<std::int64_t>(ch) * plane;
        double m = 0;
        for (std::int64_t i = 0; i < plane; ++i) m += p[i];
        m /= static_cast<double>(plane);
        double var = 0;
        for (std::int64_t i = 0; i < plane; ++i) var += (p[i] - m) * (p[i] - m);
        var /= static_cast<double>(plane);
        mean[static_cast<std::size_t>(ch)] = m;
        stdev[static_cast<std::size_t>(ch)] = std::sqrt(var);
    }
    return {mean, stdev};
}

} // namespace

TEST_CASE("cadain: renorming a feature against itself is the identity") {
    const Tensor f = random_tensor({4, 6, 6}, 11);
    const Tensor out = cadain(f, f);
    for (std::int64_t i = 0; i < f.numel(); ++i)
        REQUIRE(out[i] == Catch::Approx(f[i]).margin(1e-5));
}

TEST_CASE("cadain: constant cluster collapses to the input's channel means") {
    Tensor cluster({3, 5, 5});
    for (auto& v : cluster.data) v = 7.5f; // zero variance; epsilon path
    const Tensor f = random_tensor({3, 5, 5}, 13);
    const Tensor out = cadain(cluster, f);
    const auto [fm, fsd] = stats_oracle(f);
    for (int ch = 0; ch < 3; ++ch)
        for (std::int64_t i = 0; i < 25; ++i)
            REQUIRE(out[ch * 25 + i] ==
                    Catch::Approx(fm[static_cast<std::size_t>(ch)]).margin(1e-6));
}

TEST_CASE("cadain: output adopts the input's per-channel statistics") {
    const Tensor cluster = random_tensor({4, 7, 7}, 17, 2.0f);
    const Tensor f = random_tensor({4, 7, 7}, 19, 0.7f);
    const Tensor out = cadain(cluster, f);
    const auto [fm, fsd] = stats_oracle(f);
    const auto [om, osd] = stats_oracle(out);
    for (std::size_t ch = 0; ch < 4; ++ch) {
        REQUIRE(om[ch] == Catch::Approx(fm[ch]).margin(1e-4));
        REQUIRE(osd[ch] == Catch::Approx(fsd[ch]).margin(1e-4));
    }
}

TEST_CASE("cadain: shape mismatch is rejected") {
    const Tensor a = random_tensor({2, 4, 4}, 1);
    const Tensor b = random_tensor({2, 5, 5}, 2);
    REQUIRE_THROWS_AS(cadain(a, b), shape_error);
    const Tensor rank2 = random_tensor({4, 4}, 3);
    REQUIRE_THROWS_AS(channel_stats(rank2), shape_error);
}

TEST_CASE("feature_match: a single cluster is always selected") {
    const Tensor f = random_tensor({2, 4, 4}, 23);
    const auto dict = make_dict(random_tensor({1, 2, 4, 4}, 24));
    const MatchResult m = feature_match(f, dict);
    REQUIRE(m.k_star == 0);
    REQUIRE(m.scores.numel() == 1);
    REQUIRE(m.selected.dims == f.dims);
}

TEST_CASE("feature_match: positive multiple of the input wins over orthogonal clusters") {
    // With renorm off the construction is exact: scores are raw inner products.
    const std::int64_t d = 16;
    Tensor f({1, 4, 4});
    for (std::int64_t i = 0; i < d; ++i) f[i] = (i % 2 == 0) ? 1.0f : -1.0f;
    Tensor clusters = Tensor::zeros({3, 1, 4, 4});
    for (std::int64_t i = 0; i < d; ++i) {
        // Cluster 0: <f, c0> = 0.5 - 0.5 = 0 (orthogonal).
        if (i < 2) clusters[0 * d + i] = 0.5f;
        // Cluster 1: a large positive multiple of the input.
        clusters[1 * d + i] = 3.0f * f[i];
        // Cluster 2: all ones; alternating +1/-1 input sums to zero.
        clusters[2 * d + i] = 1.0f;
    }
    const auto dict = make_dict(std::move(clusters));
    const MatchResult m = feature_match(f, dict, MatchMode::inner, /*use_cadain=*/false);
    REQUIRE(m.k_star == 1);
    REQUIRE(m.scores[1] == Catch::Approx(3.0 * 16.0).margin(1e-4));
    REQUIRE(m.scores[0] == Catch::Approx(0.0).margin(1e-5));
    REQUIRE(m.scores[2] == Catch::Approx(0.0).margin(1e-5));
}

TEST_CASE("feature_match: batched scores equal a naive per-cluster loop") {
    const Tensor f = random_tensor({3, 5, 5}, 31);
    const int k = 6;
    const Tensor clusters = random_tensor({k, 3, 5, 5}, 32);
    const auto dict = make_dict(clusters);
    for (const MatchMode mode : {MatchMode::inner, MatchMode::cosine}) {
        const MatchResult m = feature_match(f, dict, mode);
        int best = 0;
        double best_score = -1e300;
        for (int i = 0; i < k; ++i) {
            Tensor cluster({3, 5, 5});
            std::copy(clusters.ptr() + i * f.numel(), clusters.ptr() + (i + 1) * f.numel(),
                      cluster.ptr());
            const Tensor renormed = cadain(cluster, f);
            double score = 0, rn = 0, fn = 0;
            for (std::int64_t j = 0; j < f.numel(); ++j) {
                score += static_cast<double>(renormed[j]) * f[j];
                rn += static_cast<double>(renormed[j]) * renormed[j];
                fn += static_cast<double>(f[j]) * f[j];
            }
            if (mode == MatchMode::cosine) score /= std::sqrt(rn) * std::sqrt(fn) + 1e-12;
            REQUIRE(m.scores[i] == Catch::Approx(score).epsilon(1e-4).margin(1e-4));
            if (score > best_score) {
                best_score = score;
                best = i;
            }
        }
        REQUIRE(m.k_star == best);
        //

        // Selected slice is the renormed winner.
        Tensor cluster({3, 5, 5});
        std::copy(clusters.ptr() + m.k_star * f.numel(),
                  clusters.ptr() + (m.k_star + 1) * f.numel(), cluster.ptr());
        const Tensor want = cadain(cluster, f);
        for (std::int64_t j = 0; j < f.numel(); ++j)
            REQUIRE(m.selected[j] == Catch::Approx(want[j]).margin(1e-5));
    }
}

TEST_CASE("feature_match: exact ties resolve to the smallest index") {
    // Single-term dot products are exact in float, so the tie is mathematical,
    // not a rounding accident: scores are (2, 2, 1).
    const std::int64_t d = 18;
    Tensor f({2, 3, 3});
    for (std::int64_t i = 0; i < d; ++i) f[i] = 1.0f;
    Tensor clusters = Tensor::zeros({3, 2, 3, 3});
    clusters[0 * d + 0] = 2.0f;
    clusters[1 * d + 5] = 2.0f;
    clusters[2 * d + 9] = 1.0f;
    const MatchResult m =
        feature_match(f, make_dict(std::move(clusters)), MatchMode::inner, /*use_cadain=*/false);
    REQUIRE(m.scores[0] == 2.0f);
    REQUIRE(m.scores[1] == 2.0f);
    REQUIRE(m.scores[2] == 1.0f);
    REQUIRE(m.k_star == 0);
}

TEST_CASE("feature_match: argmax is invariant under uniform positive input scaling") {
    const Tensor f = random_tensor({3, 4, 4}, 51);
    Tensor f2 = f;
    for (auto& v : f2.data) v *= 2.0f;
    const auto dict = make_dict(random_tensor({5, 3, 4, 4}, 52));
    const MatchResult a = feature_match(f, dict);
    const MatchResult b = feature_match(f2, dict);
    REQUIRE(a.k_star == b.k_star);
}

TEST_CASE("feature_match: shape and emptiness validation") {
    const Tensor f = random_tensor({2, 4, 4}, 61);
    const auto wrong = make_dict(random_tensor({2, 2, 5, 5}, 62));
    REQUIRE_THROWS_AS(feature_match(f, wrong), shape_error);
}

TEST_CASE("confidence block: output lies strictly inside (0,1)") {
    Rng rng(71);
    const ConfidenceBlock block = ConfidenceBlock::make(4, rng, "conf");
    const Var x = constant(random_tensor({4, 6, 6}, 72));
    const Var y = block.forward(x);
    for (float v : y->value.data) {
        REQUIRE(v > 0.0f);
        REQUIRE(v < 1.0f);
    }
}

TEST_CASE("confidence_fuse: zero confidence is a passthrough") {
    const Var f = constant(random_tensor({3, 5, 5}, 81));
    const Var rdic = constant(random_tensor({3, 5, 5}, 82));
    const Var conf0 = constant(Tensor::zeros({3, 5, 5}));
    const Var out = confidence_fuse(f, rdic, conf0);
    REQUIRE(out->value.data == f->value.data);
    const Var conf1 = constant(Tensor::full({3, 5, 5}, 1.0f));
    const Var out1 = confidence_fuse(f, rdic, conf1);
    for (std::int64_t i = 0; i < out1->value.numel(); ++i)
        REQUIRE(out1->value[i] == f->value[i] + rdic->value[i]);
    const Var bad = constant(Tensor::zeros({3, 4, 4}));
    REQUIRE_THROWS_AS(confidence_fuse(f, rdic, bad), shape_error);
}

TEST_CASE("confidence_fuse: perfect match stays finite and block gradients check out") {
    Rng rng(91);
    ConfidenceBlock block = ConfidenceBlock::make(2, rng, "conf");
    // Move biases off zero so the pre-activation avoids the LeakyReLU kink at
    // exactly 0 (finite differences are invalid on the kink itself).
    for (auto& v : block.c1.b->value.data) v = 0.3f;
    for (auto& v : block.c2.b->value.data) v = -0.2f;
    const Tensor f0 = random_tensor({2, 5, 5}, 92, 0.5f);
    const Var f = constant(f0);
    const Var rdic = constant(f0); // perfect match: block input is zero
    const Tensor target = random_tensor({2, 5, 5}, 93, 0.5f);
    std::vector<Var> params;
    block.collect(params);
    const auto report = dfd::test::gradcheck(
        params,
        [&] {
            const Var conf = block.forward(sub(rdic, f));
            const Var fused = confidence_fuse(f, rdic, conf);
            for (float v : fused->value.data) REQUIRE(std::isfinite(v));
            return sse_against(fused, target);
        },
        1e-3, 6);
    INFO(report.first_failure);
    REQUIRE(report.failed == 0);
}

namespace {

// A scale-1 fixture: trunk features plus four disjoint integer-aligned boxes
// whose extents equal the component sizes at resolution 64.
struct BlockFixture {
    Tensor fm;
    std::array<std::optional<RoiBox>, 4> boxes;
    DictionarySet dict;
    int resolution = 64;

    static BlockFixture make(std::uint64_t seed, bool own_components) {
        BlockFixture fx;
        fx.fm = random_tensor({3, 64, 64}, seed);
        const int sizes[4] = {
            component_size(Component::left_eye, 1, 64),
            component_size(Component::right_eye, 1, 64),
            component_size(Component::nose, 1, 64),
            component_size(Component::mouth, 1, 64),
        };
        const float x0s[4] = {2, 20, 38, 14};
        const float y0s[4] = {2, 2, 20, 40};
        for (int c = 0; c < 4; ++c) {
            RoiBox b;
            b.component = static_cast<Component>(c);
            b.x0 = x0s[c];
            b.y0 = y0s[c];
            b.x1 = x0s[c] + static_cast<float>(sizes[c]);
            b.y1 = y0s[c] + static_cast<float>(sizes[c]);
            fx.boxes[static_cast<std::size_t>(c)] = b;
        }
        fx.dict.k = 1;
        fx.dict.resolution = 64;
        const FeatureMap view{1, 1, fx.fm};
        for (int c = 0; c < 4; ++c) {
            const Component comp = static_cast<Component>(c);
            Tensor cluster =
                own_components
                    ? roi_align(view, *fx.boxes[static_cast<std::size_t>(c)], sizes[c], sizes[c])
                    : random_tensor({3, sizes[c], sizes[c]},
                                    seed + 100 + static_cast<std::uint64_t>(c));
            Tensor k1({1, 3, sizes[c], sizes[c]});
            std::copy(cluster.data.begin(), cluster.data.end(), k1.ptr());
            ComponentDictionary d;
            d.scale = 1;
            d.component = comp;
            d.clusters = std::move(k1);
            fx.dict.at(1, comp) = std::move(d);
        }
        return fx;
    }
};

} // namespace

TEST_CASE("dft_block: own components with zero confidence pass the input through") {
    const BlockFixture fx = BlockFixture::make(101, /*own_components=*/true);
    Rng rng(7);
    const ConfidenceBlock block = ConfidenceBlock::make(3, rng, "conf");
    DftOptions opt;
    opt.confidence_override = 0.0f;
    std::vector<DftDiagnostic> diags;
    const Var out =
        dft_block(constant(fx.fm), 1, fx.boxes, fx.dict, block, opt, fx.resolution, &diags);
    REQUIRE(diags.size() == 4);
    for (const auto& d : diags) {
        REQUIRE_FALSE(d.skipped);
        REQUIRE(d.k_star == 0);
        REQUIRE(d.mean_confidence == 0.0);
    }
    for (std::int64_t i = 0; i < fx.fm.numel(); ++i) REQUIRE(out->value[i] == fx.fm[i]);
}

TEST_CASE("dft_block: fusion stays inside the boxes") {
    BlockFixture fx = BlockFixture::make(111, /*own_components=*/false);
    // Zero the trunk outside all boxes.
    Tensor masked = Tensor::zeros(fx.fm.dims);
    for (int c = 0; c < 4; ++c) {
        const RoiBox& b = *fx.boxes[static_cast<std::size_t>(c)];
        for (int ch = 0; ch < 3; ++ch)
            for (int y = static_cast<int>(b.y0); y < static_cast<int>(b.y1); ++y)
                for (int x = static_cast<int>(b.x0); x < static_cast<int>(b.x1); ++x)
                    masked.at3(ch, y, x) = fx.fm.at3(ch, y, x);
    }
    Rng rng(8);
    const ConfidenceBlock block = ConfidenceBlock::make(3, rng, "conf");
    DftOptions opt;
    opt.confidence_override = 1.0f;
    const Var out = dft_block(constant(masked), 1, fx.boxes, fx.dict, block, opt, fx.resolution);
    auto inside_any = [&](int y, int x) {
        for (int c = 0; c < 4; ++c) {
            const RoiBox& b = *fx.boxes[static_cast<std::size_t>(c)];
            if (y >= static_cast<int>(b.y0) && y < static_cast<int>(b.y1) &&
                x >= static_cast<int>(b.x0) && x < static_cast<int>(b.x1))
                return true;
        }
        return false;
    };
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                if (!inside_any(y, x)) REQUIRE(out->value.at3(ch, y, x) == 0.0f);
}

TEST_CASE("dft_block: matches a manual crop-match-fuse-paste composition") {
    const BlockFixture fx = BlockFixture::make(121, /*own_components=*/false);
    // Fractional variants of the same boxes exercise real resampling.
    std::array<std::optional<RoiBox>, 4> boxes = fx.boxes;
    for (auto& b : boxes) {
        b->x0 += 0.3f;
        b->y0 += 0.45f;
        b->x1 += 0.3f;
        b->y1 += 0.45f;
    }
    Rng rng(9);
    const ConfidenceBlock block = ConfidenceBlock::make(3, rng, "conf");
    DftOptions opt;
    opt.confidence_override = 0.6f;
    const Var out = dft_block(constant(fx.fm), 1, boxes, fx.dict, block, opt, fx.resolution);

    Tensor expect = fx.fm;
    const FeatureMap view{1, 1, fx.fm};
    for (Component c : kComponents) {
        const RoiBox& b = *boxes[static_cast<std::size_t>(c)];
        const int sz = component_size(c, 1, fx.resolution);
        const Tensor f = roi_align(view, b, sz, sz);
        const MatchResult m = feature_match(f, fx.dict.at(1, c));
        Tensor fused(f.dims);
        for (std::int64_t i = 0; i < f.numel(); ++i) fused[i] = f[i] + m.selected[i] * 0.6f;
        expect = reverse_roi_align(expect, 1, fused, b);
    }
    for (std::int64_t i = 0; i < expect.numel(); ++i)
        REQUIRE(out->value[i] == Catch::Approx(expect[i]).margin(1e-5));
}

TEST_CASE("dft_block: direct swap variant pastes the renormed cluster itself") {
    const BlockFixture fx = BlockFixture::make(131, /*own_components=*/false);
    Rng rng(10);
    const ConfidenceBlock block = ConfidenceBlock::make(3, rng, "conf");
    DftOptions opt;
    opt.use_confidence = false; // direct swap
    std::vector<DftDiagnostic> diags;
    const Var out =
        dft_block(constant(fx.fm), 1, fx.boxes, fx.dict, block, opt, fx.resolution, &diags);
    for (const auto& d : diags) REQUIRE(d.mean_confidence == 1.0);

    Tensor expect = fx.fm;
    const FeatureMap view{1, 1, fx.fm};
    for (Component c : kComponents) {
        const RoiBox& b = *fx.boxes[static_cast<std::size_t>(c)];
        const int sz = component_size(c, 1, fx.resolution);
        const Tensor f = roi_align(view, b, sz, sz);
        const MatchResult m = feature_match(f, fx.dict.at(1, c));
        expect = reverse_roi_align(expect, 1, m.selected, b);
    }
    for (std::int64_t i = 0; i < expect.numel(); ++i)
        REQUIRE(out->value[i] == Catch::Approx(expect[i]).margin(1e-5));
}

TEST_CASE("dft_block: degenerate and missing boxes are skipped, not fatal") {
    const BlockFixture fx = BlockFixture::make(141, /*own_components=*/true);
    std::array<std::optional<RoiBox>, 4> boxes = fx.boxes;
    boxes[0]->x1 = boxes[0]->x0; // zero width -> degenerate at crop time
    boxes[1].reset();            // absent
    Rng rng(11);
    const ConfidenceBlock block = ConfidenceBlock::make(3, rng, "conf");
    DftOptions opt;
    opt.confidence_override = 0.0f;
    std::vector<DftDiagnostic> diags;
    const Var out =
        dft_block(constant(fx.fm), 1, boxes, fx.dict, block, opt, fx.resolution, &diags);
    REQUIRE(diags.size() == 4);
    REQUIRE(diags[0].skipped);
    REQUIRE(diags[1].skipped);
    REQUIRE_FALSE(diags[2].skipped);
    REQUIRE_FALSE(diags[3].skipped);
    // Passthrough everywhere (zero confidence + untouched skips).
    for (std::int64_t i = 0; i < fx.fm.numel(); ++i) REQUIRE(out->value[i] == fx.fm[i]);
}
