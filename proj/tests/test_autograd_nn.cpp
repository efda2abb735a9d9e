#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "dfd/features.hpp"
#include "dfd/nn.hpp"
#include "gradcheck.hpp"

using namespace dfd;
using dfd::test::gradcheck;

namespace {
Tensor random_tensor(std::vector<std::int64_t> dims, std::uint64_t seed, float scale = 1.0f) {
    Tensor t(std::move(dims));
    Rng r(seed);
    t.fill_normal(r, scale);
    return t;
}
} // namespace

TEST_CASE("autograd: elementwise chain matches finite differences") {
    const Var x = make_param(random_tensor({2, 3, 3}, 1), "x");
    const Var y = make_param(random_tensor({2, 3, 3}, 2), "y");
    auto build = [&] {
        const Var z = mul(tanh_op(x), sigmoid(add(mul_scalar(y, 0.7f), x)));
        return mean_all(sub(z, sigmoid(y)));
    };
    const auto rep = gradcheck({x, y}, build, 1e-2, 8);
    INFO(rep.first_failure);
    REQUIRE(rep.failed == 0);
}

TEST_CASE("autograd: relu family gradients away from the kink") {
    // Finite differences are meaningless across the kink, so the input is
    // kept at least 0.3 away from zero on both sides.
    Tensor init({16});
    for (int i = 0; i < 16; ++i)
        init[i] = (i % 2 == 0 ? 1.0f : -1.0f) * (0.3f + 0.1f * static_cast<float>(i));
    const Var x = make_param(init, "x");
    auto build = [&] { return mean_all(add(relu(x), leaky_relu(mul_scalar(x, 0.9f), 0.2f))); };
    const auto rep = gradcheck({x}, build, 1e-2, 12);
    INFO(rep.first_failure);
    REQUIRE(rep.failed == 0);
}

TEST_CASE("autograd: mse/sse closed forms and gradients") {
    const Var x = make_param(Tensor::full({4}, 2.0f), "x");
    const Tensor target = Tensor::full({4}, 0.5f);
    REQUIRE(mse_against(x, target)->value[0] == Catch::Approx(2.25).epsilon(1e-6));
    REQUIRE(sse_against(x, target)->value[0] == Catch::Approx(9.0).epsilon(1e-6));
    auto build = [&] { return mse_against(x, target); };
    const auto rep = gradcheck({x}, build, 1e-2, 4);
    INFO(rep.first_failure);
    REQUIRE(rep.failed == 0);
}

TEST_CASE("nn: conv2d forward equals a naive loop") {
    const int ic = 2, oc = 3, h = 5, w = 6, k = 3;
    const Tensor x = random_tensor({ic, h, w}, 10);
    const Tensor wt = random_tensor({oc, ic, k, k}, 11, 0.5f);
    const Tensor bt = random_tensor({oc}, 12, 0.1f);

    for (const int stride : {1, 2}) {
        const Var out = conv2d(constant(x), constant(wt), constant(bt), stride, 1);
        const int oh = (h + 2 - k) / stride + 1;
        const int ow = (w + 2 - k) / stride + 1;
        REQUIRE(out->value.dims == std::vector<std::int64_t>{oc, oh, ow});
        for (int o = 0; o < oc; ++o)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = bt[o];
                    for (int c = 0; c < ic; ++c)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride + ky - 1;
                                const int ix = ox * stride + kx - 1;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += static_cast<double>(x.at3(c, iy, ix)) *
                                       wt.at4(o, c, ky, kx);
                            }
                    REQUIRE(out->value.at3(o, oy, ox) == Catch::Approx(acc).margin(1e-4));
                }
    }
}

TEST_CASE("nn: conv2d gradients (weights, bias, input; stride 1 and 2)") {
    for (const int stride : {1, 2}) {
        const Var x = make_param(random_tensor({2, 6, 5}, 20 + stride), "x");
        const Var w = make_param(random_tensor({3, 2, 3, 3}, 21, 0.4f), "w");
        const Var b = make_param(random_tensor({3}, 22, 0.1f), "b");
        auto build = [&] { return mean_all(tanh_op(conv2d(x, w, b, stride, 1))); };
        const auto rep = gradcheck({x, w, b}, build, 1e-2, 6, 99 + stride);
        INFO("stride " << stride << ": " << rep.first_failure);
        REQUIRE(rep.failed == 0);
    }
}

TEST_CASE("nn: avg_pool2 and upsample_nearest2 forward + gradients") {
    const Tensor x = random_tensor({2, 4, 6}, 30);
    const Var pooled = avg_pool2(constant(x));
    REQUIRE(pooled->value.dims == std::vector<std::int64_t>{2, 2, 3});
    REQUIRE(pooled->value.at3(0, 0, 0) ==
            Catch::Approx((x.at3(0, 0, 0) + x.at3(0, 0, 1) + x.at3(0, 1, 0) + x.at3(0, 1, 1)) / 4));

    const Var up = upsample_nearest2(constant(x));
    REQUIRE(up->value.dims == std::vector<std::int64_t>{2, 8, 12});
    REQUIRE(up->value.at3(1, 5, 7) == x.at3(1, 2, 3));

    const Var p = make_param(random_tensor({2, 4, 4}, 31), "p");
    auto build = [&] { return mean_all(mul(upsample_nearest2(avg_pool2(p)), p)); };
    const auto rep = gradcheck({p}, build, 1e-2, 8);
    INFO(rep.first_failure);
    REQUIRE(rep.failed == 0);
}

TEST_CASE("nn: concat/slice channels round trip and gradients") {
    const Var a = make_param(random_tensor({2, 3, 3}, 40), "a");
    const Var b = make_param(random_tensor({3, 3, 3}, 41), "b");
    const Var cat = concat_ch(a, b);
    REQUIRE(cat->value.dims == std::vector<std::int64_t>{5, 3, 3});
    REQUIRE(max_abs_diff(slice_ch(cat, 0, 2)->value, a->value) == 0.0);
    REQUIRE(max_abs_diff(slice_ch(cat, 2, 5)->value, b->value) == 0.0);
    auto build = [&] {
        const Var c = concat_ch(a, b);
        return mean_all(mul(slice_ch(c, 1, 4), slice_ch(c, 0, 3)));
    };
    const auto rep = gradcheck({a, b}, build, 1e-2, 6);
    INFO(rep.first_failure);
    REQUIRE(rep.failed == 0);
}

TEST_CASE("nn: bicubic resize identity at same size is bitwise") {
    const Tensor x = random_tensor({3, 7, 5}, 50);
    const Tensor y = resize_bicubic(x, 7, 5);
    REQUIRE(y.data == x.data);
}

TEST_CASE("nn: bicubic upscale reproduces linear ramps in the interior") {
    Tensor x({1, 8, 8});
    for (int y = 0; y < 8; ++y)
        for (int i = 0; i < 8; ++i) x.at3(0, y, i) = 0.1f * static_cast<float>(i);
    const Tensor up = resize_bicubic(x, 8, 16, /*antialias=*/false);
    // Keys cubic interpolation is exact on linear functions away from edges.
    for (int i = 4; i < 12; ++i) {
        const float src = (static_cast<float>(i) + 0.5f) * 0.5f - 0.5f;
        REQUIRE(up.at3(0, 3, i) == Catch::Approx(0.1f * src).margin(1e-5));
    }
}

TEST_CASE("nn: antialiased downscale preserves constants and mass") {
    const Tensor c = Tensor::full({2, 12, 12}, 0.37f);
    const Tensor down = resize_bicubic(c, 5, 5, /*antialias=*/true);
    for (float v : down.data) REQUIRE(v == Catch::Approx(0.37f).margin(1e-6));
}

TEST_CASE("nn: resize backward is the exact adjoint") {
    // <A x, y> must equal <x, A^T y> where A^T is the backward pass.
    const Tensor x = random_tensor({1, 9, 7}, 60);
    const Tensor y = random_tensor({1, 4, 5}, 61);
    const Var xv = make_param(x, "x");
    const Var out = resize_bicubic_op(xv, 4, 5, true);
    double axy = 0;
    for (std::int64_t i = 0; i < out->value.numel(); ++i)
        axy += static_cast<double>(out->value[i]) * y[i];

    zero_grad({xv});
    // loss = sum(A x * y), so dloss/dx = A^T y.
    const Var loss = sum_all(mul(out, constant(y)));
    backward(loss);
    double xaty = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i)
        xaty += static_cast<double>(x[i]) * xv->grad[i];
    REQUIRE(axy == Catch::Approx(xaty).epsilon(1e-4));
}

TEST_CASE("nn: resize gradients (up and down) match finite differences") {
    const Var x = make_param(random_tensor({2, 6, 6}, 62), "x");
    auto build_up = [&] { return mean_all(tanh_op(resize_bicubic_op(x, 9, 9, false))); };
    auto rep = gradcheck({x}, build_up, 1e-2, 8, 7);
    INFO(rep.first_failure);
    REQUIRE(rep.failed == 0);
    auto build_down = [&] { return mean_all(tanh_op(resize_bicubic_op(x, 3, 4, true))); };
    rep = gradcheck({x}, build_down, 1e-2, 8, 8);
    INFO(rep.first_failure);
    REQUIRE(rep.failed == 0);
}

TEST_CASE("nn: Adam first step has magnitude lr for constant gradients") {
    const Var p = make_param(Tensor::full({3}, 1.0f), "p");
    Adam opt({p}, 0.01f, 0.5f, 0.999f);
    zero_grad({p});
    backward(mul_scalar(sum_all(p), 5.0f)); // gradient = 5 everywhere
    opt.step();
    for (std::int64_t i = 0; i < 3; ++i)
        REQUIRE(p->value[i] == Catch::Approx(1.0f - 0.01f).margin(1e-5));
}

TEST_CASE("nn: Adam optimizes a quadratic") {
    const Var p = make_param(Tensor::full({4}, 3.0f), "p");
    Adam opt({p}, 0.05f, 0.9f, 0.999f);
    float first = 0;
    for (int i = 0; i < 200; ++i) {
        zero_grad({p});
        const Var loss = mse_against(p, Tensor::zeros({4}));
        if (i == 0) first = loss->value[0];
        backward(loss);
        opt.step();
    }
    const float last = mse_against(p, Tensor::zeros({4}))->value[0];
    REQUIRE(last < 0.05f * first);
}

TEST_CASE("nn: spectral normalization matches direct SVD") {
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor w = random_tensor({8, 8}, 70 + static_cast<std::uint64_t>(trial));
        Tensor u({8});
        Rng ur(80 + static_cast<std::uint64_t>(trial));
        u.fill_normal(ur);
        auto [normalized, sigma] = spectral_normalize(w, u, 50);

        Eigen::MatrixXf m(8, 8);
        for (int r = 0; r < 8; ++r)
            for (int c = 0; c < 8; ++c) m(r, c) = w[r * 8 + c];
        const float svd_sigma = Eigen::JacobiSVD<Eigen::MatrixXf>(m).singularValues()(0);
        REQUIRE(sigma == Catch::Approx(svd_sigma).epsilon(1e-3));

        Eigen::MatrixXf nm(8, 8);
        for (int r = 0; r < 8; ++r)
            for (int c = 0; c < 8; ++c) nm(r, c) = normalized[r * 8 + c];
        const float norm_sigma = Eigen::JacobiSVD<Eigen::MatrixXf>(nm).singularValues()(0);
        REQUIRE(norm_sigma >= 0.99f);
        REQUIRE(norm_sigma <= 1.01f);
    }
}

TEST_CASE("nn: spectral normalization of a scaled identity") {
    Tensor w({6, 6});
    for (int i = 0; i < 6; ++i) w[i * 6 + i] = 2.5f;
    Tensor u({6});
    Rng ur(90);
    u.fill_normal(ur);
    auto [normalized, sigma] = spectral_normalize(w, u, 100);
    REQUIRE(sigma == Catch::Approx(2.5).epsilon(1e-3));
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j)
            REQUIRE(normalized[i * 6 + j] == Catch::Approx(i == j ? 1.0 : 0.0).margin(2e-3));
}

TEST_CASE("nn: sn_weight gradient with frozen u matches finite differences") {
    const Var w = make_param(random_tensor({4, 2, 3, 3}, 100, 0.5f), "w");
    Tensor u({4});
    Rng ur(101);
    u.fill_normal(ur);
    const Tensor x = random_tensor({2, 5, 5}, 102);
    const Tensor probe = random_tensor({4, 5, 5}, 103);
    auto build = [&] {
        const Var wn = sn_weight(w, u, /*update_u=*/false);
        const Var out = conv2d(constant(x), wn, Var(), 1, 1);
        return sum_all(mul(out, constant(probe)));
    };
    const auto rep = gradcheck({w}, build, 1e-2, 10, 55);
    INFO(rep.first_failure);
    REQUIRE(rep.failed == 0);
}

TEST_CASE("nn: plain forward helpers agree with autograd ops") {
    const Tensor x = random_tensor({3, 8, 8}, 110);
    const Tensor w = random_tensor({4, 3, 3, 3}, 111, 0.3f);
    const Tensor b = random_tensor({4}, 112, 0.1f);
    const Tensor conv_plain = conv2d_plain(x, w, b, 1, 1);
    const Var conv_op = conv2d(constant(x), constant(w), constant(b), 1, 1);
    REQUIRE(max_abs_diff(conv_plain, conv_op->value) == 0.0);

    const Tensor lrelu_plain = leaky_relu_plain(conv_plain, 0.2f);
    REQUIRE(max_abs_diff(lrelu_plain, leaky_relu(conv_op, 0.2f)->value) == 0.0);

    const Tensor pool_plain = avg_pool2_plain(lrelu_plain);
    REQUIRE(max_abs_diff(pool_plain, avg_pool2(leaky_relu(conv_op, 0.2f))->value) == 0.0);
}
