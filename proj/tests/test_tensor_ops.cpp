#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "covseg/ops.hpp"
#include "covseg/tensor.hpp"
#include "test_support.hpp"

using namespace covseg;
using covseg::testing::conv2d_oracle;

TEST_CASE("tensor shape/data invariant") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0f, 2.0f}), ShapeError);
    Tensor t({2, 2}, {1, 2, 3, 4});
    CHECK(t.numel() == 4);
    CHECK(t.at2(1, 0) == 3.0f);
}

TEST_CASE("conv2d identity kernel") {
    const Tensor input({1, 1, 1, 1}, {5.0f});
    const Tensor kernel({1, 1, 1, 1}, {1.0f});
    const Tensor bias({1}, {0.0f});
    const Tensor out = ops::conv2d(input, kernel, bias, {1, 1, ops::Padding::Same, 0});
    CHECK(out.data[0] == 5.0f);
}

TEST_CASE("conv2d 3x3 ones, same padding") {
    const Tensor input = Tensor::full({1, 1, 3, 3}, 1.0f);
    const Tensor kernel = Tensor::full({1, 1, 3, 3}, 1.0f);
    const Tensor bias({1}, {0.0f});
    const Tensor out = ops::conv2d(input, kernel, bias, {1, 1, ops::Padding::Same, 0});
    CHECK(out.at4(0, 0, 1, 1) == 9.0f);   // center
    CHECK(out.at4(0, 0, 0, 1) == 6.0f);   // edge centers
    CHECK(out.at4(0, 0, 1, 0) == 6.0f);
    CHECK(out.at4(0, 0, 0, 0) == 4.0f);   // corners
    CHECK(out.at4(0, 0, 2, 2) == 4.0f);
}

TEST_CASE("conv2d stride-2 same-padding shape rule") {
    Rng rng(1);
    const Tensor input = randn(rng, {1, 1, 4, 4});
    const Tensor kernel = randn(rng, {1, 1, 3, 3});
    const Tensor bias({1}, {0.0f});
    const Tensor out = ops::conv2d(input, kernel, bias, {2, 1, ops::Padding::Same, 0});
    CHECK(out.shape == std::vector<int64_t>{1, 1, 2, 2});
    // odd sizes round up
    const Tensor in5 = randn(rng, {1, 1, 5, 7});
    const Tensor out5 = ops::conv2d(in5, kernel, bias, {2, 1, ops::Padding::Same, 0});
    CHECK(out5.shape == std::vector<int64_t>{1, 1, 3, 4});
}

TEST_CASE("conv2d dilation-2 impulse support") {
    Tensor input = Tensor::zeros({1, 1, 5, 5});
    input.at4(0, 0, 0, 0) = 1.0f;
    const Tensor kernel = Tensor::full({1, 1, 3, 3}, 1.0f);
    const Tensor bias({1}, {0.0f});
    const Tensor out = ops::conv2d(input, kernel, bias, {1, 2, ops::Padding::Same, 0});
    for (int64_t h = 0; h < 5; ++h) {
        for (int64_t w = 0; w < 5; ++w) {
            const bool expect = (h == 0 || h == 2) && (w == 0 || w == 2);
            CHECK(out.at4(0, 0, h, w) == (expect ? 1.0f : 0.0f));
        }
    }
}

TEST_CASE("conv2d equals nested-loop oracle exactly (stride 1, dilation 1)") {
    Rng rng(7);
    for (int trial = 0; trial < 6; ++trial) {
        const int64_t n = 1 + rng.uniform_int(2);
        const int64_t c = 1 + rng.uniform_int(4);
        const int64_t co = 1 + rng.uniform_int(3);
        const int64_t h = 3 + rng.uniform_int(7);  // up to 9
        const int64_t w = 3 + rng.uniform_int(7);
        const Tensor input = randn(rng, {n, c, h, w});
        const Tensor kernel = randn(rng, {co, c, 3, 3});
        const Tensor bias = randn(rng, {co});
        const ops::Conv2dSpec spec{1, 1, ops::Padding::Same, 0};
        const auto dims = ops::conv2d_dims(h, w, 3, 3, spec);
        const Tensor got = ops::conv2d(input, kernel, bias, spec);
        const Tensor want =
            conv2d_oracle(input, kernel, bias, 1, 1, dims.pad_top, dims.pad_left, dims.out_h, dims.out_w);
        REQUIRE(got.shape == want.shape);
        for (size_t i = 0; i < got.data.size(); ++i) {
            CHECK(got.data[i] == want.data[i]);  // bitwise: same accumulation order
        }
    }
}

TEST_CASE("conv2d matches oracle for strided and dilated variants") {
    Rng rng(11);
    for (const auto& [stride, dilation] : std::vector<std::pair<int64_t, int64_t>>{
             {2, 1}, {1, 2}, {1, 4}, {1, 8}, {2, 2}}) {
        const Tensor input = randn(rng, {2, 2, 9, 9});
        const Tensor kernel = randn(rng, {3, 2, 3, 3});
        const Tensor bias = randn(rng, {3});
        const ops::Conv2dSpec spec{stride, dilation, ops::Padding::Same, 0};
        const auto dims = ops::conv2d_dims(9, 9, 3, 3, spec);
        const Tensor got = ops::conv2d(input, kernel, bias, spec);
        const Tensor want = conv2d_oracle(input, kernel, bias, stride, dilation, dims.pad_top,
                                          dims.pad_left, dims.out_h, dims.out_w);
        REQUIRE(got.shape == want.shape);
        for (size_t i = 0; i < got.data.size(); ++i) {
            CHECK(got.data[i] == doctest::Approx(want.data[i]).epsilon(1e-6));
        }
    }
}

TEST_CASE("conv2d linearity (bias excluded)") {
    Rng rng(13);
    const Tensor x = randn(rng, {1, 2, 6, 6}, 0.5);
    const Tensor y = randn(rng, {1, 2, 6, 6}, 0.5);
    const Tensor kernel = randn(rng, {3, 2, 3, 3}, 0.5);
    const Tensor zero_bias = Tensor::zeros({3});
    const ops::Conv2dSpec spec{1, 1, ops::Padding::Same, 0};
    const float a = 1.3f, b = -0.7f;
    Tensor mix(x.shape);
    for (size_t i = 0; i < mix.data.size(); ++i) mix.data[i] = a * x.data[i] + b * y.data[i];
    const Tensor lhs = ops::conv2d(mix, kernel, zero_bias, spec);
    const Tensor cx = ops::conv2d(x, kernel, zero_bias, spec);
    const Tensor cy = ops::conv2d(y, kernel, zero_bias, spec);
    for (size_t i = 0; i < lhs.data.size(); ++i) {
        CHECK(std::fabs(lhs.data[i] - (a * cx.data[i] + b * cy.data[i])) < 1e-5);
    }
}

TEST_CASE("conv2d explicit padding") {
    Rng rng(41);
    const Tensor input = randn(rng, {1, 2, 6, 6});
    const Tensor kernel = randn(rng, {2, 2, 3, 3});
    const Tensor bias = randn(rng, {2});
    // pad 0: valid convolution shrinks by kernel-1
    const Tensor valid = ops::conv2d(input, kernel, bias, {1, 1, ops::Padding::Explicit, 0});
    CHECK(valid.shape == std::vector<int64_t>{1, 2, 4, 4});
    // pad 1 at stride 1 equals same padding for a 3x3 kernel
    const Tensor padded = ops::conv2d(input, kernel, bias, {1, 1, ops::Padding::Explicit, 1});
    const Tensor same = ops::conv2d(input, kernel, bias, {1, 1, ops::Padding::Same, 0});
    REQUIRE(padded.shape == same.shape);
    for (size_t i = 0; i < same.data.size(); ++i) CHECK(padded.data[i] == same.data[i]);
}

TEST_CASE("conv2d error paths") {
    Rng rng(3);
    const Tensor input = randn(rng, {1, 2, 4, 4});
    const Tensor kernel = randn(rng, {1, 3, 3, 3});  // channel mismatch
    const Tensor bias({1}, {0.0f});
    CHECK_THROWS_AS(ops::conv2d(input, kernel, bias, {1, 1, ops::Padding::Same, 0}), ShapeError);
    const Tensor ok_kernel = randn(rng, {1, 2, 3, 3});
    CHECK_THROWS_AS(ops::conv2d(input, ok_kernel, bias, {0, 1, ops::Padding::Same, 0}), ParamError);
    CHECK_THROWS_AS(ops::conv2d(input, ok_kernel, bias, {1, 0, ops::Padding::Same, 0}), ParamError);
    const Tensor even_kernel = randn(rng, {1, 2, 2, 2});
    CHECK_THROWS_AS(ops::conv2d(input, even_kernel, bias, {1, 1, ops::Padding::Same, 0}), ParamError);
}

TEST_CASE("shape algebra is a pure function of inputs") {
    Rng rng(23);
    for (int trial = 0; trial < 40; ++trial) {
        const int64_t h = 4 + rng.uniform_int(29);
        const int64_t w = 4 + rng.uniform_int(29);
        const int64_t k = 1 + 2 * rng.uniform_int(3);  // 1,3,5
        const int64_t stride = 1 + rng.uniform_int(2);
        const int64_t dils[] = {1, 2, 4, 8};
        const int64_t dilation = dils[rng.uniform_int(4)];
        const ops::Conv2dSpec spec{stride, dilation, ops::Padding::Same, 0};
        const auto dims = ops::conv2d_dims(h, w, k, k, spec);
        CHECK(dims.out_h == (h + stride - 1) / stride);
        CHECK(dims.out_w == (w + stride - 1) / stride);
        const Tensor input = randn(rng, {1, 1, h, w});
        const Tensor kernel = randn(rng, {2, 1, k, k});
        const Tensor bias = randn(rng, {2});
        const Tensor out = ops::conv2d(input, kernel, bias, spec);
        CHECK(out.shape == std::vector<int64_t>{1, 2, dims.out_h, dims.out_w});
    }
}

TEST_CASE("batch_norm normalizes to zero mean, unit variance") {
    Tensor input({1, 1, 1, 3}, {1.0f, 2.0f, 3.0f});
    const Tensor scale = Tensor::full({1}, 1.0f);
    const Tensor shift = Tensor::zeros({1});
    Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0f);
    const Tensor out = ops::batch_norm_train(input, scale, shift, rm, rv, ops::kBatchNormEps,
                                             ops::kBatchNormMomentum, nullptr);
    double mean = 0.0, var = 0.0;
    for (float v : out.data) mean += v;
    mean /= 3.0;
    for (float v : out.data) var += (v - mean) * (v - mean);
    var /= 3.0;
    CHECK(std::fabs(mean) < 1e-6);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // epsilon shrinks it slightly
    // running stats moved toward the batch: 0.9*0 + 0.1*2 = 0.2
    CHECK(rm.data[0] == doctest::Approx(0.2));
}

TEST_CASE("batch_norm constant channel maps to zero") {
    const Tensor input = Tensor::full({2, 1, 2, 2}, 3.5f);
    const Tensor scale = Tensor::full({1}, 1.0f);
    const Tensor shift = Tensor::zeros({1});
    Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0f);
    const Tensor out = ops::batch_norm_train(input, scale, shift, rm, rv, ops::kBatchNormEps,
                                             ops::kBatchNormMomentum, nullptr);
    for (float v : out.data) CHECK(v == 0.0f);
}

TEST_CASE("batch_norm shift-only output") {
    Rng rng(5);
    const Tensor input = randn(rng, {2, 2, 3, 3});
    const Tensor scale = Tensor::zeros({2});
    const Tensor shift = Tensor::full({2}, 7.0f);
    Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0f);
    const Tensor out = ops::batch_norm_train(input, scale, shift, rm, rv, ops::kBatchNormEps,
                                             ops::kBatchNormMomentum, nullptr);
    for (float v : out.data) CHECK(v == 7.0f);
}

TEST_CASE("batch_norm eval uses running statistics") {
    Tensor input({1, 1, 1, 2}, {1.0f, 3.0f});
    const Tensor scale = Tensor::full({1}, 1.0f);
    const Tensor shift = Tensor::zeros({1});
    Tensor rm = Tensor::full({1}, 2.0f), rv = Tensor::full({1}, 4.0f);
    const Tensor out = ops::batch_norm_eval(input, scale, shift, rm, rv, 0.0);
    CHECK(out.data[0] == doctest::Approx(-0.5));
    CHECK(out.data[1] == doctest::Approx(0.5));
}

TEST_CASE("relu definition and identity region") {
    const Tensor x({3}, {-1.0f, 0.0f, 2.0f});
    const Tensor y = ops::relu(x);
    CHECK(y.data[0] == 0.0f);
    CHECK(y.data[1] == 0.0f);
    CHECK(y.data[2] == 2.0f);
    const Tensor pos({3}, {0.5f, 1.0f, 9.0f});
    const Tensor same = ops::relu(pos);
    for (size_t i = 0; i < pos.data.size(); ++i) CHECK(same.data[i] == pos.data[i]);
}

TEST_CASE("sigmoid fixed points and saturation") {
    const Tensor x({3}, {0.0f, 30.0f, -30.0f});
    const Tensor y = ops::sigmoid(x);
    CHECK(y.data[0] == 0.5f);
    CHECK(y.data[1] > 0.9999f);
    CHECK(y.data[1] < 1.0f);  // clamp keeps the open interval
    CHECK(y.data[2] > 0.0f);
    // extreme inputs still stay strictly inside (0,1)
    const Tensor ext({2}, {500.0f, -500.0f});
    const Tensor ye = ops::sigmoid(ext);
    CHECK(ye.data[0] < 1.0f);
    CHECK(ye.data[1] > 0.0f);
}

TEST_CASE("upsample2x replication and backward block sum") {
    const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    const Tensor y = ops::upsample2x(x);
    const std::vector<float> want = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    REQUIRE(y.shape == std::vector<int64_t>{1, 1, 4, 4});
    for (size_t i = 0; i < want.size(); ++i) CHECK(y.data[i] == want[i]);

    const Tensor constant = Tensor::full({1, 2, 3, 3}, 2.5f);
    const Tensor up = ops::upsample2x(constant);
    for (float v : up.data) CHECK(v == 2.5f);

    const Tensor grad_out = Tensor::full({1, 1, 4, 4}, 1.0f);
    const Tensor gin = ops::upsample2x_backward(grad_out);
    for (float v : gin.data) CHECK(v == 4.0f);
}

TEST_CASE("concat_channels shape rule and gradient split") {
    Rng rng(9);
    const Tensor a = randn(rng, {2, 32, 4, 4});
    const Tensor b = randn(rng, {2, 128, 4, 4});
    const Tensor y = ops::concat_channels(a, b);
    CHECK(y.shape == std::vector<int64_t>{2, 160, 4, 4});
    CHECK(y.at4(1, 0, 2, 3) == a.at4(1, 0, 2, 3));
    CHECK(y.at4(1, 32, 2, 3) == b.at4(1, 0, 2, 3));

    // concat with an empty-channel tensor is the identity
    const Tensor empty({2, 0, 4, 4}, {});
    const Tensor same = ops::concat_channels(a, empty);
    CHECK(same.shape == a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) CHECK(same.data[i] == a.data[i]);

    const Tensor grad = randn(rng, {2, 160, 4, 4});
    const auto [ga, gb] = ops::concat_channels_backward(32, grad);
    CHECK(ga.shape == a.shape);
    CHECK(gb.shape == b.shape);
    CHECK(ga.at4(0, 5, 1, 1) == grad.at4(0, 5, 1, 1));
    CHECK(gb.at4(0, 5, 1, 1) == grad.at4(0, 37, 1, 1));

    const Tensor bad = randn(rng, {2, 8, 5, 4});
    CHECK_THROWS_AS(ops::concat_channels(a, bad), ShapeError);
}

TEST_CASE("add identity, values and shape checks") {
    const Tensor a({2}, {1.0f, 2.0f});
    const Tensor zeros = Tensor::zeros({2});
    const Tensor same = ops::add(a, zeros);
    CHECK(same.data[0] == 1.0f);
    CHECK(same.data[1] == 2.0f);
    const Tensor b({2}, {3.0f, 4.0f});
    const Tensor sum = ops::add(a, b);
    CHECK(sum.data[0] == 4.0f);
    CHECK(sum.data[1] == 6.0f);
    const Tensor bad({3}, {1, 2, 3});
    CHECK_THROWS_AS(ops::add(a, bad), ShapeError);
}

TEST_CASE("primitive determinism: identical inputs give bitwise-identical outputs") {
    Rng rng(31);
    const Tensor input = randn(rng, {2, 3, 8, 8});
    const Tensor kernel = randn(rng, {4, 3, 3, 3});
    const Tensor bias = randn(rng, {4});
    const ops::Conv2dSpec spec{2, 2, ops::Padding::Same, 0};
    const Tensor a = ops::conv2d(input, kernel, bias, spec);
    const Tensor b = ops::conv2d(input, kernel, bias, spec);
    REQUIRE(a.data.size() == b.data.size());
    for (size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == b.data[i]);
}

TEST_CASE("finite outputs for finite inputs across primitives") {
    Rng rng(37);
    const Tensor x = randn(rng, {1, 2, 6, 6}, 10.0);
    CHECK(ops::relu(x).all_finite());
    CHECK(ops::sigmoid(x).all_finite());
    CHECK(ops::upsample2x(x).all_finite());
    const Tensor k = randn(rng, {2, 2, 3, 3}, 10.0);
    const Tensor b = randn(rng, {2}, 10.0);
    CHECK(ops::conv2d(x, k, b, {1, 1, ops::Padding::Same, 0}).all_finite());
}
