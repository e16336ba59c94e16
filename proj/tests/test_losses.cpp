#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "covseg/losses.hpp"
#include "covseg/metrics.hpp"
#include "test_support.hpp"

using namespace covseg;
using losses::LossConfig;
using losses::PixelProbs;

TEST_CASE("tversky index: perfect prediction scores 1") {
    const Tensor gt({4}, {1, 0, 1, 0});
    PixelProbs p(gt, gt);
    CHECK(losses::tversky_index(p, 0.7, 0.3, 1.0) == doctest::Approx(1.0));
    CHECK(losses::tversky_index(p, 0.7, 0.3, 0.0) == doctest::Approx(1.0));
    // empty masks are guarded by the smooth term
    const Tensor empty = Tensor::zeros({4});
    PixelProbs pe(empty, empty);
    CHECK(losses::tversky_index(pe, 0.7, 0.3, 1.0) == doctest::Approx(1.0));
}

TEST_CASE("tversky index closed form: TP=1, FP=1, FN=1 at alpha=0.7, beta=0.3") {
    // pred {1,1,0}, gt {1,0,1} -> TP 1, FP 1, FN 1
    const Tensor pred({3}, {1, 1, 0});
    const Tensor gt({3}, {1, 0, 1});
    PixelProbs p(pred, gt);
    CHECK(losses::tversky_index(p, 0.7, 0.3, 0.0) == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("tversky at alpha=beta=0.5 equals DSC on hard masks") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor pred = testing::random_mask(rng, {8, 8}, 0.4);
        const Tensor gt = testing::random_mask(rng, {8, 8}, 0.4);
        PixelProbs p(pred, gt);
        const double ti = losses::tversky_index(p, 0.5, 0.5, 0.0);
        const double d = metrics::dsc(metrics::confusion(pred, gt));
        CHECK(std::fabs(ti - d) < 1e-6);
    }
}

TEST_CASE("focal tversky closed forms") {
    LossConfig cfg;
    // TI = 1 -> loss 0
    const Tensor gt({2}, {1, 0});
    PixelProbs perfect(gt, gt);
    cfg.smooth = 1.0;
    CHECK(losses::focal_tversky_loss(perfect, cfg) == doctest::Approx(0.0).epsilon(1e-12));

    // TI = 0.5 at gamma = 4/3 -> 0.5^0.75
    // pred {1,1,0}, gt {1,0,1} with smooth 0 gives TI exactly 0.5
    cfg.smooth = 1e-12;  // validate() requires > 0; negligible here
    const Tensor pred({3}, {1, 1, 0});
    const Tensor gt3({3}, {1, 0, 1});
    PixelProbs half(pred, gt3);
    CHECK(losses::focal_tversky_loss(half, cfg) ==
          doctest::Approx(std::pow(0.5, 0.75)).epsilon(1e-6));

    // gamma = 1 -> linear tversky loss
    cfg.gamma = 1.0;
    CHECK(losses::focal_tversky_loss(half, cfg) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("gamma outside [1,3] is rejected") {
    LossConfig cfg;
    cfg.gamma = 0.5;
    const Tensor gt({2}, {1, 0});
    PixelProbs p(gt, gt);
    CHECK_THROWS_AS(losses::focal_tversky_loss(p, cfg), ParamError);
    cfg.gamma = 3.5;
    CHECK_THROWS_AS(losses::focal_tversky_loss(p, cfg), ParamError);
}

TEST_CASE("weighted BCE: perfect fit tends to zero") {
    const Tensor gt({4}, {1, 0, 1, 0});
    PixelProbs p(gt, gt);  // hard probabilities are clamped internally
    CHECK(losses::weighted_bce(p, 3.0) < 1e-5);
}

TEST_CASE("weighted BCE with weight 1 is plain BCE") {
    const Tensor probs({2}, {0.8f, 0.3f});
    const Tensor gt({2}, {1, 0});
    PixelProbs p(probs, gt);
    const double expect = -(std::log(0.8) + std::log(0.7)) / 2.0;
    CHECK(losses::weighted_bce(p, 1.0) == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("weighted BCE hand evaluation: 2*ln 2") {
    const Tensor probs({2}, {0.5f, 0.5f});
    const Tensor gt({2}, {1, 0});
    PixelProbs p(probs, gt);
    CHECK(losses::weighted_bce(p, 3.0) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("batch-balanced weight") {
    const Tensor gt({8}, {1, 0, 0, 0, 0, 0, 0, 0});
    CHECK(losses::batch_balanced_weight(gt) == doctest::Approx(7.0));
    const Tensor none = Tensor::zeros({8});
    CHECK(losses::batch_balanced_weight(none) == doctest::Approx(8.0));  // max(1, lesions)
}

TEST_CASE("hybrid loss: kappa = 0 equals weighted BCE bitwise") {
    Rng rng(7);
    const Tensor probs = rand_uniform(rng, {2, 1, 8, 8}, 0.05, 0.95);
    const Tensor gt = testing::random_mask(rng, {2, 1, 8, 8}, 0.3);
    PixelProbs p(probs, gt);
    LossConfig cfg;
    cfg.kappa = 0.0;
    const losses::LossValueGrad h = losses::hybrid_loss(p, cfg);
    const losses::LossValueGrad w = losses::weighted_bce_grad(p, losses::resolve_lesion_weight(p, cfg));
    CHECK(h.value == w.value);  // bitwise
    for (size_t i = 0; i < h.grad.data.size(); ++i) CHECK(h.grad.data[i] == w.grad.data[i]);
}

TEST_CASE("hybrid loss at default weights is the sum of the two components") {
    Rng rng(11);
    const Tensor probs = rand_uniform(rng, {1, 1, 8, 8}, 0.1, 0.9);
    const Tensor gt = testing::random_mask(rng, {1, 1, 8, 8}, 0.3);
    PixelProbs p(probs, gt);
    LossConfig cfg;  // alpha .7, beta .3, gamma 4/3, kappa 1
    const double w = losses::resolve_lesion_weight(p, cfg);
    const double expect = losses::weighted_bce(p, w) + losses::focal_tversky_loss(p, cfg);
    CHECK(losses::hybrid_loss(p, cfg).value == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("ranges: TI in [0,1], FTL in [0,1], losses non-negative") {
    Rng rng(13);
    LossConfig cfg;
    for (int trial = 0; trial < 25; ++trial) {
        const Tensor probs = rand_uniform(rng, {4, 4}, 0.0, 1.0);
        const Tensor gt = testing::random_mask(rng, {4, 4}, rng.uniform());
        PixelProbs p(probs, gt);
        const double ti = losses::tversky_index(p, cfg.alpha, cfg.beta, cfg.smooth);
        CHECK(ti >= 0.0);
        CHECK(ti <= 1.0);
        const double ftl = losses::focal_tversky_loss(p, cfg);
        CHECK(ftl >= 0.0);
        CHECK(ftl <= 1.0);
        CHECK(losses::hybrid_loss(p, cfg).value >= 0.0);
    }
}

TEST_CASE("monotonicity: raising P_l on a true-lesion pixel never increases the loss") {
    Rng rng(17);
    LossConfig cfg;
    for (int trial = 0; trial < 10; ++trial) {
        Tensor probs = rand_uniform(rng, {4, 4}, 0.1, 0.8);
        const Tensor gt = testing::random_mask(rng, {4, 4}, 0.4);
        size_t lesion = gt.data.size();
        for (size_t i = 0; i < gt.data.size(); ++i) {
            if (gt.data[i] == 1.0f) {
                lesion = i;
                break;
            }
        }
        if (lesion == gt.data.size()) continue;
        PixelProbs p0(probs, gt);
        const double before = losses::hybrid_loss(p0, cfg).value;
        probs.data[lesion] += 0.1f;
        PixelProbs p1(probs, gt);
        const double after = losses::hybrid_loss(p1, cfg).value;
        CHECK(after <= before + 1e-12);
    }
}

TEST_CASE("class-imbalance behavior: larger beta raises the FN share of 1-TI") {
    // fixed errors: some false negatives present
    const Tensor pred({4}, {1, 0, 0, 0});
    const Tensor gt({4}, {1, 1, 1, 0});  // FN = 2
    PixelProbs p(pred, gt);
    const double lo = 1.0 - losses::tversky_index(p, 0.5, 0.2, 0.0);
    const double hi = 1.0 - losses::tversky_index(p, 0.5, 0.8, 0.0);
    CHECK(hi > lo);
}

TEST_CASE("loss input validation") {
    const Tensor probs({2}, {0.5f, 0.5f});
    const Tensor bad_shape({3}, {1, 0, 1});
    CHECK_THROWS_AS(PixelProbs(probs, bad_shape), ShapeError);
    const Tensor non_binary({2}, {0.5f, 1.0f});
    CHECK_THROWS_AS(PixelProbs(probs, non_binary), ValidationError);
    const Tensor out_of_range({2}, {1.5f, 0.5f});
    const Tensor gt({2}, {1, 0});
    CHECK_THROWS_AS(PixelProbs(out_of_range, gt), ValidationError);
}
