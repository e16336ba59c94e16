#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "covseg/autograd.hpp"
#include "covseg/gradcheck.hpp"
#include "covseg/harness.hpp"
#include "covseg/ops.hpp"

using namespace covseg;

namespace {

GradCheckTarget scaled_sum_target(float factor) {
    GradCheckTarget t;
    t.forward = [factor](const std::vector<Tensor>& in) {
        double acc = 0.0;
        for (float v : in[0].data) acc += static_cast<double>(factor) * v;
        return acc;
    };
    t.forward_backward = [factor](const std::vector<Tensor>& in) {
        double acc = 0.0;
        for (float v : in[0].data) acc += static_cast<double>(factor) * v;
        return std::make_pair(acc, std::vector<Tensor>{Tensor::full(in[0].shape, factor)});
    };
    return t;
}

}  // namespace

TEST_CASE("linear closure sum(2x): analytic gradient 2, error < 1e-4") {
    Rng rng(2);
    const std::vector<GradCheckInput> inputs = {{"x", randn(rng, {3, 5})}};
    const GradCheckReport report = grad_check(scaled_sum_target(2.0f), inputs);
    CHECK(report.finite);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("grad_check flags non-finite closures") {
    GradCheckTarget t;
    t.forward = [](const std::vector<Tensor>&) { return std::numeric_limits<double>::quiet_NaN(); };
    t.forward_backward = [](const std::vector<Tensor>& in) {
        return std::make_pair(std::numeric_limits<double>::quiet_NaN(),
                              std::vector<Tensor>{Tensor::zeros(in[0].shape)});
    };
    Rng rng(3);
    const GradCheckReport report = grad_check(t, {{"x", randn(rng, {2, 2})}});
    CHECK_FALSE(report.finite);
    CHECK_FALSE(report.pass(1e-3));
}

TEST_CASE("relu gradient is 0 below and 1 above the kink") {
    GradTape tape;
    const auto x = tape.leaf(Tensor({2}, {-0.5f, 0.5f}));
    const auto y = taped::relu(tape, x);
    tape.backward_sum(y);
    const Tensor g = tape.grad(x);
    CHECK(g.data[0] == 0.0f);
    CHECK(g.data[1] == 1.0f);
}

TEST_CASE("sigmoid derivative at 0 is 0.25") {
    GradTape tape;
    const auto x = tape.leaf(Tensor({1}, {0.0f}));
    const auto y = taped::sigmoid(tape, x);
    tape.backward_sum(y);
    CHECK(tape.grad(x).data[0] == doctest::Approx(0.25).epsilon(1e-6));

    // finite-difference agreement
    const auto fd = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    const double numeric = (fd(1e-3) - fd(-1e-3)) / 2e-3;
    CHECK(numeric == doctest::Approx(0.25).epsilon(1e-4));
}

TEST_CASE("full primitive and loss gradient suite passes at 1e-3") {
    const harness::GradSuiteResult suite = harness::run_gradient_suite(17);
    for (const auto& c : suite.checks) {
        INFO(c.name, " max_rel_error=", c.max_rel_error);
        CHECK(c.pass);
    }
    CHECK(suite.all_pass);
}

TEST_CASE("injected conv backward fault is caught and named") {
    const harness::GradSuiteResult suite = harness::run_gradient_suite(17, "conv2d_s1_d1");
    bool found = false;
    for (const auto& c : suite.checks) {
        if (c.name == "conv2d_s1_d1") {
            found = true;
            CHECK_FALSE(c.pass);
        } else {
            CHECK(c.pass);
        }
    }
    CHECK(found);
    CHECK_FALSE(suite.all_pass);
}

TEST_CASE("gradient accumulates across fan-out") {
    // y = x + x: dy/dx = 2
    GradTape tape;
    const auto x = tape.leaf(Tensor({2}, {1.0f, -2.0f}));
    const auto y = taped::add(tape, x, x);
    tape.backward_sum(y);
    CHECK(tape.grad(x).data[0] == 2.0f);
    CHECK(tape.grad(x).data[1] == 2.0f);
}

TEST_CASE("tape backward reaches every participating parameter") {
    Rng rng(19);
    GradTape tape;
    const auto x = tape.leaf(randn(rng, {1, 2, 4, 4}));
    const auto k = tape.leaf(randn(rng, {3, 2, 3, 3}));
    const auto b = tape.leaf(randn(rng, {3}));
    const auto y = taped::conv2d(tape, x, k, b, {1, 1, ops::Padding::Same, 0});
    const auto z = taped::relu(tape, y);
    tape.backward_sum(z);
    CHECK(tape.grad(x).same_shape(tape.value(x)));
    CHECK(tape.grad(k).same_shape(tape.value(k)));
    CHECK(tape.grad(b).same_shape(tape.value(b)));
}

TEST_CASE("end-to-end loss-vs-parameter spot check stays under 5e-3") {
    const harness::EndToEndCheck check = harness::end_to_end_grad_check(20, 33);
    INFO("max_rel_error=", check.max_rel_error);
    CHECK(check.checked == 20);
    CHECK(check.pass);
}
