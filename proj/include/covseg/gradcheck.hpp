#pragma once

#include <functional>
#include <string>
#include <vector>

#include "covseg/tensor.hpp"

namespace covseg {

// Scalar-valued closure (sum-reduced) and its analytic-gradient companion.
struct GradCheckTarget {
    // Returns the scalar f(inputs).
    std::function<double(const std::vector<Tensor>&)> forward;
    // Returns f(inputs) together with df/d(input_i) for every input, in order.
    std::function<std::pair<double, std::vector<Tensor>>(const std::vector<Tensor>&)> forward_backward;
};

struct GradCheckInput {
    std::string name;
    Tensor value;
};

struct GradCheckEntry {
    std::string input_name;
    double max_rel_error;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> per_input;
    double max_rel_error = 0.0;
    bool finite = true;  // false when any evaluation produced NaN/Inf

    bool pass(double tolerance) const { return finite && max_rel_error < tolerance; }
};

// Central finite differences with step 1e-3 on 32-bit inputs. Per input the
// reported figure is max_i |a_i - n_i| / max(|a|_inf, |n|_inf, 1e-6): the
// deviation is normalized by the gradient's magnitude so elements whose true
// derivative is near zero do not turn 32-bit rounding noise into spurious
// relative errors.
GradCheckReport grad_check(const GradCheckTarget& target, const std::vector<GradCheckInput>& inputs,
                           double step = 1e-3);

}  // namespace covseg
