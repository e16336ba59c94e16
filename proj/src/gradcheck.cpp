#include "covseg/gradcheck.hpp"

#include <cmath>

namespace covseg {

GradCheckReport grad_check(const GradCheckTarget& target, const std::vector<GradCheckInput>& inputs,
                           double step) {
    std::vector<Tensor> work;
    work.reserve(inputs.size());
    for (const auto& in : inputs) work.push_back(in.value);

    GradCheckReport report;

    auto [value, analytic] = target.forward_backward(work);
    if (!std::isfinite(value)) report.finite = false;
    if (analytic.size() != inputs.size()) {
        throw ValidationError("grad_check closure returned " + std::to_string(analytic.size()) +
                              " gradients for " + std::to_string(inputs.size()) + " inputs");
    }

    for (size_t i = 0; i < inputs.size(); ++i) {
        const Tensor& a = analytic[i];
        if (!a.same_shape(work[i])) {
            throw ShapeError("grad_check: gradient for input '" + inputs[i].name +
                             "' has shape " + a.shape_str() + ", expected " + work[i].shape_str());
        }
        if (!a.all_finite()) report.finite = false;

        Tensor numeric(work[i].shape);
        for (size_t j = 0; j < work[i].data.size(); ++j) {
            const float orig = work[i].data[j];
            // Use the actually-representable perturbations.
            const float up = static_cast<float>(static_cast<double>(orig) + step);
            const float dn = static_cast<float>(static_cast<double>(orig) - step);
            work[i].data[j] = up;
            const double f_up = target.forward(work);
            work[i].data[j] = dn;
            const double f_dn = target.forward(work);
            work[i].data[j] = orig;
            if (!std::isfinite(f_up) || !std::isfinite(f_dn)) {
                report.finite = false;
                numeric.data[j] = 0.0f;
                continue;
            }
            const double h = static_cast<double>(up) - static_cast<double>(dn);
            numeric.data[j] = static_cast<float>((f_up - f_dn) / h);
        }

        const double scale = std::max({static_cast<double>(a.max_abs()),
                                       static_cast<double>(numeric.max_abs()), 1e-6});
        double max_abs_diff = 0.0;
        for (size_t j = 0; j < a.data.size(); ++j) {
            max_abs_diff = std::max(max_abs_diff,
                                    std::fabs(static_cast<double>(a.data[j]) - numeric.data[j]));
        }
        const double rel = max_abs_diff / scale;
        report.per_input.push_back({inputs[i].name, rel});
        report.max_rel_error = std::max(report.max_rel_error, rel);
    }
    return report;
}

}  // namespace covseg
