#include "covseg/losses.hpp"

#include <cmath>

namespace covseg::losses {

namespace {
constexpr double kProbEps = 1e-7;

double clamp_prob(double p) {
    if (p < kProbEps) return kProbEps;
    if (p > 1.0 - kProbEps) return 1.0 - kProbEps;
    return p;
}
}  // namespace

void LossConfig::validate() const {
    if (gamma < 1.0 || gamma > 3.0) throw ParamError("loss gamma must lie in [1,3]");
    if (kappa < 0.0) throw ParamError("loss kappa must be >= 0");
    if (smooth <= 0.0) throw ParamError("loss smooth must be > 0");
    if (alpha < 0.0 || beta < 0.0) throw ParamError("loss alpha/beta must be >= 0");
    if (lesion_weight < 1.0) throw ParamError("lesion_weight must be >= 1");
}

PixelProbs::PixelProbs(Tensor p, Tensor t) : probs(std::move(p)), target(std::move(t)) {
    if (!probs.same_shape(target)) {
        throw ShapeError("probability/target shape mismatch: " + probs.shape_str() + " vs " +
                         target.shape_str());
    }
    if (!target.is_binary()) throw ValidationError("loss target mask must be binary");
    for (float v : probs.data) {
        if (!(v >= 0.0f && v <= 1.0f)) {
            throw ValidationError("lesion probabilities must lie in [0,1]");
        }
    }
}

namespace {

struct TvSums {
    double tp = 0.0, fp = 0.0, fn = 0.0;
};

TvSums tversky_sums(const PixelProbs& probs) {
    TvSums s;
    for (size_t i = 0; i < probs.probs.data.size(); ++i) {
        const double p = probs.probs.data[i];
        const double g = probs.target.data[i];
        s.tp += p * g;
        s.fp += p * (1.0 - g);
        s.fn += (1.0 - p) * g;
    }
    return s;
}

}  // namespace

double tversky_index(const PixelProbs& probs, double alpha, double beta, double smooth) {
    const TvSums s = tversky_sums(probs);
    const double num = s.tp + smooth;
    const double den = s.tp + alpha * s.fp + beta * s.fn + smooth;
    if (den == 0.0) return 1.0;  // empty masks with smooth = 0
    return num / den;
}

double focal_tversky_loss(const PixelProbs& probs, const LossConfig& cfg) {
    cfg.validate();
    const double ti = tversky_index(probs, cfg.alpha, cfg.beta, cfg.smooth);
    const double base = std::max(1.0 - ti, 0.0);
    return std::pow(base, 1.0 / cfg.gamma);
}

double batch_balanced_weight(const Tensor& target) {
    int64_t lesion = 0;
    for (float v : target.data) {
        if (v == 1.0f) ++lesion;
    }
    const int64_t background = target.numel() - lesion;
    return static_cast<double>(background) / static_cast<double>(std::max<int64_t>(1, lesion));
}

double resolve_lesion_weight(const PixelProbs& probs, const LossConfig& cfg) {
    if (cfg.lesion_weight_mode == LossConfig::WeightMode::BatchBalanced) {
        return batch_balanced_weight(probs.target);
    }
    return cfg.lesion_weight;
}

double weighted_bce(const PixelProbs& probs, double lesion_weight) {
    double acc = 0.0;
    for (size_t i = 0; i < probs.probs.data.size(); ++i) {
        const double p = clamp_prob(probs.probs.data[i]);
        const double g = probs.target.data[i];
        acc += -(lesion_weight * g * std::log(p) + (1.0 - g) * std::log(1.0 - p));
    }
    return acc / static_cast<double>(probs.probs.numel());
}

LossValueGrad weighted_bce_grad(const PixelProbs& probs, double lesion_weight) {
    const double inv_m = 1.0 / static_cast<double>(probs.probs.numel());
    LossValueGrad out{0.0, Tensor(probs.probs.shape)};
    double acc = 0.0;
    for (size_t i = 0; i < probs.probs.data.size(); ++i) {
        const double raw = probs.probs.data[i];
        const double p = clamp_prob(raw);
        const double g = probs.target.data[i];
        acc += -(lesion_weight * g * std::log(p) + (1.0 - g) * std::log(1.0 - p));
        // Zero gradient inside the clamped region, where the loss is flat in p.
        const bool clamped = raw < kProbEps || raw > 1.0 - kProbEps;
        out.grad.data[i] = clamped ? 0.0f
                                   : static_cast<float>(-(lesion_weight * g / p - (1.0 - g) / (1.0 - p)) * inv_m);
    }
    out.value = acc * inv_m;
    return out;
}

LossValueGrad focal_tversky_grad(const PixelProbs& probs, const LossConfig& cfg) {
    cfg.validate();
    const TvSums s = tversky_sums(probs);
    const double num = s.tp + cfg.smooth;
    const double den = s.tp + cfg.alpha * s.fp + cfg.beta * s.fn + cfg.smooth;
    const double ti = num / den;
    const double base = std::max(1.0 - ti, 0.0);
    const double inv_gamma = 1.0 / cfg.gamma;

    LossValueGrad out{std::pow(base, inv_gamma), Tensor(probs.probs.shape)};
    // d(FTL)/d(TI); at a perfect score the loss is exactly 0 and we take 0
    // as the (sub)gradient rather than the unbounded limit.
    const double dftl_dti = base > 0.0 ? -inv_gamma * std::pow(base, inv_gamma - 1.0) : 0.0;
    const double den_sq = den * den;
    for (size_t i = 0; i < probs.probs.data.size(); ++i) {
        const double g = probs.target.data[i];
        // dTI/dp_i with dnum/dp = g, dden/dp = g + alpha(1-g) - beta*g
        const double dden = g + cfg.alpha * (1.0 - g) - cfg.beta * g;
        const double dti = (g * den - num * dden) / den_sq;
        out.grad.data[i] = static_cast<float>(dftl_dti * dti);
    }
    return out;
}

LossValueGrad hybrid_loss(const PixelProbs& probs, const LossConfig& cfg) {
    cfg.validate();
    const double w = resolve_lesion_weight(probs, cfg);
    LossValueGrad bce = weighted_bce_grad(probs, w);
    if (cfg.kappa == 0.0) return bce;  // degenerate mix: exactly the w-BCE
    LossValueGrad ftl = focal_tversky_grad(probs, cfg);
    LossValueGrad out{bce.value + cfg.kappa * ftl.value, std::move(bce.grad)};
    for (size_t i = 0; i < out.grad.data.size(); ++i) {
        out.grad.data[i] += static_cast<float>(cfg.kappa) * ftl.grad.data[i];
    }
    return out;
}

}  // namespace covseg::losses
