#pragma once

#include "covseg/tensor.hpp"

namespace covseg::losses {

// Hybrid loss hyperparameters: L_total = L_wBCE + kappa * L_FTL with
// TI = (sum P_l*GT_l + s) / (sum P_l*GT_l + alpha*sum P_l*GT_b + beta*sum P_b*GT_l + s)
// and FTL = (1 - TI)^(1/gamma). The binary task has a single lesion class,
// so the class sum in the focal term collapses to one term.
struct LossConfig {
    double alpha = 0.7;  // false-positive weight
    double beta = 0.3;   // false-negative weight
    double gamma = 4.0 / 3.0;
    double kappa = 1.0;  // FTL contribution to the total loss
    enum class WeightMode { Fixed, BatchBalanced };
    WeightMode lesion_weight_mode = WeightMode::BatchBalanced;
    double lesion_weight = 1.0;  // used in Fixed mode; 1 = plain BCE
    double smooth = 1.0;         // added to TI numerator and denominator

    void validate() const;
};

// Lesion-class probabilities and binary ground truth over one pooled batch.
// Background probability and ground truth are the complements.
struct PixelProbs {
    Tensor probs;   // P_l, values in [0,1]
    Tensor target;  // GT_l, values in {0,1}

    PixelProbs(Tensor p, Tensor t);
};

double tversky_index(const PixelProbs& probs, double alpha, double beta, double smooth);
double focal_tversky_loss(const PixelProbs& probs, const LossConfig& cfg);
// Mean over pixels of -[w*GT_l*log(P_l) + GT_b*log(1 - P_l)], probabilities
// clamped to [1e-7, 1-1e-7] before the logs.
double weighted_bce(const PixelProbs& probs, double lesion_weight);
// Batch-balanced weight: (#background pixels) / max(1, #lesion pixels).
double batch_balanced_weight(const Tensor& target);
double resolve_lesion_weight(const PixelProbs& probs, const LossConfig& cfg);

struct LossValueGrad {
    double value;
    Tensor grad;  // d(value)/d(P_l), same shape as probs
};

LossValueGrad weighted_bce_grad(const PixelProbs& probs, double lesion_weight);
LossValueGrad focal_tversky_grad(const PixelProbs& probs, const LossConfig& cfg);
LossValueGrad hybrid_loss(const PixelProbs& probs, const LossConfig& cfg);

}  // namespace covseg::losses
