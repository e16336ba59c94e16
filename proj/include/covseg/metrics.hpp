#pragma once

#include <optional>
#include <string>
#include <vector>

#include "covseg/tensor.hpp"

namespace covseg::metrics {

constexpr double kGroupThreshold = 0.015;          // rate < threshold -> Group A
constexpr double kDiscriminateThreshold = 0.005;   // rate > threshold -> infected

struct ConfusionCounts {
    int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    int64_t total() const { return tp + fp + tn + fn; }
};

// Exact pixel counts over two equal-shape binary masks.
ConfusionCounts confusion(const Tensor& pred_mask, const Tensor& gt_mask);

// 2*tp / (2*tp + fp + fn); 1.0 when prediction and ground truth are both empty.
double dsc(const ConfusionCounts& c);

struct SenSpc {
    double sen, spc;
};
// tp/(tp+fn) and tn/(tn+fp); each 1.0 when its denominator is zero.
SenSpc sen_spc(const ConfusionCounts& c);

double mae(const Tensor& pred_mask, const Tensor& gt_mask);

// Lesion area inside the lung divided by lung area.
double infection_rate(const Tensor& mask, const Tensor& lung_mask);

enum class Group { A, B };
Group assign_group(double rate, double threshold = kGroupThreshold);

enum class Verdict { Infected, Clean };
Verdict discriminate(double rate_pred, double threshold = kDiscriminateThreshold);

struct DiscriminationStats {
    double accuracy = 0.0;
    std::optional<double> sensitivity;  // absent when there are no positive labels
    std::optional<double> ppv;          // absent when there are no positive verdicts
};
DiscriminationStats discrimination_stats(const std::vector<Verdict>& verdicts,
                                         const std::vector<Verdict>& labels);

// Sample Pearson correlation; requires length >= 2 and non-zero variance.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

struct SliceScore {
    std::string patient_id, slice_id;
    double dsc = 0.0, sen = 0.0, spc = 0.0, mae = 0.0;
    double infection_rate_gt = 0.0, infection_rate_pred = 0.0;
    Group group = Group::A;
    Verdict verdict = Verdict::Clean;
};

// Linear-interpolation percentile over order statistics, p in [0,100].
double percentile(std::vector<double> values, double p);

enum class AggregateMode { Mean, MedianIqr };

struct MetricSummary {
    double mean = 0.0, stddev = 0.0;       // population std
    double median = 0.0, q25 = 0.0, q75 = 0.0;
};
MetricSummary summarize(const std::vector<double>& values);

struct AggregateReport {
    AggregateMode mode;
    size_t count = 0;
    MetricSummary dsc, sen, spc, mae;
};
AggregateReport aggregate(const std::vector<SliceScore>& scores, AggregateMode mode);

const char* group_name(Group g);
const char* verdict_name(Verdict v);

}  // namespace covseg::metrics
