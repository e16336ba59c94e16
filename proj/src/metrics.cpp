#include "covseg/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace covseg::metrics {

namespace {
void check_mask_pair(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ValidationError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                              b.shape_str());
    }
    if (!a.is_binary() || !b.is_binary()) {
        throw ValidationError(std::string(what) + ": masks must be binary (values 0 or 1)");
    }
}
}  // namespace

ConfusionCounts confusion(const Tensor& pred_mask, const Tensor& gt_mask) {
    check_mask_pair(pred_mask, gt_mask, "confusion");
    ConfusionCounts c;
    for (size_t i = 0; i < pred_mask.data.size(); ++i) {
        const bool p = pred_mask.data[i] == 1.0f;
        const bool g = gt_mask.data[i] == 1.0f;
        if (p && g)
            ++c.tp;
        else if (p && !g)
            ++c.fp;
        else if (!p && g)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

double dsc(const ConfusionCounts& c) {
    const int64_t den = 2 * c.tp + c.fp + c.fn;
    if (den == 0) return 1.0;  // both masks empty
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

SenSpc sen_spc(const ConfusionCounts& c) {
    SenSpc r{};
    r.sen = (c.tp + c.fn) == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    r.spc = (c.tn + c.fp) == 0 ? 1.0 : static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
    return r;
}

double mae(const Tensor& pred_mask, const Tensor& gt_mask) {
    if (!pred_mask.same_shape(gt_mask)) {
        throw ValidationError("mae: shape mismatch " + pred_mask.shape_str() + " vs " +
                              gt_mask.shape_str());
    }
    double acc = 0.0;
    for (size_t i = 0; i < pred_mask.data.size(); ++i) {
        acc += std::fabs(static_cast<double>(pred_mask.data[i]) - gt_mask.data[i]);
    }
    return acc / static_cast<double>(pred_mask.numel());
}

double infection_rate(const Tensor& mask, const Tensor& lung_mask) {
    check_mask_pair(mask, lung_mask, "infection_rate");
    int64_t lung = 0, lesion_in_lung = 0;
    for (size_t i = 0; i < mask.data.size(); ++i) {
        if (lung_mask.data[i] == 1.0f) {
            ++lung;
            if (mask.data[i] == 1.0f) ++lesion_in_lung;
        }
    }
    if (lung == 0) throw DegenerateInputError("infection_rate: empty lung mask");
    return static_cast<double>(lesion_in_lung) / static_cast<double>(lung);
}

Group assign_group(double rate, double threshold) {
    return rate < threshold ? Group::A : Group::B;
}

Verdict discriminate(double rate_pred, double threshold) {
    return rate_pred > threshold ? Verdict::Infected : Verdict::Clean;
}

DiscriminationStats discrimination_stats(const std::vector<Verdict>& verdicts,
                                         const std::vector<Verdict>& labels) {
    if (verdicts.size() != labels.size()) {
        throw ValidationError("discrimination_stats: verdict/label length mismatch");
    }
    if (verdicts.empty()) throw ValidationError("discrimination_stats: empty input");
    int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (size_t i = 0; i < verdicts.size(); ++i) {
        const bool p = verdicts[i] == Verdict::Infected;
        const bool g = labels[i] == Verdict::Infected;
        if (p && g)
            ++tp;
        else if (p && !g)
            ++fp;
        else if (!p && g)
            ++fn;
        else
            ++tn;
    }
    DiscriminationStats s;
    s.accuracy = static_cast<double>(tp + tn) / static_cast<double>(verdicts.size());
    if (tp + fn > 0) s.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (tp + fp > 0) s.ppv = static_cast<double>(tp) / static_cast<double>(tp + fp);
    return s;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw ValidationError("pearson: length mismatch");
    if (x.size() < 2) throw ValidationError("pearson: need at least two samples");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw DegenerateInputError("pearson: zero variance input");
    return sxy / std::sqrt(sxx * syy);
}

double percentile(std::vector<double> values, double p) {
    if (values.empty()) throw ValidationError("percentile: empty input");
    std::sort(values.begin(), values.end());
    const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = static_cast<size_t>(std::ceil(pos));
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

MetricSummary summarize(const std::vector<double>& values) {
    if (values.empty()) throw ValidationError("summarize: empty input");
    MetricSummary s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(values.size()));
    s.median = percentile(values, 50.0);
    s.q25 = percentile(values, 25.0);
    s.q75 = percentile(values, 75.0);
    return s;
}

AggregateReport aggregate(const std::vector<SliceScore>& scores, AggregateMode mode) {
    if (scores.empty()) throw ValidationError("aggregate: empty score list");
    auto col = [&](double SliceScore::* field) {
        std::vector<double> v;
        v.reserve(scores.size());
        for (const auto& s : scores) v.push_back(s.*field);
        return v;
    };
    AggregateReport r;
    r.mode = mode;
    r.count = scores.size();
    r.dsc = summarize(col(&SliceScore::dsc));
    r.sen = summarize(col(&SliceScore::sen));
    r.spc = summarize(col(&SliceScore::spc));
    r.mae = summarize(col(&SliceScore::mae));
    return r;
}

const char* group_name(Group g) { return g == Group::A ? "A" : "B"; }
const char* verdict_name(Verdict v) { return v == Verdict::Infected ? "infected" : "clean"; }

}  // namespace covseg::metrics
