#include "covseg/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "covseg/augment.hpp"
#include "covseg/autograd.hpp"
#include "covseg/gradcheck.hpp"
#include "covseg/losses.hpp"

namespace covseg::harness {

namespace {

// Random tensors for the checks; magnitudes keep activations O(1).
Tensor rand_t(Rng& rng, std::vector<int64_t> shape, double scale = 1.0) {
    return randn(rng, std::move(shape), scale);
}

// ReLU derivative is undefined at 0; keep samples away from the kink so the
// central difference does not straddle it.
Tensor rand_away_from_zero(Rng& rng, std::vector<int64_t> shape, double margin) {
    Tensor t = randn(rng, std::move(shape), 1.0);
    for (float& v : t.data) {
        if (std::fabs(v) < margin) v = v < 0.0f ? static_cast<float>(-margin) : static_cast<float>(margin);
    }
    return t;
}

Tensor rand_binary(Rng& rng, std::vector<int64_t> shape, double p_one = 0.35) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = rng.uniform() < p_one ? 1.0f : 0.0f;
    return t;
}

GradCheckTarget conv_target(const ops::Conv2dSpec& spec) {
    GradCheckTarget t;
    t.forward = [spec](const std::vector<Tensor>& in) {
        return ops::conv2d(in[0], in[1], in[2], spec).sum();
    };
    t.forward_backward = [spec](const std::vector<Tensor>& in) {
        GradTape tape;
        const auto x = tape.leaf(in[0]);
        const auto k = tape.leaf(in[1]);
        const auto b = tape.leaf(in[2]);
        const auto out = taped::conv2d(tape, x, k, b, spec);
        const double value = tape.value(out).sum();
        tape.backward_sum(out);
        return std::make_pair(value, std::vector<Tensor>{tape.grad_or_zeros(x), tape.grad_or_zeros(k),
                                                         tape.grad_or_zeros(b)});
    };
    return t;
}

// A plain sum is blind to batch norm (the normalized values sum to zero per
// channel, so the output sum depends on the shifts alone); a fixed random
// weighting keeps every gradient path observable.
GradCheckTarget bn_target(Tensor weights) {
    GradCheckTarget t;
    const Tensor w = std::move(weights);
    t.forward = [w](const std::vector<Tensor>& in) {
        Tensor rm = Tensor::zeros({in[0].dim(1)});
        Tensor rv = Tensor::full({in[0].dim(1)}, 1.0f);
        const Tensor out = ops::batch_norm_train(in[0], in[1], in[2], rm, rv, ops::kBatchNormEps,
                                                 ops::kBatchNormMomentum, nullptr);
        double acc = 0.0;
        for (size_t i = 0; i < out.data.size(); ++i) acc += static_cast<double>(out.data[i]) * w.data[i];
        return acc;
    };
    t.forward_backward = [w](const std::vector<Tensor>& in) {
        GradTape tape;
        const auto x = tape.leaf(in[0]);
        const auto sc = tape.leaf(in[1]);
        const auto sh = tape.leaf(in[2]);
        Tensor rm = Tensor::zeros({in[0].dim(1)});
        Tensor rv = Tensor::full({in[0].dim(1)}, 1.0f);
        const auto out = taped::batch_norm_train(tape, x, sc, sh, rm, rv);
        double acc = 0.0;
        for (size_t i = 0; i < tape.value(out).data.size(); ++i) {
            acc += static_cast<double>(tape.value(out).data[i]) * w.data[i];
        }
        tape.backward(out, w);
        return std::make_pair(acc, std::vector<Tensor>{tape.grad_or_zeros(x), tape.grad_or_zeros(sc),
                                                       tape.grad_or_zeros(sh)});
    };
    return t;
}

struct SuiteCase {
    std::string name;
    GradCheckTarget target;
    std::vector<GradCheckInput> inputs;
    double tolerance = 1e-3;
};

std::vector<SuiteCase> build_cases(uint64_t seed) {
    std::vector<SuiteCase> cases;
    Rng rng(mix_seed(seed, 0x67726164ULL));

    auto conv_case = [&](const std::string& name, int64_t n, int64_t cin, int64_t cout, int64_t hw,
                         int64_t k, const ops::Conv2dSpec& spec) {
        SuiteCase c;
        c.name = name;
        c.target = conv_target(spec);
        c.inputs = {{"input", rand_t(rng, {n, cin, hw, hw})},
                    {"kernel", rand_t(rng, {cout, cin, k, k}, 0.5)},
                    {"bias", rand_t(rng, {cout}, 0.5)}};
        cases.push_back(std::move(c));
    };
    conv_case("conv2d_s1_d1", 2, 3, 4, 8, 3, {1, 1, ops::Padding::Same, 0});
    conv_case("conv2d_s2", 2, 3, 4, 8, 3, {2, 1, ops::Padding::Same, 0});
    conv_case("conv2d_d2", 1, 2, 3, 8, 3, {1, 2, ops::Padding::Same, 0});
    conv_case("conv2d_d4", 1, 2, 3, 8, 3, {1, 4, ops::Padding::Same, 0});
    conv_case("conv2d_d8", 1, 2, 3, 8, 3, {1, 8, ops::Padding::Same, 0});
    conv_case("conv2d_s2_d2", 1, 2, 3, 8, 3, {2, 2, ops::Padding::Same, 0});
    conv_case("conv2d_1x1", 1, 3, 4, 8, 1, {1, 1, ops::Padding::Same, 0});

    {
        SuiteCase c;
        c.name = "batch_norm_train";
        c.target = bn_target(rand_t(rng, {2, 3, 4, 4}));
        c.inputs = {{"input", rand_t(rng, {2, 3, 4, 4})},
                    {"scale", rand_away_from_zero(rng, {3}, 0.2)},
                    {"shift", rand_t(rng, {3}, 0.5)}};
        cases.push_back(std::move(c));
    }

    {
        SuiteCase c;
        c.name = "relu";
        c.target.forward = [](const std::vector<Tensor>& in) { return ops::relu(in[0]).sum(); };
        c.target.forward_backward = [](const std::vector<Tensor>& in) {
            GradTape tape;
            const auto x = tape.leaf(in[0]);
            const auto out = taped::relu(tape, x);
            const double value = tape.value(out).sum();
            tape.backward_sum(out);
            return std::make_pair(value, std::vector<Tensor>{tape.grad_or_zeros(x)});
        };
        c.inputs = {{"input", rand_away_from_zero(rng, {2, 3, 8, 8}, 0.05)}};
        cases.push_back(std::move(c));
    }

    {
        SuiteCase c;
        c.name = "sigmoid";
        c.target.forward = [](const std::vector<Tensor>& in) { return ops::sigmoid(in[0]).sum(); };
        c.target.forward_backward = [](const std::vector<Tensor>& in) {
            GradTape tape;
            const auto x = tape.leaf(in[0]);
            const auto out = taped::sigmoid(tape, x);
            const double value = tape.value(out).sum();
            tape.backward_sum(out);
            return std::make_pair(value, std::vector<Tensor>{tape.grad_or_zeros(x)});
        };
        c.inputs = {{"input", rand_t(rng, {2, 3, 8, 8})}};
        cases.push_back(std::move(c));
    }

    {
        SuiteCase c;
        c.name = "upsample2x";
        // weighted sum so the backward block-summing is actually exercised
        Tensor w = rand_t(rng, {2, 2, 8, 8});
        c.target.forward = [w](const std::vector<Tensor>& in) {
            const Tensor out = ops::upsample2x(in[0]);
            double acc = 0.0;
            for (size_t i = 0; i < out.data.size(); ++i) acc += static_cast<double>(out.data[i]) * w.data[i];
            return acc;
        };
        c.target.forward_backward = [w](const std::vector<Tensor>& in) {
            GradTape tape;
            const auto x = tape.leaf(in[0]);
            const auto out = taped::upsample2x(tape, x);
            double acc = 0.0;
            for (size_t i = 0; i < tape.value(out).data.size(); ++i) {
                acc += static_cast<double>(tape.value(out).data[i]) * w.data[i];
            }
            tape.backward(out, w);
            return std::make_pair(acc, std::vector<Tensor>{tape.grad_or_zeros(x)});
        };
        c.inputs = {{"input", rand_t(rng, {2, 2, 4, 4})}};
        cases.push_back(std::move(c));
    }

    {
        SuiteCase c;
        c.name = "concat_channels";
        Tensor w = rand_t(rng, {2, 5, 4, 4});
        c.target.forward = [w](const std::vector<Tensor>& in) {
            const Tensor out = ops::concat_channels(in[0], in[1]);
            double acc = 0.0;
            for (size_t i = 0; i < out.data.size(); ++i) acc += static_cast<double>(out.data[i]) * w.data[i];
            return acc;
        };
        c.target.forward_backward = [w](const std::vector<Tensor>& in) {
            GradTape tape;
            const auto a = tape.leaf(in[0]);
            const auto b = tape.leaf(in[1]);
            const auto out = taped::concat_channels(tape, a, b);
            double acc = 0.0;
            for (size_t i = 0; i < tape.value(out).data.size(); ++i) {
                acc += static_cast<double>(tape.value(out).data[i]) * w.data[i];
            }
            tape.backward(out, w);
            return std::make_pair(acc, std::vector<Tensor>{tape.grad_or_zeros(a), tape.grad_or_zeros(b)});
        };
        c.inputs = {{"a", rand_t(rng, {2, 2, 4, 4})}, {"b", rand_t(rng, {2, 3, 4, 4})}};
        cases.push_back(std::move(c));
    }

    {
        SuiteCase c;
        c.name = "add";
        Tensor w = rand_t(rng, {2, 3, 4, 4});
        c.target.forward = [w](const std::vector<Tensor>& in) {
            const Tensor out = ops::add(in[0], in[1]);
            double acc = 0.0;
            for (size_t i = 0; i < out.data.size(); ++i) acc += static_cast<double>(out.data[i]) * w.data[i];
            return acc;
        };
        c.target.forward_backward = [w](const std::vector<Tensor>& in) {
            GradTape tape;
            const auto a = tape.leaf(in[0]);
            const auto b = tape.leaf(in[1]);
            const auto out = taped::add(tape, a, b);
            double acc = 0.0;
            for (size_t i = 0; i < tape.value(out).data.size(); ++i) {
                acc += static_cast<double>(tape.value(out).data[i]) * w.data[i];
            }
            tape.backward(out, w);
            return std::make_pair(acc, std::vector<Tensor>{tape.grad_or_zeros(a), tape.grad_or_zeros(b)});
        };
        c.inputs = {{"a", rand_t(rng, {2, 3, 4, 4})}, {"b", rand_t(rng, {2, 3, 4, 4})}};
        cases.push_back(std::move(c));
    }

    // losses: gradient w.r.t. the lesion probabilities
    const Tensor gt = rand_binary(rng, {2, 1, 8, 8});
    const Tensor probs = rand_uniform(rng, {2, 1, 8, 8}, 0.1, 0.9);
    losses::LossConfig lc;

    auto loss_case = [&](const std::string& name, auto value_fn, auto grad_fn) {
        SuiteCase c;
        c.name = name;
        c.target.forward = [gt, value_fn](const std::vector<Tensor>& in) {
            return value_fn(losses::PixelProbs(in[0], gt));
        };
        c.target.forward_backward = [gt, grad_fn](const std::vector<Tensor>& in) {
            losses::LossValueGrad lv = grad_fn(losses::PixelProbs(in[0], gt));
            return std::make_pair(lv.value, std::vector<Tensor>{std::move(lv.grad)});
        };
        c.inputs = {{"probs", probs}};
        cases.push_back(std::move(c));
    };
    loss_case(
        "weighted_bce",
        [](const losses::PixelProbs& p) { return losses::weighted_bce(p, 3.0); },
        [](const losses::PixelProbs& p) { return losses::weighted_bce_grad(p, 3.0); });
    loss_case(
        "focal_tversky",
        [lc](const losses::PixelProbs& p) { return losses::focal_tversky_loss(p, lc); },
        [lc](const losses::PixelProbs& p) { return losses::focal_tversky_grad(p, lc); });
    loss_case(
        "hybrid_loss",
        [lc](const losses::PixelProbs& p) { return losses::hybrid_loss(p, lc).value; },
        [lc](const losses::PixelProbs& p) { return losses::hybrid_loss(p, lc); });

    return cases;
}

}  // namespace

GradSuiteResult run_gradient_suite(uint64_t seed, const std::string& inject_fault) {
    GradSuiteResult result;
    for (auto& c : build_cases(seed)) {
        GradCheckTarget target = c.target;
        if (c.name == inject_fault) {
            // corrupt the first analytic gradient element before comparison
            auto inner = target.forward_backward;
            target.forward_backward = [inner](const std::vector<Tensor>& in) {
                auto out = inner(in);
                if (!out.second.empty() && out.second[0].numel() > 0) {
                    out.second[0].data[0] += 0.5f * out.second[0].max_abs() + 0.1f;
                }
                return out;
            };
        }
        const GradCheckReport report = grad_check(target, c.inputs);
        OpCheck check;
        check.name = c.name;
        check.max_rel_error = report.max_rel_error;
        check.tolerance = c.tolerance;
        check.finite = report.finite;
        check.pass = report.pass(c.tolerance);
        result.all_pass = result.all_pass && check.pass;
        result.checks.push_back(std::move(check));
    }
    return result;
}

EndToEndCheck end_to_end_grad_check(int sample_count, uint64_t seed, double tolerance) {
    network::ModelConfig mc;
    mc.base_width = 8;
    mc.cpb_enabled = true;
    mc.seed = seed;
    network::ModelParams params = network::build_model(mc);

    Rng rng(mix_seed(seed, 0xe2eULL));
    const Tensor input = rand_t(rng, {1, 1, 32, 32});
    Tensor mask = rand_binary(rng, {1, 1, 32, 32}, 0.25);
    losses::LossConfig lc;
    const double l2 = 1e-4;

    auto loss_of = [&](network::ModelParams& p) {
        network::TrainForward fwd = network::forward_train(p, input, l2);
        losses::PixelProbs probs(fwd.tape.value(fwd.output), mask);
        return losses::hybrid_loss(probs, lc).value + fwd.cpb_l2_penalty;
    };

    // analytic gradients once
    network::TrainForward fwd = network::forward_train(params, input, l2);
    losses::PixelProbs probs(fwd.tape.value(fwd.output), mask);
    losses::LossValueGrad lv = losses::hybrid_loss(probs, lc);
    fwd.tape.backward(fwd.output, std::move(lv.grad));
    network::GradVec grads = network::collect_param_grads(params, fwd);
    network::add_cpb_l2_gradients(params, l2, grads);

    // Eligible parameters need a gradient norm above the 32-bit
    // finite-difference noise floor. Below it sit the analytically flat
    // directions: a convolution bias feeding a batch norm is cancelled by the
    // mean subtraction up to same-padding border leakage.
    std::vector<std::pair<size_t, double>> eligible;  // entry index, |grad|_2
    for (size_t i = 0; i < params.entries.size(); ++i) {
        if (!params.entries[i].trainable || grads[i].numel() == 0) continue;
        double norm = 0.0;
        for (float g : grads[i].data) norm += static_cast<double>(g) * g;
        norm = std::sqrt(norm);
        if (norm >= 0.05) eligible.emplace_back(i, norm);
    }

    // Sample parameter tensors and probe each along its analytic gradient
    // direction: central differences of the loss against the directional
    // derivative implied by the realized (rounded) parameter deltas. The
    // probe passes if any step in a small grid agrees; the loss surface is
    // piecewise smooth (relu kinks), so a single fixed step can straddle a
    // kink while a wrong gradient disagrees at every step.
    Rng pick(mix_seed(seed, 0x7069636bULL));
    std::vector<size_t> order(eligible.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<size_t>(pick.uniform_int(static_cast<int64_t>(i)))]);
    }

    EndToEndCheck result;
    const size_t n_checks = std::min<size_t>(static_cast<size_t>(sample_count), order.size());
    for (size_t s = 0; s < n_checks; ++s) {
        const auto [entry, norm] = eligible[order[s]];
        double best_rel = std::numeric_limits<double>::infinity();
        for (const double h : {5e-5, 1e-4, 2e-4, 5e-4}) {
            network::ModelParams up = params, dn = params;
            double expected = 0.0;
            for (size_t j = 0; j < params.entries[entry].value.data.size(); ++j) {
                const double dir = grads[entry].data[j] / norm;
                const double orig = params.entries[entry].value.data[j];
                const float pu = static_cast<float>(orig + h * dir);
                const float pd = static_cast<float>(orig - h * dir);
                up.entries[entry].value.data[j] = pu;
                dn.entries[entry].value.data[j] = pd;
                expected += static_cast<double>(grads[entry].data[j]) *
                            (static_cast<double>(pu) - static_cast<double>(pd));
            }
            expected /= 2.0 * h;
            const double fd = (loss_of(up) - loss_of(dn)) / (2.0 * h);
            if (!std::isfinite(fd)) continue;
            const double rel =
                std::fabs(fd - expected) / std::max({std::fabs(expected), std::fabs(fd), 1e-6});
            best_rel = std::min(best_rel, rel);
        }
        result.max_rel_error = std::max(result.max_rel_error, best_rel);
        ++result.checked;
    }
    result.pass = result.checked > 0 && result.max_rel_error < tolerance;
    return result;
}

// --------------------------------------------------------------- evaluation

SliceEvalDetail score_slice(const network::ModelParams& params, const data_io::CtSlice& slice,
                            const config::Thresholds& thresholds, bool mae_lung_only) {
    auto normed = data_io::preprocess(slice);
    if (!normed) {
        throw ValidationError("score_slice: slice " + slice.patient_id + "/" + slice.slice_id +
                              " has an empty lung mask");
    }
    const int64_t H = normed->dim(1), W = normed->dim(2);
    Tensor batch({1, 1, H, W});
    batch.data = std::move(normed->data);
    Tensor out;
    try {
        out = network::forward_eval(params, batch);
    } catch (const ShapeError& e) {
        throw ShapeError("slice " + slice.patient_id + "/" + slice.slice_id + ": " + e.what());
    }

    Tensor pred({H, W});
    for (size_t i = 0; i < pred.data.size(); ++i) {
        pred.data[i] = out.data[i] > thresholds.binarize ? 1.0f : 0.0f;
    }
    const Tensor gt = slice.infection_mask ? *slice.infection_mask : Tensor::zeros({H, W});

    SliceEvalDetail d;
    d.score.patient_id = slice.patient_id;
    d.score.slice_id = slice.slice_id;
    const metrics::ConfusionCounts cc = metrics::confusion(pred, gt);
    d.score.dsc = metrics::dsc(cc);
    const metrics::SenSpc ss = metrics::sen_spc(cc);
    d.score.sen = ss.sen;
    d.score.spc = ss.spc;
    if (mae_lung_only) {
        double acc = 0.0;
        int64_t lung = 0;
        for (size_t i = 0; i < pred.data.size(); ++i) {
            if (slice.lung_mask.data[i] == 1.0f) {
                acc += std::fabs(static_cast<double>(pred.data[i]) - gt.data[i]);
                ++lung;
            }
        }
        d.score.mae = lung > 0 ? acc / static_cast<double>(lung) : 0.0;
    } else {
        d.score.mae = metrics::mae(pred, gt);
    }
    d.score.infection_rate_gt = metrics::infection_rate(gt, slice.lung_mask);
    d.score.infection_rate_pred = metrics::infection_rate(pred, slice.lung_mask);
    d.score.group = metrics::assign_group(d.score.infection_rate_gt, thresholds.group);
    d.score.verdict = metrics::discriminate(d.score.infection_rate_pred, thresholds.discriminate);

    for (size_t i = 0; i < slice.lung_mask.data.size(); ++i) {
        if (slice.lung_mask.data[i] == 1.0f) {
            ++d.lung_px;
            if (gt.data[i] == 1.0f) ++d.lesion_gt_in_lung_px;
            if (pred.data[i] == 1.0f) ++d.lesion_pred_in_lung_px;
        }
    }
    return d;
}

EvalOutcome evaluate(const network::ModelParams& params, const data_io::DatasetManifest& manifest,
                     const EvalConfig& cfg, const data_io::ExclusionList* exclusions) {
    EvalOutcome out;
    out.mode = cfg.mode;

    struct PatientAcc {
        int64_t lung = 0, gt = 0, pred = 0, slices = 0;
    };
    std::vector<std::pair<std::string, PatientAcc>> patients;  // manifest order

    for (const auto& entry : manifest.entries) {
        if (exclusions && exclusions->contains(entry.patient_id, entry.slice_id)) {
            ++out.excluded;
            continue;
        }
        const data_io::CtSlice slice = data_io::load_slice(entry);
        if (slice.lung_empty()) {
            ++out.skipped_no_lung;
            continue;
        }
        if (cfg.mode == EvalConfig::Mode::Slice) {
            // slice-level protocol: only lesion-bearing slices enter
            bool lesion = false;
            if (slice.infection_mask) {
                for (float v : slice.infection_mask->data) {
                    if (v == 1.0f) {
                        lesion = true;
                        break;
                    }
                }
            }
            if (!lesion) continue;
        }
        SliceEvalDetail d = score_slice(params, slice, cfg.thresholds, cfg.mae_lung_only);
        out.scores.push_back(d.score);

        if (patients.empty() || patients.back().first != entry.patient_id) {
            patients.push_back({entry.patient_id, {}});
        }
        auto& acc = patients.back().second;
        acc.lung += d.lung_px;
        acc.gt += d.lesion_gt_in_lung_px;
        acc.pred += d.lesion_pred_in_lung_px;
        ++acc.slices;
    }

    if (out.scores.empty()) {
        throw ValidationError("evaluate: no slices matched the requested mode");
    }
    out.overall = metrics::aggregate(out.scores, metrics::AggregateMode::Mean);

    std::vector<metrics::SliceScore> ga, gb;
    for (const auto& s : out.scores) {
        (s.group == metrics::Group::A ? ga : gb).push_back(s);
    }
    if (!ga.empty()) out.group_a = metrics::aggregate(ga, metrics::AggregateMode::MedianIqr);
    if (!gb.empty()) out.group_b = metrics::aggregate(gb, metrics::AggregateMode::MedianIqr);

    std::vector<double> rx, ry;
    for (const auto& s : out.scores) {
        if (s.infection_rate_gt > 0.0) {
            rx.push_back(s.infection_rate_gt);
            ry.push_back(s.infection_rate_pred);
        }
    }
    if (rx.size() >= 2) {
        try {
            out.pearson = metrics::pearson(rx, ry);
        } catch (const DegenerateInputError&) {
            out.pearson = std::nullopt;
        }
    }

    if (cfg.mode == EvalConfig::Mode::Volume) {
        for (const auto& [pid, acc] : patients) {
            PatientRate pr;
            pr.patient_id = pid;
            pr.slices = acc.slices;
            pr.rate_gt = acc.lung > 0 ? static_cast<double>(acc.gt) / static_cast<double>(acc.lung) : 0.0;
            pr.rate_pred = acc.lung > 0 ? static_cast<double>(acc.pred) / static_cast<double>(acc.lung) : 0.0;
            out.patient_rates.push_back(std::move(pr));
        }
    }
    return out;
}

metrics::DiscriminationStats discriminate_manifest(const network::ModelParams& params,
                                                   const data_io::DatasetManifest& manifest,
                                                   const data_io::ExclusionList* exclusions,
                                                   const config::Thresholds& thresholds) {
    std::vector<metrics::Verdict> verdicts, labels;
    for (const auto& entry : manifest.entries) {
        if (exclusions && exclusions->contains(entry.patient_id, entry.slice_id)) continue;
        const data_io::CtSlice slice = data_io::load_slice(entry);
        if (slice.lung_empty()) continue;
        if (!slice.infected_label) {
            throw ValidationError("discriminate: slice " + slice.patient_id + "/" + slice.slice_id +
                                  " has no slice-level label");
        }
        const SliceEvalDetail d = score_slice(params, slice, thresholds, false);
        verdicts.push_back(d.score.verdict);
        labels.push_back(*slice.infected_label ? metrics::Verdict::Infected : metrics::Verdict::Clean);
    }
    return metrics::discrimination_stats(verdicts, labels);
}

// ------------------------------------------------------------------ reports

namespace {

std::string f6(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << v;
    return os.str();
}

std::string summary_line(const char* name, const metrics::MetricSummary& s, bool median_mode) {
    std::ostringstream os;
    if (median_mode) {
        os << name << ": median " << f6(s.median) << " (IQR " << f6(s.q25) << ", " << f6(s.q75) << ")";
    } else {
        os << name << ": " << f6(s.mean) << " +- " << f6(s.stddev);
    }
    return os.str();
}

}  // namespace

std::string format_slice_table(const std::vector<metrics::SliceScore>& scores) {
    std::ostringstream os;
    os << "patient_id\tslice_id\tdsc\tsen\tspc\tmae\trate_gt\trate_pred\tgroup\tverdict\n";
    for (const auto& s : scores) {
        os << s.patient_id << "\t" << s.slice_id << "\t" << f6(s.dsc) << "\t" << f6(s.sen) << "\t"
           << f6(s.spc) << "\t" << f6(s.mae) << "\t" << f6(s.infection_rate_gt) << "\t"
           << f6(s.infection_rate_pred) << "\t" << metrics::group_name(s.group) << "\t"
           << metrics::verdict_name(s.verdict) << "\n";
    }
    return os.str();
}

std::string format_eval_summary(const EvalOutcome& o) {
    std::ostringstream os;
    os << "slices: " << o.scores.size() << " (skipped without lung: " << o.skipped_no_lung
       << ", excluded: " << o.excluded << ")\n";
    os << summary_line("DSC", o.overall.dsc, false) << "\n";
    os << summary_line("SEN", o.overall.sen, false) << "\n";
    os << summary_line("SPC", o.overall.spc, false) << "\n";
    os << summary_line("MAE", o.overall.mae, false) << "\n";
    auto group_block = [&](const char* name, const std::optional<metrics::AggregateReport>& g) {
        if (!g) {
            os << "group " << name << ": empty\n";
            return;
        }
        os << "group " << name << " (" << g->count << " slices)\n";
        os << "  " << summary_line("DSC", g->dsc, true) << "\n";
        os << "  " << summary_line("SEN", g->sen, true) << "\n";
        os << "  " << summary_line("SPC", g->spc, true) << "\n";
        os << "  " << summary_line("MAE", g->mae, true) << "\n";
    };
    group_block("A", o.group_a);
    group_block("B", o.group_b);
    if (o.pearson) {
        os << "pearson(rate_gt, rate_pred) over lesion slices: " << f6(*o.pearson) << "\n";
    } else {
        os << "pearson(rate_gt, rate_pred): not defined for this set\n";
    }
    if (!o.patient_rates.empty()) {
        os << "per-patient volume infection rates:\n";
        for (const auto& p : o.patient_rates) {
            os << "  " << p.patient_id << ": gt " << f6(p.rate_gt) << " pred " << f6(p.rate_pred)
               << " (" << p.slices << " slices)\n";
        }
    }
    return os.str();
}

std::string format_ledger(const network::ParamLedger& ledger) {
    std::ostringstream os;
    os << "layer\tparams\n";
    for (const auto& lc : ledger.per_layer) {
        os << lc.name << "\t" << lc.count << "\n";
    }
    os << "total\t" << ledger.total << "\n";
    return os.str();
}

std::string format_grad_report(const GradSuiteResult& suite) {
    std::ostringstream os;
    os << "op\tmax_rel_error\ttolerance\tresult\n";
    for (const auto& c : suite.checks) {
        std::ostringstream err;
        err << std::scientific << std::setprecision(3) << c.max_rel_error;
        os << c.name << "\t" << err.str() << "\t" << c.tolerance << "\t"
           << (c.pass ? "pass" : (c.finite ? "FAIL" : "FAIL(non-finite)")) << "\n";
    }
    return os.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open file for writing: " + path);
    os << content;
    if (!os) throw DataError("write failed: " + path);
}

// ----------------------------------------------------------------- commands

data_io::DatasetManifest filter_by_patients(const data_io::DatasetManifest& manifest,
                                            const std::vector<std::string>& patients) {
    data_io::DatasetManifest out;
    out.source_tag = manifest.source_tag;
    for (const auto& e : manifest.entries) {
        if (std::find(patients.begin(), patients.end(), e.patient_id) != patients.end()) {
            out.entries.push_back(e);
        }
    }
    return out;
}

std::vector<trainer::TrainSample> materialize_samples(const data_io::DatasetManifest& manifest,
                                                      const std::vector<std::string>& patients) {
    std::vector<trainer::TrainSample> samples;
    for (const auto& entry : manifest.entries) {
        if (std::find(patients.begin(), patients.end(), entry.patient_id) == patients.end()) continue;
        const data_io::CtSlice slice = data_io::load_slice(entry);
        if (!slice.infection_mask) continue;
        bool lesion = false;
        for (float v : slice.infection_mask->data) {
            if (v == 1.0f) {
                lesion = true;
                break;
            }
        }
        if (!lesion) continue;
        auto normed = data_io::preprocess(slice);
        if (!normed) continue;
        trainer::TrainSample s;
        s.patient_id = slice.patient_id;
        s.slice_id = slice.slice_id;
        s.image = std::move(*normed);
        s.mask = *slice.infection_mask;
        samples.push_back(std::move(s));
    }
    return samples;
}

TrainRunResult run_training(const config::ExperimentConfig& cfg) {
    if (cfg.paths.train_manifest.empty()) throw ConfigError("paths.train_manifest is required");
    if (cfg.paths.output_dir.empty()) throw ConfigError("paths.output_dir is required");
    const auto manifest = data_io::DatasetManifest::load(cfg.paths.train_manifest);

    data_io::FoldPlan plan;
    if (cfg.split.mode == config::SplitSpec::Mode::Ratio) {
        plan = data_io::split(manifest, cfg.split.train, cfg.split.val, cfg.split.test, cfg.split.seed);
    } else {
        plan = data_io::kfold(manifest, cfg.split.k, cfg.split.kfold_val_fraction, cfg.split.seed);
    }

    std::filesystem::create_directories(cfg.paths.output_dir);
    write_text_file(cfg.paths.output_dir + "/config_snapshot.cfg", cfg.snapshot());

    // synthetic corpus shares the healthy manifest across folds
    std::vector<data_io::CtSlice> healthy;
    if (cfg.augment.corpus_count > 0 && !cfg.paths.healthy_manifest.empty()) {
        const auto hm = data_io::DatasetManifest::load(cfg.paths.healthy_manifest);
        for (const auto& e : hm.entries) healthy.push_back(data_io::load_slice(e));
    }

    TrainRunResult result;
    std::ostringstream report;
    report << "run report\n==========\n\n[config]\n" << cfg.snapshot() << "\n";

    network::ModelParams ledger_model = network::build_model(cfg.model);
    const network::ParamLedger ledger = network::count_params(ledger_model);
    report << "[parameters]\ntotal trainable: " << ledger.total << "\n";
    if (cfg.model.cpb_enabled) {
        report << "context block subtotal: " << ledger.prefix_total("cpb.") << "\n";
    }
    report << "\n";

    std::vector<double> fold_dsc, fold_sen, fold_spc, fold_mae;
    for (size_t f = 0; f < plan.folds.size(); ++f) {
        const auto& fold = plan.folds[f];
        const std::string fold_dir = cfg.paths.output_dir + "/fold_" + std::to_string(f);
        std::filesystem::create_directories(fold_dir);

        trainer::TrainData data;
        data.train = materialize_samples(manifest, fold.train);
        data.val = materialize_samples(manifest, fold.val);
        if (cfg.augment.corpus_count > 0 && !healthy.empty()) {
            std::vector<data_io::CtSlice> infected;
            for (const auto& e : filter_by_patients(manifest, fold.train).entries) {
                const auto slice = data_io::load_slice(e);
                if (slice.infection_mask && !slice.lung_empty()) infected.push_back(slice);
            }
            const auto corpus = augment::generate_corpus(infected, healthy, cfg.augment.corpus_count,
                                                         mix_seed(cfg.schedule.seed, f),
                                                         cfg.thresholds.synthetic_min_rate);
            for (size_t i = 0; i < corpus.items.size(); ++i) {
                trainer::TrainSample s;
                s.patient_id = "synthetic";
                s.slice_id = "s" + std::to_string(i);
                const auto& pair = corpus.items[i].pair;
                s.image = Tensor({1, pair.image.dim(0), pair.image.dim(1)});
                s.image.data = pair.image.data;
                s.mask = pair.mask;
                data.synthetic.push_back(std::move(s));
            }
        }

        network::ModelConfig mc = cfg.model;
        mc.seed = mix_seed(cfg.model.seed, f);
        network::ModelParams params = network::build_model(mc);

        trainer::TrainSchedule schedule = cfg.schedule;
        const trainer::TrainResult tr = trainer::train(params, data, schedule, cfg.loss);

        const std::string ckpt = fold_dir + "/checkpoint.ckpt";
        network::save_checkpoint(tr.best_params, ckpt);

        std::ostringstream log;
        log << "epoch\ttrain_loss\tval_loss\tseconds\n";
        for (const auto& e : tr.log) {
            log << e.epoch << "\t" << f6(e.train_loss) << "\t" << f6(e.val_loss) << "\t"
                << std::fixed << std::setprecision(3) << e.seconds << "\n";
        }
        write_text_file(fold_dir + "/train_log.txt", log.str());

        EvalConfig ec;
        ec.mode = EvalConfig::Mode::Slice;
        ec.thresholds = cfg.thresholds;
        const auto test_manifest = filter_by_patients(manifest, fold.test);
        const EvalOutcome eval = evaluate(tr.best_params, test_manifest, ec);
        write_text_file(fold_dir + "/metrics.tsv", format_slice_table(eval.scores));
        write_text_file(fold_dir + "/summary.txt", format_eval_summary(eval));

        FoldRunResult fr;
        fr.fold = static_cast<int>(f);
        fr.best_epoch = tr.best_epoch;
        fr.epochs_run = tr.epochs_run;
        fr.best_val_loss = tr.best_epoch >= 1 && static_cast<size_t>(tr.best_epoch) <= tr.log.size()
                               ? tr.log[static_cast<size_t>(tr.best_epoch - 1)].val_loss
                               : 0.0;
        fr.test_eval = eval;
        fr.checkpoint_path = ckpt;

        report << "[fold " << f << "]\n";
        report << "patients: train " << fold.train.size() << ", val " << fold.val.size() << ", test "
               << fold.test.size() << "\n";
        report << "samples: train " << data.train.size() << ", val " << data.val.size()
               << ", synthetic " << data.synthetic.size() << "\n";
        report << "best epoch: " << tr.best_epoch << " of " << tr.epochs_run
               << (tr.diverged ? " (diverged, best checkpoint kept)" : "") << "\n";
        report << "best val loss: " << f6(fr.best_val_loss) << "\n";
        report << format_eval_summary(eval) << "\n";

        fold_dsc.push_back(eval.overall.dsc.mean);
        fold_sen.push_back(eval.overall.sen.mean);
        fold_spc.push_back(eval.overall.spc.mean);
        fold_mae.push_back(eval.overall.mae.mean);
        result.folds.push_back(std::move(fr));
    }

    report << "[aggregate over " << plan.folds.size() << " folds]\n";
    auto agg_line = [&](const char* name, const std::vector<double>& v) {
        const metrics::MetricSummary s = metrics::summarize(v);
        report << name << ": " << f6(s.mean) << " +- " << f6(s.stddev) << "\n";
    };
    agg_line("DSC", fold_dsc);
    agg_line("SEN", fold_sen);
    agg_line("SPC", fold_spc);
    agg_line("MAE", fold_mae);

    result.report_text = report.str();
    result.report_path = cfg.paths.output_dir + "/run_report.txt";
    write_text_file(result.report_path, result.report_text);
    return result;
}

AugmentRunResult run_augment(const config::ExperimentConfig& cfg) {
    if (cfg.paths.train_manifest.empty()) throw ConfigError("paths.train_manifest is required");
    if (cfg.paths.healthy_manifest.empty()) throw ConfigError("paths.healthy_manifest is required");
    if (cfg.paths.output_dir.empty()) throw ConfigError("paths.output_dir is required");
    if (cfg.augment.corpus_count <= 0) throw ConfigError("augment.corpus_count must be > 0");

    const auto infected_manifest = data_io::DatasetManifest::load(cfg.paths.train_manifest);
    const auto healthy_manifest = data_io::DatasetManifest::load(cfg.paths.healthy_manifest);
    std::vector<data_io::CtSlice> infected, healthy;
    for (const auto& e : infected_manifest.entries) {
        const auto s = data_io::load_slice(e);
        if (s.infection_mask && !s.lung_empty()) infected.push_back(s);
    }
    for (const auto& e : healthy_manifest.entries) healthy.push_back(data_io::load_slice(e));

    const auto corpus = augment::generate_corpus(infected, healthy, cfg.augment.corpus_count,
                                                 cfg.schedule.seed, cfg.thresholds.synthetic_min_rate);

    const std::string dir = cfg.paths.output_dir + "/synthetic";
    std::filesystem::create_directories(dir);
    write_text_file(cfg.paths.output_dir + "/config_snapshot.cfg", cfg.snapshot());
    std::ostringstream manifest;
    manifest << "index\timage\tmask\tinfected_ref\thealthy_ref\tseed\trate\n";
    for (size_t i = 0; i < corpus.items.size(); ++i) {
        const auto& item = corpus.items[i];
        char image_name[32], mask_name[32];
        std::snprintf(image_name, sizeof image_name, "image_%05zu.ctt", i);
        std::snprintf(mask_name, sizeof mask_name, "mask_%05zu.ctt", i);
        data_io::write_tensor(dir + "/" + image_name, item.pair.image, data_io::DType::F32);
        data_io::write_tensor(dir + "/" + mask_name, item.pair.mask, data_io::DType::U8);
        manifest << i << "\t" << image_name << "\t" << mask_name << "\t" << item.infected_ref << "\t"
                 << item.healthy_ref << "\t" << item.slot_seed << "\t" << f6(item.pair.infection_rate)
                 << "\n";
    }

    AugmentRunResult r;
    r.written = static_cast<int64_t>(corpus.items.size());
    r.failed_slots = corpus.failed_slots;
    r.manifest_path = dir + "/corpus_manifest.tsv";
    write_text_file(r.manifest_path, manifest.str());
    return r;
}

}  // namespace covseg::harness
