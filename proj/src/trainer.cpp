#include "covseg/trainer.hpp"

#include <chrono>
#include <cmath>

#include "covseg/metrics.hpp"

namespace covseg::trainer {

AdamState::AdamState(const network::ModelParams& params, AdamConfig cfg) : cfg_(cfg) {
    m_.resize(params.entries.size());
    v_.resize(params.entries.size());
    for (size_t i = 0; i < params.entries.size(); ++i) {
        if (params.entries[i].trainable) {
            m_[i] = Tensor::zeros(params.entries[i].value.shape);
            v_[i] = Tensor::zeros(params.entries[i].value.shape);
        }
    }
}

void AdamState::step(network::ModelParams& params, const network::GradVec& grads) {
    if (grads.size() != params.entries.size()) {
        throw ValidationError("adam_step: gradient vector misaligned with parameters");
    }
    for (size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].numel() == 0) continue;
        if (!params.entries[i].trainable) {
            throw ValidationError("adam_step: gradient supplied for non-trainable entry '" +
                                  params.entries[i].name + "'");
        }
        if (!grads[i].same_shape(params.entries[i].value)) {
            throw ValidationError("adam_step: gradient shape mismatch for '" + params.entries[i].name + "'");
        }
        if (!grads[i].all_finite()) {
            throw ValidationError("adam_step: non-finite gradient in layer '" + params.entries[i].name + "'");
        }
    }

    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].numel() == 0) continue;
        Tensor& p = params.entries[i].value;
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (size_t j = 0; j < p.data.size(); ++j) {
            const double g = grads[i].data[j];
            const double mj = cfg_.beta1 * m.data[j] + (1.0 - cfg_.beta1) * g;
            const double vj = cfg_.beta2 * v.data[j] + (1.0 - cfg_.beta2) * g * g;
            m.data[j] = static_cast<float>(mj);
            v.data[j] = static_cast<float>(vj);
            const double update = cfg_.lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
            p.data[j] = static_cast<float>(p.data[j] - update);
        }
    }
}

void TrainSchedule::validate() const {
    if (max_epochs < 1) throw ParamError("max_epochs must be >= 1");
    if (patience < 1 || patience > max_epochs) throw ParamError("patience must lie in [1, max_epochs]");
    if (batch_size < 1) throw ParamError("batch_size must be >= 1");
    if (l2_coefficient < 0.0) throw ParamError("l2_coefficient must be >= 0");
}

EarlyStopping::EarlyStopping(int patience, double min_improvement)
    : patience_(patience),
      min_improvement_(min_improvement),
      best_(std::numeric_limits<double>::infinity()) {}

bool EarlyStopping::update(double val_loss) {
    ++epoch_;
    if (val_loss < best_ - min_improvement_) {
        best_ = val_loss;
        best_epoch_ = epoch_;
        stall_ = 0;
        return true;
    }
    ++stall_;
    return false;
}

namespace {

Tensor pack_batch(const std::vector<const TrainSample*>& samples) {
    const int64_t H = samples[0]->image.dim(1), W = samples[0]->image.dim(2);
    Tensor batch({static_cast<int64_t>(samples.size()), 1, H, W});
    float* dst = batch.data.data();
    for (const TrainSample* s : samples) {
        if (s->image.dim(1) != H || s->image.dim(2) != W) {
            throw ShapeError("batch packs slices of different sizes (" + s->patient_id + "/" +
                             s->slice_id + ")");
        }
        std::copy(s->image.data.begin(), s->image.data.end(), dst);
        dst += H * W;
    }
    return batch;
}

Tensor pack_masks(const std::vector<const TrainSample*>& samples) {
    const int64_t H = samples[0]->mask.dim(0), W = samples[0]->mask.dim(1);
    Tensor masks({static_cast<int64_t>(samples.size()), 1, H, W});
    float* dst = masks.data.data();
    for (const TrainSample* s : samples) {
        std::copy(s->mask.data.begin(), s->mask.data.end(), dst);
        dst += H * W;
    }
    return masks;
}

// One optimizer step over a packed batch; returns the training loss
// (hybrid + context-block penalty), or NaN on a diverged forward pass.
double train_step(network::ModelParams& params, AdamState& adam, const Tensor& batch,
                  const Tensor& masks, const TrainSchedule& schedule,
                  const losses::LossConfig& loss_cfg) {
    network::TrainForward fwd = network::forward_train(params, batch, schedule.l2_coefficient);
    if (!fwd.tape.value(fwd.output).all_finite()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    losses::PixelProbs probs(fwd.tape.value(fwd.output), masks);
    losses::LossValueGrad lv = losses::hybrid_loss(probs, loss_cfg);
    const double total = lv.value + fwd.cpb_l2_penalty;
    if (!std::isfinite(total)) return total;  // caller handles divergence
    fwd.tape.backward(fwd.output, std::move(lv.grad));
    network::GradVec grads = network::collect_param_grads(params, fwd);
    network::add_cpb_l2_gradients(params, schedule.l2_coefficient, grads);
    for (const Tensor& g : grads) {
        if (g.numel() > 0 && !g.all_finite()) {
            return std::numeric_limits<double>::quiet_NaN();  // blown-up backward
        }
    }
    adam.step(params, grads);
    return total;
}

// Monitored with the batch's own normalization statistics so it reflects the
// current parameters alone; running statistics keep converging during
// training and would drift the monitor even under a frozen optimizer.
double validation_loss(const network::ModelParams& params, const std::vector<TrainSample>& val,
                       int batch_size, const losses::LossConfig& loss_cfg) {
    double loss_sum = 0.0;
    int64_t sample_count = 0;
    for (size_t start = 0; start < val.size(); start += static_cast<size_t>(batch_size)) {
        std::vector<const TrainSample*> chunk;
        for (size_t i = start; i < std::min(val.size(), start + static_cast<size_t>(batch_size)); ++i) {
            chunk.push_back(&val[i]);
        }
        const Tensor batch = pack_batch(chunk);
        const Tensor masks = pack_masks(chunk);
        const Tensor out = network::forward_batchstats(params, batch);
        losses::PixelProbs probs(out, masks);
        losses::LossValueGrad lv = losses::hybrid_loss(probs, loss_cfg);
        loss_sum += lv.value * static_cast<double>(chunk.size());
        sample_count += static_cast<int64_t>(chunk.size());
    }
    return loss_sum / static_cast<double>(sample_count);
}

}  // namespace

TrainResult train(network::ModelParams& params, const TrainData& data, const TrainSchedule& schedule,
                  const losses::LossConfig& loss_cfg) {
    schedule.validate();
    loss_cfg.validate();
    if (data.train.empty() || data.val.empty()) {
        throw ValidationError("train: training and validation sets must be non-empty");
    }

    AdamState adam(params, schedule.adam);
    EarlyStopping stopper(schedule.patience, schedule.min_improvement);
    TrainResult result;
    result.best_params = params;

    // epoch sample list: every real and synthetic sample exactly once
    const size_t n_real = data.train.size();
    const size_t n_total = n_real + data.synthetic.size();
    std::vector<size_t> order(n_total);

    for (int epoch = 1; epoch <= schedule.max_epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        for (size_t i = 0; i < n_total; ++i) order[i] = i;
        Rng shuffle_rng(mix_seed(schedule.seed, 0x65706f6368ULL, static_cast<uint64_t>(epoch)));
        for (size_t i = n_total; i > 1; --i) {
            const size_t j = static_cast<size_t>(shuffle_rng.uniform_int(static_cast<int64_t>(i)));
            std::swap(order[i - 1], order[j]);
        }

        // consumption bookkeeping: a corpus sample may not repeat in an epoch
        std::vector<uint8_t> consumed(data.synthetic.size(), 0);

        double loss_sum = 0.0;
        int64_t seen = 0;
        bool diverged = false;
        std::vector<TrainSample> augmented;  // per-batch storage
        for (size_t start = 0; start < n_total && !diverged; start += static_cast<size_t>(schedule.batch_size)) {
            std::vector<const TrainSample*> chunk;
            augmented.clear();
            augmented.reserve(static_cast<size_t>(schedule.batch_size));
            for (size_t i = start; i < std::min(n_total, start + static_cast<size_t>(schedule.batch_size)); ++i) {
                const size_t idx = order[i];
                const TrainSample* s;
                if (idx < n_real) {
                    s = &data.train[idx];
                } else {
                    const size_t sidx = idx - n_real;
                    if (consumed[sidx]) {
                        throw ValidationError("synthetic sample consumed twice in one epoch");
                    }
                    consumed[sidx] = 1;
                    s = &data.synthetic[sidx];
                }
                if (schedule.augmentation) {
                    Rng arng(mix_seed(schedule.seed, static_cast<uint64_t>(epoch), idx));
                    const augment::AffineParams ap = augment::sample_affine(schedule.affine, arng);
                    Tensor img2d({s->image.dim(1), s->image.dim(2)});
                    img2d.data = s->image.data;
                    auto [ai, am] = augment::affine_augment(img2d, s->mask, ap);
                    TrainSample t;
                    t.patient_id = s->patient_id;
                    t.slice_id = s->slice_id;
                    t.image = Tensor({1, ai.dim(0), ai.dim(1)});
                    t.image.data = std::move(ai.data);
                    t.mask = std::move(am);
                    augmented.push_back(std::move(t));
                    chunk.push_back(&augmented.back());
                } else {
                    chunk.push_back(s);
                }
            }
            const Tensor batch = pack_batch(chunk);
            const Tensor masks = pack_masks(chunk);
            const double loss = train_step(params, adam, batch, masks, schedule, loss_cfg);
            if (!std::isfinite(loss)) {
                diverged = true;
                break;
            }
            loss_sum += loss * static_cast<double>(chunk.size());
            seen += static_cast<int64_t>(chunk.size());
        }

        if (diverged) {
            result.diverged = true;
            result.epochs_run = epoch;
            break;
        }

        const double train_loss = loss_sum / static_cast<double>(seen);
        const double val_loss = validation_loss(params, data.val, schedule.batch_size, loss_cfg);
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
        result.log.push_back(EpochLog{epoch, train_loss, val_loss, seconds});
        result.epochs_run = epoch;

        if (stopper.update(val_loss)) {
            result.best_params = params;  // snapshot of the best-validation epoch
        }
        if (stopper.should_stop()) break;
    }
    result.best_epoch = stopper.best_epoch();
    return result;
}

double mean_dsc(const network::ModelParams& params, const std::vector<TrainSample>& samples,
                double binarize_threshold) {
    if (samples.empty()) throw ValidationError("mean_dsc: empty sample set");
    double acc = 0.0;
    for (const auto& s : samples) {
        Tensor batch({1, 1, s.image.dim(1), s.image.dim(2)});
        batch.data = s.image.data;
        const Tensor out = network::forward_eval(params, batch);
        Tensor pred({s.mask.dim(0), s.mask.dim(1)});
        for (size_t i = 0; i < pred.data.size(); ++i) {
            pred.data[i] = out.data[i] > binarize_threshold ? 1.0f : 0.0f;
        }
        acc += metrics::dsc(metrics::confusion(pred, s.mask));
    }
    return acc / static_cast<double>(samples.size());
}

ProbeResult overfit_probe(network::ModelParams& params, const std::vector<TrainSample>& tiny_set,
                          int max_steps, const AdamConfig& adam_cfg,
                          const losses::LossConfig& loss_cfg, double dsc_early_exit) {
    if (tiny_set.empty()) throw ValidationError("overfit_probe: empty sample set");
    for (const auto& s : tiny_set) {
        bool any = false;
        for (float v : s.mask.data) {
            if (v == 1.0f) {
                any = true;
                break;
            }
        }
        if (!any) {
            throw ValidationError("overfit_probe: mask of " + s.patient_id + "/" + s.slice_id +
                                  " is empty");
        }
    }

    std::vector<const TrainSample*> all;
    for (const auto& s : tiny_set) all.push_back(&s);
    const Tensor batch = pack_batch(all);
    const Tensor masks = pack_masks(all);

    AdamState adam(params, adam_cfg);
    TrainSchedule step_cfg;  // only l2 coefficient matters below
    step_cfg.l2_coefficient = 0.0;
    step_cfg.adam = adam_cfg;

    ProbeResult result;
    for (int step = 0; step < max_steps; ++step) {
        const double loss = train_step(params, adam, batch, masks, step_cfg, loss_cfg);
        result.step_losses.push_back(loss);
        result.steps_run = step + 1;
        if (!std::isfinite(loss)) break;
        // cheap convergence exit once the fit is clearly past the target
        if (step >= 49 && (step + 1) % 25 == 0) {
            if (mean_dsc(params, tiny_set) >= dsc_early_exit) break;
        }
    }
    result.dsc = mean_dsc(params, tiny_set);
    return result;
}

}  // namespace covseg::trainer
