#pragma once

#include <string>
#include <vector>

#include "covseg/augment.hpp"
#include "covseg/losses.hpp"
#include "covseg/network.hpp"
#include "covseg/tensor.hpp"

namespace covseg::trainer {

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam over the trainable entries of a ModelParams.
class AdamState {
public:
    AdamState(const network::ModelParams& params, AdamConfig cfg);
    // Applies one update; throws ValidationError naming the layer on a
    // non-finite gradient, leaving parameters untouched.
    void step(network::ModelParams& params, const network::GradVec& grads);
    int64_t step_count() const { return step_count_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;  // aligned with params.entries
    int64_t step_count_ = 0;
};

struct TrainSchedule {
    int max_epochs = 100;
    int patience = 10;
    int batch_size = 4;
    uint64_t seed = 0;
    bool augmentation = true;
    double l2_coefficient = 1e-4;  // context-block kernel penalty
    AdamConfig adam;
    double min_improvement = 1e-6;  // "does not decrease" tolerance
    augment::AffineRanges affine;

    void validate() const;
};

// Stops after `patience` consecutive epochs without a strict improvement of
// at least min_improvement over the best seen validation loss.
class EarlyStopping {
public:
    EarlyStopping(int patience, double min_improvement);
    bool update(double val_loss);  // true when the epoch improved the best
    bool should_stop() const { return stall_ >= patience_; }
    int best_epoch() const { return best_epoch_; }
    double best() const { return best_; }

private:
    int patience_;
    double min_improvement_;
    double best_;
    int best_epoch_ = 0;
    int epoch_ = 0;
    int stall_ = 0;
};

struct TrainSample {
    std::string patient_id, slice_id;
    Tensor image;  // (1,H,W) normalized
    Tensor mask;   // (H,W) binary
};

struct TrainData {
    std::vector<TrainSample> train;
    std::vector<TrainSample> val;
    // Optional synthetic corpus concatenated with the training set; each
    // sample enters every epoch exactly once.
    std::vector<TrainSample> synthetic;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    network::ModelParams best_params;
    int best_epoch = 0;
    int epochs_run = 0;
    std::vector<EpochLog> log;
    bool diverged = false;
};

TrainResult train(network::ModelParams& params, const TrainData& data, const TrainSchedule& schedule,
                  const losses::LossConfig& loss_cfg);

struct ProbeResult {
    double dsc = 0.0;
    std::vector<double> step_losses;
    int steps_run = 0;
};

// Sanity check of the learning loop: fit a tiny set without augmentation and
// report the in-sample mean DSC. May stop before max_steps once the fit is
// clearly past the target.
ProbeResult overfit_probe(network::ModelParams& params, const std::vector<TrainSample>& tiny_set,
                          int max_steps, const AdamConfig& adam_cfg,
                          const losses::LossConfig& loss_cfg, double dsc_early_exit = 0.98);

// Mean per-slice DSC of the model on a sample set (eval mode, threshold 0.5).
double mean_dsc(const network::ModelParams& params, const std::vector<TrainSample>& samples,
                double binarize_threshold = 0.5);

}  // namespace covseg::trainer
