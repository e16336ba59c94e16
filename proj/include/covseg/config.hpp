#pragma once

#include <iosfwd>
#include <string>

#include "covseg/augment.hpp"
#include "covseg/losses.hpp"
#include "covseg/network.hpp"
#include "covseg/trainer.hpp"

namespace covseg::config {

struct SplitSpec {
    enum class Mode { Ratio, KFold };
    Mode mode = Mode::Ratio;
    double train = 0.6, val = 0.1, test = 0.3;
    int k = 10;
    double kfold_val_fraction = 0.1;
    uint64_t seed = 0;
};

struct Thresholds {
    double binarize = 0.5;
    double group = 0.015;
    double discriminate = 0.005;
    double synthetic_min_rate = 0.01;

    void validate() const;
};

struct Paths {
    std::string train_manifest;
    std::string healthy_manifest;
    std::string output_dir;
    std::string exclusion_list;
};

struct AugmentSection {
    augment::AffineRanges affine;
    int64_t corpus_count = 0;
};

// Structured key-value text with [section] headers mirroring the fields
// below; unknown keys are errors so hyperparameter typos cannot pass
// silently.
struct ExperimentConfig {
    network::ModelConfig model;
    losses::LossConfig loss;
    trainer::TrainSchedule schedule;
    SplitSpec split;
    Thresholds thresholds;
    Paths paths;
    AugmentSection augment;

    static ExperimentConfig load(const std::string& path);
    static ExperimentConfig parse(std::istream& is, const std::string& origin);
    // Canonical snapshot; parsing it back reproduces the config.
    std::string snapshot() const;
    // Existence checks for whichever paths are set.
    void validate_paths() const;
};

}  // namespace covseg::config
