#pragma once

#include <optional>
#include <string>
#include <vector>

#include "covseg/config.hpp"
#include "covseg/data_io.hpp"
#include "covseg/metrics.hpp"
#include "covseg/network.hpp"
#include "covseg/trainer.hpp"

namespace covseg::harness {

// ---------------------------------------------------------------- gradients

struct OpCheck {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 1e-3;
    bool finite = true;
    bool pass = false;
};

struct GradSuiteResult {
    std::vector<OpCheck> checks;
    bool all_pass = true;
};

// Finite-difference suite over every differentiable primitive and loss.
// `inject_fault` names an op whose analytic gradient is deliberately
// corrupted before comparison (test fixture for the failure path).
GradSuiteResult run_gradient_suite(uint64_t seed = 17, const std::string& inject_fault = "");

// Loss-vs-parameter spot check through the full network on a 1x1x32x32
// input. For each sampled parameter tensor the element with the largest
// analytic gradient is probed; near-zero-derivative coordinates measure
// only 32-bit rounding noise under finite differences.
struct EndToEndCheck {
    double max_rel_error = 0.0;
    int checked = 0;
    bool pass = false;
};
EndToEndCheck end_to_end_grad_check(int sample_count = 20, uint64_t seed = 33,
                                    double tolerance = 5e-3);

// --------------------------------------------------------------- evaluation

struct EvalConfig {
    enum class Mode { Slice, Volume };
    Mode mode = Mode::Slice;
    config::Thresholds thresholds;
    bool mae_lung_only = false;  // default scores the full image
};

struct SliceEvalDetail {
    metrics::SliceScore score;
    int64_t lung_px = 0;
    int64_t lesion_gt_in_lung_px = 0;
    int64_t lesion_pred_in_lung_px = 0;
};

SliceEvalDetail score_slice(const network::ModelParams& params, const data_io::CtSlice& slice,
                            const config::Thresholds& thresholds, bool mae_lung_only = false);

struct PatientRate {
    std::string patient_id;
    double rate_gt = 0.0, rate_pred = 0.0;
    int64_t slices = 0;
};

struct EvalOutcome {
    EvalConfig::Mode mode = EvalConfig::Mode::Slice;
    std::vector<metrics::SliceScore> scores;
    metrics::AggregateReport overall;                          // mean +- std
    std::optional<metrics::AggregateReport> group_a, group_b;  // median (IQR 25/75)
    std::optional<double> pearson;  // gt vs predicted rate over lesion slices
    std::vector<PatientRate> patient_rates;  // volume mode: per-volume sums
    int64_t skipped_no_lung = 0;
    int64_t excluded = 0;
};

EvalOutcome evaluate(const network::ModelParams& params, const data_io::DatasetManifest& manifest,
                     const EvalConfig& cfg, const data_io::ExclusionList* exclusions = nullptr);

// Slice-level infected/clean discrimination over a labeled manifest.
metrics::DiscriminationStats discriminate_manifest(const network::ModelParams& params,
                                                   const data_io::DatasetManifest& manifest,
                                                   const data_io::ExclusionList* exclusions,
                                                   const config::Thresholds& thresholds);

// ------------------------------------------------------------------ reports

std::string format_slice_table(const std::vector<metrics::SliceScore>& scores);
std::string format_eval_summary(const EvalOutcome& outcome);
std::string format_ledger(const network::ParamLedger& ledger);
std::string format_grad_report(const GradSuiteResult& suite);
void write_text_file(const std::string& path, const std::string& content);

// ----------------------------------------------------------------- commands

data_io::DatasetManifest filter_by_patients(const data_io::DatasetManifest& manifest,
                                            const std::vector<std::string>& patients);

// Lesion-bearing, lung-containing slices of the listed patients, normalized.
std::vector<trainer::TrainSample> materialize_samples(const data_io::DatasetManifest& manifest,
                                                      const std::vector<std::string>& patients);

struct FoldRunResult {
    int fold = 0;
    int best_epoch = 0;
    int epochs_run = 0;
    double best_val_loss = 0.0;
    EvalOutcome test_eval;
    std::string checkpoint_path;
};

struct TrainRunResult {
    std::vector<FoldRunResult> folds;
    std::string report_path;
    std::string report_text;
};

// Full training protocol: split/k-fold, per-fold training, per-fold test
// evaluation, checkpoints and a deterministic run report under output_dir.
TrainRunResult run_training(const config::ExperimentConfig& cfg);

struct AugmentRunResult {
    int64_t written = 0;
    int64_t failed_slots = 0;
    std::string manifest_path;
};

// Synthetic corpus generation: composites infected x healthy pairs, filters
// by the configured minimum rate, writes pairs and a provenance manifest.
AugmentRunResult run_augment(const config::ExperimentConfig& cfg);

}  // namespace covseg::harness
