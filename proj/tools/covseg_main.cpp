// covseg: batch harness for the lesion-segmentation stack.
//
// Subcommands: train, eval, discriminate, augment, gradcheck, param-count.
// Exit codes: 0 success, 1 check failure, 2 config error, 3 data error.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "covseg/config.hpp"
#include "covseg/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitConfigError = 2;
constexpr int kExitDataError = 3;

covseg::config::ExperimentConfig load_or_default(const std::string& config_path, uint64_t seed_override,
                                                 bool has_seed) {
    covseg::config::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = covseg::config::ExperimentConfig::load(config_path);
    if (has_seed) {
        cfg.model.seed = seed_override;
        cfg.schedule.seed = seed_override;
        cfg.split.seed = seed_override;
    }
    return cfg;
}

int cmd_train(const covseg::config::ExperimentConfig& cfg) {
    const auto result = covseg::harness::run_training(cfg);
    std::cout << result.report_text;
    std::cout << "report written to " << result.report_path << "\n";
    return kExitOk;
}

int cmd_eval(const covseg::config::ExperimentConfig& cfg, const std::string& checkpoint,
             const std::string& manifest_path, const std::string& mode, const std::string& out_dir) {
    const auto params = covseg::network::load_checkpoint(checkpoint);
    const auto manifest = covseg::data_io::DatasetManifest::load(manifest_path);
    covseg::harness::EvalConfig ec;
    ec.mode = mode == "volume" ? covseg::harness::EvalConfig::Mode::Volume
                               : covseg::harness::EvalConfig::Mode::Slice;
    ec.thresholds = cfg.thresholds;
    std::unique_ptr<covseg::data_io::ExclusionList> excl;
    if (!cfg.paths.exclusion_list.empty()) {
        excl = std::make_unique<covseg::data_io::ExclusionList>(
            covseg::data_io::ExclusionList::load(cfg.paths.exclusion_list));
    }
    const auto outcome = covseg::harness::evaluate(params, manifest, ec, excl.get());
    const std::string summary = covseg::harness::format_eval_summary(outcome);
    std::cout << summary;
    if (!out_dir.empty()) {
        covseg::harness::write_text_file(out_dir + "/metrics.tsv",
                                         covseg::harness::format_slice_table(outcome.scores));
        covseg::harness::write_text_file(out_dir + "/summary.txt", summary);
        covseg::harness::write_text_file(out_dir + "/config_snapshot.cfg", cfg.snapshot());
        std::cout << "reports written to " << out_dir << "\n";
    }
    return kExitOk;
}

int cmd_discriminate(const covseg::config::ExperimentConfig& cfg, const std::string& checkpoint,
                     const std::string& manifest_path) {
    const auto params = covseg::network::load_checkpoint(checkpoint);
    const auto manifest = covseg::data_io::DatasetManifest::load(manifest_path);
    std::unique_ptr<covseg::data_io::ExclusionList> excl;
    if (!cfg.paths.exclusion_list.empty()) {
        excl = std::make_unique<covseg::data_io::ExclusionList>(
            covseg::data_io::ExclusionList::load(cfg.paths.exclusion_list));
    }
    const auto stats = covseg::harness::discriminate_manifest(params, manifest, excl.get(), cfg.thresholds);
    std::printf("accuracy: %.6f\n", stats.accuracy);
    if (stats.sensitivity)
        std::printf("sensitivity: %.6f\n", *stats.sensitivity);
    else
        std::printf("sensitivity: n/a (no positive labels)\n");
    if (stats.ppv)
        std::printf("ppv: %.6f\n", *stats.ppv);
    else
        std::printf("ppv: n/a (no positive verdicts)\n");
    return kExitOk;
}

int cmd_augment(const covseg::config::ExperimentConfig& cfg) {
    const auto result = covseg::harness::run_augment(cfg);
    std::cout << "synthetic pairs written: " << result.written << "\n";
    if (result.failed_slots > 0) {
        std::cout << "warning: " << result.failed_slots
                  << " slot(s) found no pairing above the minimum infection rate\n";
    }
    std::cout << "manifest: " << result.manifest_path << "\n";
    return result.written > 0 ? kExitOk : kExitCheckFailure;
}

int cmd_gradcheck(uint64_t seed, const std::string& inject_fault) {
    const auto suite = covseg::harness::run_gradient_suite(seed, inject_fault);
    std::cout << covseg::harness::format_grad_report(suite);
    const auto e2e = covseg::harness::end_to_end_grad_check(20, seed);
    std::printf("end_to_end\t%.3e\t%g\t%s\n", e2e.max_rel_error, 5e-3, e2e.pass ? "pass" : "FAIL");
    return suite.all_pass && e2e.pass ? kExitOk : kExitCheckFailure;
}

int cmd_param_count(const covseg::config::ExperimentConfig& cfg) {
    const auto model = covseg::network::build_model(cfg.model);
    const auto ledger = covseg::network::count_params(model);
    std::cout << covseg::harness::format_ledger(ledger);
    if (cfg.model.cpb_enabled) {
        std::cout << "context block subtotal\t" << ledger.prefix_total("cpb.") << "\n";
    }
    if (cfg.model.base_width == 32) {
        const double target = cfg.model.cpb_enabled ? 8.75e6 : 6.32e6;
        const double deviation = std::fabs(static_cast<double>(ledger.total) - target) / target;
        std::printf("reference total: %.0f, deviation: %.4f%%\n", target, deviation * 100.0);
        if (deviation > 0.02) {
            std::cout << "FAIL: deviation above 2%\n";
            return kExitCheckFailure;
        }
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"covseg: CT lesion segmentation batch harness"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, manifest_path, out_dir;
    std::string mode = "slice";
    uint64_t seed = 0;
    bool has_seed = false;
    std::string inject_fault;

    app.add_option("--config", config_path, "experiment config file");
    auto* seed_opt = app.add_option("--seed", seed, "override all seeds");

    auto* train = app.add_subcommand("train", "split/k-fold training with per-fold evaluation");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
    eval->add_option("--checkpoint", checkpoint, "weights file")->required();
    eval->add_option("--manifest", manifest_path, "dataset manifest")->required();
    eval->add_option("--mode", mode, "slice|volume")->check(CLI::IsMember({"slice", "volume"}));
    eval->add_option("--out", out_dir, "report output directory");
    auto* disc = app.add_subcommand("discriminate", "infected/clean slice discrimination");
    disc->add_option("--checkpoint", checkpoint, "weights file")->required();
    disc->add_option("--manifest", manifest_path, "labeled dataset manifest")->required();
    auto* aug = app.add_subcommand("augment", "generate a synthetic lesion corpus");
    auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of all primitives and losses");
    grad->add_option("--inject-fault", inject_fault, "corrupt one op's analytic gradient (test fixture)");
    auto* count = app.add_subcommand("param-count", "per-layer parameter ledger");

    CLI11_PARSE(app, argc, argv);
    has_seed = seed_opt->count() > 0;

    try {
        covseg::config::ExperimentConfig cfg = load_or_default(config_path, seed, has_seed);
        if (train->parsed()) return cmd_train(cfg);
        if (eval->parsed()) return cmd_eval(cfg, checkpoint, manifest_path, mode, out_dir);
        if (disc->parsed()) return cmd_discriminate(cfg, checkpoint, manifest_path);
        if (aug->parsed()) return cmd_augment(cfg);
        if (grad->parsed()) return cmd_gradcheck(has_seed ? seed : 17, inject_fault);
        if (count->parsed()) return cmd_param_count(cfg);
    } catch (const covseg::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const covseg::ParamError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const covseg::FormatError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitDataError;
    } catch (const covseg::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitDataError;
    } catch (const covseg::ValidationError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitDataError;
    } catch (const covseg::ShapeError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitDataError;
    } catch (const covseg::DegenerateInputError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitDataError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckFailure;
    }
    return kExitOk;
}
