#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "covseg/config.hpp"
#include "covseg/data_io.hpp"
#include "covseg/harness.hpp"
#include "test_support.hpp"

using namespace covseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("covseg_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

int run_cli(const std::string& args) {
    const std::string cmd = std::string(COVSEG_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

// Toy dataset: `n_patients` patients x 3 slices (two infected, one clean),
// lungs everywhere, 16x16.
std::string build_dataset(const TempDir& dir, int n_patients, bool labels) {
    Rng rng(4242);
    std::ostringstream m;
    for (int p = 0; p < n_patients; ++p) {
        for (int s = 0; s < 3; ++s) {
            const std::string pid = "p" + std::to_string(p);
            const std::string sid = "s" + std::to_string(s);
            Tensor image = rand_uniform(rng, {16, 16}, -500.0, 500.0);
            Tensor lung = Tensor::zeros({16, 16});
            for (int64_t y = 1; y < 15; ++y) {
                for (int64_t x = 1; x < 15; ++x) lung.at2(y, x) = 1.0f;
            }
            data_io::write_tensor(dir.file(pid + sid + "_img.ctt"), image, data_io::DType::F32);
            data_io::write_tensor(dir.file(pid + sid + "_lung.ctt"), lung, data_io::DType::U8);
            std::string inf = "-", label = labels ? "0" : "-";
            if (s < 2) {
                Tensor lesion = Tensor::zeros({16, 16});
                const int64_t o = 3 + rng.uniform_int(7);
                for (int64_t y = o; y < o + 4; ++y) {
                    for (int64_t x = o; x < o + 4; ++x) lesion.at2(y, x) = 1.0f;
                }
                inf = pid + sid + "_inf.ctt";
                data_io::write_tensor(dir.file(inf), lesion, data_io::DType::U8);
                if (labels) label = "1";
            }
            m << pid << "\t" << sid << "\t" << pid << sid << "_img.ctt\t" << pid << sid
              << "_lung.ctt\t" << inf << "\t" << label << "\n";
        }
    }
    const std::string path = dir.file("manifest.tsv");
    std::ofstream os(path);
    os << m.str();
    return path;
}

std::string toy_config(const TempDir& dir, const std::string& manifest, const std::string& out_dir,
                       int folds) {
    std::ostringstream cfg;
    cfg << "[model]\nbase_width = 4\ncpb_enabled = true\nseed = 5\n";
    cfg << "[loss]\nalpha = 0.7\nbeta = 0.3\n";
    cfg << "[schedule]\nmax_epochs = 2\npatience = 2\nbatch_size = 2\nseed = 5\naugmentation = false\n";
    if (folds > 1) {
        cfg << "[split]\nmode = kfold\nk = " << folds << "\nkfold_val_fraction = 0.25\nseed = 5\n";
    } else {
        cfg << "[split]\nmode = ratio\ntrain = 0.6\nval = 0.2\ntest = 0.2\nseed = 5\n";
    }
    cfg << "[paths]\ntrain_manifest = " << manifest << "\noutput_dir = " << out_dir << "\n";
    const std::string path = dir.file("exp.cfg");
    std::ofstream os(path);
    os << cfg.str();
    return path;
}

}  // namespace

TEST_CASE("config snapshot round trip") {
    config::ExperimentConfig a;
    a.model.base_width = 8;
    a.model.seed = 99;
    a.loss.gamma = 1.5;
    a.loss.lesion_weight_mode = losses::LossConfig::WeightMode::Fixed;
    a.loss.lesion_weight = 4.0;
    a.schedule.batch_size = 3;
    a.split.mode = config::SplitSpec::Mode::KFold;
    a.split.k = 5;
    a.thresholds.binarize = 0.4;
    a.augment.corpus_count = 12;
    std::istringstream is(a.snapshot());
    const config::ExperimentConfig b = config::ExperimentConfig::parse(is, "snapshot");
    CHECK(b.model.base_width == 8);
    CHECK(b.model.seed == 99);
    CHECK(b.loss.gamma == doctest::Approx(1.5));
    CHECK(b.loss.lesion_weight_mode == losses::LossConfig::WeightMode::Fixed);
    CHECK(b.loss.lesion_weight == doctest::Approx(4.0));
    CHECK(b.schedule.batch_size == 3);
    CHECK(b.split.mode == config::SplitSpec::Mode::KFold);
    CHECK(b.split.k == 5);
    CHECK(b.thresholds.binarize == doctest::Approx(0.4));
    CHECK(b.augment.corpus_count == 12);
    CHECK(b.snapshot() == a.snapshot());
}

TEST_CASE("unknown keys and malformed values are config errors with field paths") {
    {
        std::istringstream is("[model]\nwidth = 32\n");
        try {
            config::ExperimentConfig::parse(is, "x");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("model.width") != std::string::npos);
        }
    }
    {
        std::istringstream is("[nosuch]\nkey = 1\n");
        CHECK_THROWS_AS(config::ExperimentConfig::parse(is, "x"), ConfigError);
    }
    {
        std::istringstream is("[model]\nbase_width = banana\n");
        CHECK_THROWS_AS(config::ExperimentConfig::parse(is, "x"), ConfigError);
    }
    {
        std::istringstream is("[thresholds]\nbinarize = 1.5\n");
        CHECK_THROWS_AS(config::ExperimentConfig::parse(is, "x"), ConfigError);
    }
    {
        std::istringstream is("[split]\ntrain = 0.9\nval = 0.9\ntest = 0.9\n");
        CHECK_THROWS_AS(config::ExperimentConfig::parse(is, "x"), ConfigError);
    }
}

TEST_CASE("training run: fold mechanics, reports, determinism") {
    TempDir dir;
    const std::string manifest = build_dataset(dir, 6, false);
    const std::string out = dir.file("out");
    const std::string cfg_path = toy_config(dir, manifest, out, 2);
    const config::ExperimentConfig cfg = config::ExperimentConfig::load(cfg_path);

    const harness::TrainRunResult run1 = harness::run_training(cfg);
    REQUIRE(run1.folds.size() == 2);
    for (int f = 0; f < 2; ++f) {
        CHECK(fs::exists(out + "/fold_" + std::to_string(f) + "/checkpoint.ckpt"));
        CHECK(fs::exists(out + "/fold_" + std::to_string(f) + "/metrics.tsv"));
    }
    CHECK(fs::exists(out + "/run_report.txt"));
    CHECK(fs::exists(out + "/config_snapshot.cfg"));
    const std::string report1 = read_file(out + "/run_report.txt");

    // rerun with the same config: byte-identical run report
    const harness::TrainRunResult run2 = harness::run_training(cfg);
    const std::string report2 = read_file(out + "/run_report.txt");
    CHECK(report1 == report2);
    CHECK(run1.report_text == run2.report_text);

    // the report embeds the parameter ledger total and per-fold sections
    CHECK(report1.find("total trainable") != std::string::npos);
    CHECK(report1.find("[fold 0]") != std::string::npos);
    CHECK(report1.find("[fold 1]") != std::string::npos);
    CHECK(report1.find("[aggregate over 2 folds]") != std::string::npos);
}

TEST_CASE("evaluate: slice vs volume mode on a toy manifest") {
    TempDir dir;
    const std::string manifest_path = build_dataset(dir, 2, false);
    const auto manifest = data_io::DatasetManifest::load(manifest_path);
    network::ModelConfig mc;
    mc.base_width = 4;
    mc.seed = 3;
    const network::ModelParams params = network::build_model(mc);

    harness::EvalConfig ec;
    ec.mode = harness::EvalConfig::Mode::Slice;
    const harness::EvalOutcome slice_eval = harness::evaluate(params, manifest, ec);
    CHECK(slice_eval.scores.size() == 4);  // 2 infected slices per patient

    ec.mode = harness::EvalConfig::Mode::Volume;
    const harness::EvalOutcome vol_eval = harness::evaluate(params, manifest, ec);
    CHECK(vol_eval.scores.size() == 6);  // every lung-containing slice
    CHECK(vol_eval.patient_rates.size() == 2);

    const std::string table = harness::format_slice_table(vol_eval.scores);
    CHECK(table.find("patient_id\tslice_id\tdsc") == 0);
    const std::string summary = harness::format_eval_summary(vol_eval);
    CHECK(summary.find("DSC:") != std::string::npos);
    CHECK(summary.find("group A") != std::string::npos);
}

TEST_CASE("discrimination over a labeled manifest: all-black predictor, exclusions, missing labels") {
    TempDir dir;
    const std::string manifest_path = build_dataset(dir, 3, true);
    const auto manifest = data_io::DatasetManifest::load(manifest_path);

    // an all-black predictor: the head bias saturates the sigmoid low
    network::ModelConfig mc;
    mc.base_width = 4;
    mc.seed = 2;
    network::ModelParams params = network::build_model(mc);
    for (float& v : params.at("head.conv.bias").data) v = -100.0f;
    for (float& v : params.at("head.conv.weight").data) v = 0.0f;

    config::Thresholds th;
    const auto stats = harness::discriminate_manifest(params, manifest, nullptr, th);
    REQUIRE(stats.sensitivity.has_value());
    CHECK(*stats.sensitivity == doctest::Approx(0.0));  // every infected slice missed
    CHECK_FALSE(stats.ppv.has_value());                 // no positive verdicts at all
    CHECK(stats.accuracy == doctest::Approx(1.0 / 3.0));  // only the clean slices

    // exclusion list removes slices from the run
    const std::string excl_path = dir.file("excl.tsv");
    {
        std::ofstream os(excl_path);
        os << "p0\ts0\np0\ts1\np0\ts2\n";
    }
    const auto excl = data_io::ExclusionList::load(excl_path);
    const auto stats2 = harness::discriminate_manifest(params, manifest, &excl, th);
    CHECK(stats2.accuracy == doctest::Approx(1.0 / 3.0));  // same mix, fewer slices

    // a manifest without labels is rejected
    const std::string unlabeled = build_dataset(dir, 1, false);
    const auto um = data_io::DatasetManifest::load(unlabeled);
    CHECK_THROWS_AS(harness::discriminate_manifest(params, um, nullptr, th), ValidationError);
}

TEST_CASE("evaluate applies the exclusion list") {
    TempDir dir;
    const std::string manifest_path = build_dataset(dir, 2, false);
    const auto manifest = data_io::DatasetManifest::load(manifest_path);
    network::ModelConfig mc;
    mc.base_width = 4;
    const auto params = network::build_model(mc);
    harness::EvalConfig ec;
    ec.mode = harness::EvalConfig::Mode::Volume;
    const auto all = harness::evaluate(params, manifest, ec);
    CHECK(all.scores.size() == 6);

    const std::string excl_path = dir.file("e.tsv");
    {
        std::ofstream os(excl_path);
        os << "p0\ts0\n";
    }
    const auto excl = data_io::ExclusionList::load(excl_path);
    const auto fewer = harness::evaluate(params, manifest, ec, &excl);
    CHECK(fewer.scores.size() == 5);
    CHECK(fewer.excluded == 1);
}

TEST_CASE("evaluate: incompatible slice size is a shape error naming the slice") {
    TempDir dir;
    Rng rng(31);
    // 20x20 is not divisible by 16
    data_io::write_tensor(dir.file("img.ctt"), rand_uniform(rng, {20, 20}, 0, 100), data_io::DType::F32);
    data_io::write_tensor(dir.file("lung.ctt"), Tensor::full({20, 20}, 1.0f), data_io::DType::U8);
    Tensor lesion = Tensor::zeros({20, 20});
    lesion.at2(4, 4) = 1.0f;
    data_io::write_tensor(dir.file("inf.ctt"), lesion, data_io::DType::U8);
    const std::string path = dir.file("m.tsv");
    {
        std::ofstream os(path);
        os << "p9\tsz\timg.ctt\tlung.ctt\tinf.ctt\t-\n";
    }
    const auto manifest = data_io::DatasetManifest::load(path);
    network::ModelConfig mc;
    mc.base_width = 4;
    const auto params = network::build_model(mc);
    harness::EvalConfig ec;
    try {
        harness::evaluate(params, manifest, ec);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string what = e.what();
        CHECK(what.find("p9/sz") != std::string::npos);
        CHECK(what.find("divisible by 16") != std::string::npos);
    }
}

TEST_CASE("cli: train subcommand end to end on a toy config") {
    TempDir dir;
    const std::string manifest = build_dataset(dir, 5, false);
    const std::string out = dir.file("cli_out");
    const std::string cfg_path = toy_config(dir, manifest, out, 1);
    CHECK(run_cli("--config " + cfg_path + " train") == 0);
    CHECK(fs::exists(out + "/run_report.txt"));
    CHECK(fs::exists(out + "/fold_0/checkpoint.ckpt"));
    // the checkpoint loads and evaluates through the CLI as well
    CHECK(run_cli("eval --checkpoint " + out + "/fold_0/checkpoint.ckpt --manifest " + manifest +
                  " --mode volume --out " + dir.file("eval_out")) == 0);
    CHECK(fs::exists(dir.file("eval_out") + "/metrics.tsv"));
    CHECK(fs::exists(dir.file("eval_out") + "/summary.txt"));
    // and drives the slice-level discrimination on a labeled manifest
    const std::string labeled = build_dataset(dir, 2, true);
    CHECK(run_cli("discriminate --checkpoint " + out + "/fold_0/checkpoint.ckpt --manifest " +
                  labeled) == 0);
}

TEST_CASE("cli: gradcheck passes cleanly") {
    CHECK(run_cli("gradcheck") == 0);
}

TEST_CASE("cli: exit codes are a stable contract") {
    TempDir dir;
    // 0: success
    CHECK(run_cli("param-count") == 0);
    // 2: config errors
    const std::string bad_cfg = dir.file("bad.cfg");
    {
        std::ofstream os(bad_cfg);
        os << "[model]\nnot_a_key = 1\n";
    }
    CHECK(run_cli("--config " + bad_cfg + " param-count") == 2);
    CHECK(run_cli("--config " + dir.file("missing.cfg") + " param-count") == 2);
    // 3: data errors
    CHECK(run_cli("eval --checkpoint " + dir.file("no.ckpt") + " --manifest " + dir.file("no.tsv")) == 3);
    // 1: check failures
    CHECK(run_cli("gradcheck --inject-fault conv2d_s1_d1") == 1);
}

TEST_CASE("cli: augment writes a corpus and provenance manifest") {
    TempDir dir;
    const std::string infected = build_dataset(dir, 2, false);
    // healthy manifest: same images, no infection masks
    Rng rng(9);
    std::ostringstream hm;
    for (int i = 0; i < 3; ++i) {
        Tensor image = rand_uniform(rng, {16, 16}, -500.0, 500.0);
        Tensor lung = Tensor::zeros({16, 16});
        for (int64_t y = 1; y < 15; ++y) {
            for (int64_t x = 1; x < 15; ++x) lung.at2(y, x) = 1.0f;
        }
        data_io::write_tensor(dir.file("h" + std::to_string(i) + ".ctt"), image, data_io::DType::F32);
        data_io::write_tensor(dir.file("hl" + std::to_string(i) + ".ctt"), lung, data_io::DType::U8);
        hm << "h" << i << "\ts0\th" << i << ".ctt\thl" << i << ".ctt\t-\t-\n";
    }
    const std::string healthy = dir.file("healthy.tsv");
    {
        std::ofstream os(healthy);
        os << hm.str();
    }
    const std::string out = dir.file("aug_out");
    std::ostringstream cfg;
    cfg << "[paths]\ntrain_manifest = " << infected << "\nhealthy_manifest = " << healthy
        << "\noutput_dir = " << out << "\n[augment]\ncorpus_count = 6\n";
    const std::string cfg_path = dir.file("aug.cfg");
    {
        std::ofstream os(cfg_path);
        os << cfg.str();
    }
    CHECK(run_cli("--config " + cfg_path + " augment") == 0);
    CHECK(fs::exists(out + "/synthetic/corpus_manifest.tsv"));
    const std::string manifest_text = read_file(out + "/synthetic/corpus_manifest.tsv");
    CHECK(manifest_text.find("infected_ref") != std::string::npos);
    // every listed pair exists and parses
    std::istringstream lines(manifest_text);
    std::string line;
    std::getline(lines, line);  // header
    int rows = 0;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        ++rows;
        const size_t t1 = line.find('\t');
        const size_t t2 = line.find('\t', t1 + 1);
        const size_t t3 = line.find('\t', t2 + 1);
        const std::string image_file = line.substr(t1 + 1, t2 - t1 - 1);
        const std::string mask_file = line.substr(t2 + 1, t3 - t2 - 1);
        CHECK_NOTHROW(data_io::read_tensor(out + "/synthetic/" + image_file));
        const Tensor mask = data_io::read_tensor(out + "/synthetic/" + mask_file);
        CHECK(mask.is_binary());
    }
    CHECK(rows == 6);
}

TEST_CASE("cli: param-count prints the ledger and passes at defaults") {
    TempDir dir;
    const std::string out = dir.file("ledger.txt");
    const std::string cmd = std::string(COVSEG_CLI_PATH) + " param-count > " + out + " 2>&1";
    CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    const std::string text = read_file(out);
    CHECK(text.find("total\t") != std::string::npos);
    CHECK(text.find("context block subtotal") != std::string::npos);
    CHECK(text.find("deviation") != std::string::npos);
}
