#include "covseg/config.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace covseg::config {

void Thresholds::validate() const {
    for (double t : {binarize, group, discriminate, synthetic_min_rate}) {
        if (t < 0.0 || t > 1.0) throw ConfigError("thresholds must lie in [0,1]");
    }
}

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int64_t d = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t d = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
}

std::string trim(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

std::string fmt_real(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    ExperimentConfig cfg = parse(is, path);
    cfg.validate_paths();
    return cfg;
}

ExperimentConfig ExperimentConfig::parse(std::istream& is, const std::string& origin) {
    ExperimentConfig c;
    std::string section;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
            section = t.substr(1, t.size() - 2);
            if (section != "model" && section != "loss" && section != "schedule" && section != "split" &&
                section != "thresholds" && section != "paths" && section != "augment") {
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown section [" + section + "]");
            }
            continue;
        }
        const size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        const std::string path = section.empty() ? key : section + "." + key;

        if (section == "model") {
            if (key == "base_width") c.model.base_width = parse_int(path, value);
            else if (key == "cpb_enabled") c.model.cpb_enabled = parse_bool(path, value);
            else if (key == "seed") c.model.seed = parse_u64(path, value);
            else throw ConfigError(path + ": unknown key");
        } else if (section == "loss") {
            if (key == "alpha") c.loss.alpha = parse_real(path, value);
            else if (key == "beta") c.loss.beta = parse_real(path, value);
            else if (key == "gamma") c.loss.gamma = parse_real(path, value);
            else if (key == "kappa") c.loss.kappa = parse_real(path, value);
            else if (key == "lesion_weight_mode") {
                if (value == "fixed") c.loss.lesion_weight_mode = losses::LossConfig::WeightMode::Fixed;
                else if (value == "batch-balanced") c.loss.lesion_weight_mode = losses::LossConfig::WeightMode::BatchBalanced;
                else throw ConfigError(path + ": expected fixed or batch-balanced");
            } else if (key == "lesion_weight") c.loss.lesion_weight = parse_real(path, value);
            else if (key == "smooth") c.loss.smooth = parse_real(path, value);
            else throw ConfigError(path + ": unknown key");
        } else if (section == "schedule") {
            if (key == "max_epochs") c.schedule.max_epochs = static_cast<int>(parse_int(path, value));
            else if (key == "patience") c.schedule.patience = static_cast<int>(parse_int(path, value));
            else if (key == "batch_size") c.schedule.batch_size = static_cast<int>(parse_int(path, value));
            else if (key == "seed") c.schedule.seed = parse_u64(path, value);
            else if (key == "augmentation") c.schedule.augmentation = parse_bool(path, value);
            else if (key == "l2_coefficient") c.schedule.l2_coefficient = parse_real(path, value);
            else if (key == "learning_rate") c.schedule.adam.lr = parse_real(path, value);
            else if (key == "min_improvement") c.schedule.min_improvement = parse_real(path, value);
            else throw ConfigError(path + ": unknown key");
        } else if (section == "split") {
            if (key == "mode") {
                if (value == "ratio") c.split.mode = SplitSpec::Mode::Ratio;
                else if (value == "kfold") c.split.mode = SplitSpec::Mode::KFold;
                else throw ConfigError(path + ": expected ratio or kfold");
            } else if (key == "train") c.split.train = parse_real(path, value);
            else if (key == "val") c.split.val = parse_real(path, value);
            else if (key == "test") c.split.test = parse_real(path, value);
            else if (key == "k") c.split.k = static_cast<int>(parse_int(path, value));
            else if (key == "kfold_val_fraction") c.split.kfold_val_fraction = parse_real(path, value);
            else if (key == "seed") c.split.seed = parse_u64(path, value);
            else throw ConfigError(path + ": unknown key");
        } else if (section == "thresholds") {
            if (key == "binarize") c.thresholds.binarize = parse_real(path, value);
            else if (key == "group") c.thresholds.group = parse_real(path, value);
            else if (key == "discriminate") c.thresholds.discriminate = parse_real(path, value);
            else if (key == "synthetic_min_rate") c.thresholds.synthetic_min_rate = parse_real(path, value);
            else throw ConfigError(path + ": unknown key");
        } else if (section == "paths") {
            if (key == "train_manifest") c.paths.train_manifest = value;
            else if (key == "healthy_manifest") c.paths.healthy_manifest = value;
            else if (key == "output_dir") c.paths.output_dir = value;
            else if (key == "exclusion_list") c.paths.exclusion_list = value;
            else throw ConfigError(path + ": unknown key");
        } else if (section == "augment") {
            if (key == "zoom_lo") c.augment.affine.zoom_lo = parse_real(path, value);
            else if (key == "zoom_hi") c.augment.affine.zoom_hi = parse_real(path, value);
            else if (key == "shift") c.augment.affine.shift = parse_real(path, value);
            else if (key == "shear_deg") c.augment.affine.shear_deg = parse_real(path, value);
            else if (key == "corpus_count") c.augment.corpus_count = parse_int(path, value);
            else throw ConfigError(path + ": unknown key");
        } else {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": key '" + key +
                              "' outside any section");
        }
    }

    c.schedule.affine = c.augment.affine;
    c.thresholds.validate();
    try {
        c.loss.validate();
        c.schedule.validate();
        if (c.model.base_width < 4) throw ParamError("base_width must be >= 4");
    } catch (const ParamError& e) {
        throw ConfigError(std::string(e.what()));
    }
    if (c.split.mode == SplitSpec::Mode::Ratio &&
        std::fabs(c.split.train + c.split.val + c.split.test - 1.0) > 1e-9) {
        throw ConfigError("split ratios must sum to 1");
    }
    return c;
}

void ExperimentConfig::validate_paths() const {
    for (const std::string* p : {&paths.train_manifest, &paths.healthy_manifest, &paths.exclusion_list}) {
        if (!p->empty() && !std::filesystem::exists(*p)) {
            throw ConfigError("configured path does not exist: " + *p);
        }
    }
}

std::string ExperimentConfig::snapshot() const {
    std::ostringstream os;
    os << "[model]\n";
    os << "base_width = " << model.base_width << "\n";
    os << "cpb_enabled = " << (model.cpb_enabled ? "true" : "false") << "\n";
    os << "seed = " << model.seed << "\n";
    os << "\n[loss]\n";
    os << "alpha = " << fmt_real(loss.alpha) << "\n";
    os << "beta = " << fmt_real(loss.beta) << "\n";
    os << "gamma = " << fmt_real(loss.gamma) << "\n";
    os << "kappa = " << fmt_real(loss.kappa) << "\n";
    os << "lesion_weight_mode = "
       << (loss.lesion_weight_mode == losses::LossConfig::WeightMode::Fixed ? "fixed" : "batch-balanced")
       << "\n";
    os << "lesion_weight = " << fmt_real(loss.lesion_weight) << "\n";
    os << "smooth = " << fmt_real(loss.smooth) << "\n";
    os << "\n[schedule]\n";
    os << "max_epochs = " << schedule.max_epochs << "\n";
    os << "patience = " << schedule.patience << "\n";
    os << "batch_size = " << schedule.batch_size << "\n";
    os << "seed = " << schedule.seed << "\n";
    os << "augmentation = " << (schedule.augmentation ? "true" : "false") << "\n";
    os << "l2_coefficient = " << fmt_real(schedule.l2_coefficient) << "\n";
    os << "learning_rate = " << fmt_real(schedule.adam.lr) << "\n";
    os << "min_improvement = " << fmt_real(schedule.min_improvement) << "\n";
    os << "\n[split]\n";
    os << "mode = " << (split.mode == SplitSpec::Mode::Ratio ? "ratio" : "kfold") << "\n";
    os << "train = " << fmt_real(split.train) << "\n";
    os << "val = " << fmt_real(split.val) << "\n";
    os << "test = " << fmt_real(split.test) << "\n";
    os << "k = " << split.k << "\n";
    os << "kfold_val_fraction = " << fmt_real(split.kfold_val_fraction) << "\n";
    os << "seed = " << split.seed << "\n";
    os << "\n[thresholds]\n";
    os << "binarize = " << fmt_real(thresholds.binarize) << "\n";
    os << "group = " << fmt_real(thresholds.group) << "\n";
    os << "discriminate = " << fmt_real(thresholds.discriminate) << "\n";
    os << "synthetic_min_rate = " << fmt_real(thresholds.synthetic_min_rate) << "\n";
    os << "\n[paths]\n";
    if (!paths.train_manifest.empty()) os << "train_manifest = " << paths.train_manifest << "\n";
    if (!paths.healthy_manifest.empty()) os << "healthy_manifest = " << paths.healthy_manifest << "\n";
    if (!paths.output_dir.empty()) os << "output_dir = " << paths.output_dir << "\n";
    if (!paths.exclusion_list.empty()) os << "exclusion_list = " << paths.exclusion_list << "\n";
    os << "\n[augment]\n";
    os << "zoom_lo = " << fmt_real(augment.affine.zoom_lo) << "\n";
    os << "zoom_hi = " << fmt_real(augment.affine.zoom_hi) << "\n";
    os << "shift = " << fmt_real(augment.affine.shift) << "\n";
    os << "shear_deg = " << fmt_real(augment.affine.shear_deg) << "\n";
    os << "corpus_count = " << augment.corpus_count << "\n";
    return os.str();
}

}  // namespace covseg::config
