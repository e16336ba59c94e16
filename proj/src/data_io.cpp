#include "covseg/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "covseg/augment.hpp"

namespace covseg::data_io {

namespace {
constexpr int kMaxRank = 4;
}

void write_tensor_stream(std::ostream& os, const Tensor& t, DType dtype) {
    if (t.rank() > kMaxRank) throw ParamError("tensor rank exceeds " + std::to_string(kMaxRank));
    os.write("CTT1", 4);
    os.put(static_cast<char>(dtype));
    os.put(static_cast<char>(t.rank()));
    for (int64_t d : t.shape) {
        if (d > UINT32_MAX) throw ParamError("dimension too large for format");
        const uint32_t v = static_cast<uint32_t>(d);
        os.write(reinterpret_cast<const char*>(&v), 4);
    }
    if (dtype == DType::F32) {
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    } else {
        std::vector<uint8_t> bytes(t.data.size());
        for (size_t i = 0; i < t.data.size(); ++i) {
            const float v = t.data[i];
            if (v < 0.0f || v > 255.0f || v != std::floor(v)) {
                throw ValidationError("uint8 tensor payload requires integral values in [0,255]");
            }
            bytes[i] = static_cast<uint8_t>(v);
        }
        os.write(reinterpret_cast<const char*>(bytes.data()),
                 static_cast<std::streamsize>(bytes.size()));
    }
}

Tensor read_tensor_stream(std::istream& is, size_t base_offset) {
    char magic[4] = {0, 0, 0, 0};
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, "CTT1", 4) != 0) {
        throw FormatError("bad or missing CTT1 magic", base_offset + 0);
    }
    const int dtype_byte = is.get();
    if (dtype_byte < 0) throw FormatError("missing dtype byte", base_offset + 4);
    if (dtype_byte != 0 && dtype_byte != 1) {
        throw FormatError("unknown dtype code " + std::to_string(dtype_byte), base_offset + 4);
    }
    const int rank = is.get();
    if (rank < 0) throw FormatError("missing rank byte", base_offset + 5);
    if (rank > kMaxRank) {
        throw FormatError("rank " + std::to_string(rank) + " exceeds maximum 4", base_offset + 5);
    }
    std::vector<int64_t> shape(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) {
        uint32_t d = 0;
        is.read(reinterpret_cast<char*>(&d), 4);
        if (is.gcount() != 4) {
            throw FormatError("truncated dimension list", base_offset + 6 + 4 * static_cast<size_t>(i));
        }
        shape[static_cast<size_t>(i)] = d;
    }
    const size_t header = 6 + 4 * static_cast<size_t>(rank);
    const int64_t n = shape_numel(shape);
    Tensor t(shape);
    if (dtype_byte == 0) {
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(n * static_cast<int64_t>(sizeof(float))));
        if (is.gcount() != n * static_cast<int64_t>(sizeof(float))) {
            throw FormatError("truncated float32 payload",
                              base_offset + header + static_cast<size_t>(is.gcount()));
        }
    } else {
        std::vector<uint8_t> bytes(static_cast<size_t>(n));
        is.read(reinterpret_cast<char*>(bytes.data()), n);
        if (is.gcount() != n) {
            throw FormatError("truncated uint8 payload",
                              base_offset + header + static_cast<size_t>(is.gcount()));
        }
        for (size_t i = 0; i < bytes.size(); ++i) t.data[i] = static_cast<float>(bytes[i]);
    }
    return t;
}

void write_tensor(const std::string& path, const Tensor& t, DType dtype) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open tensor file for writing: " + path);
    write_tensor_stream(os, t, dtype);
    if (!os) throw DataError("tensor write failed: " + path);
}

Tensor read_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open tensor file: " + path);
    return read_tensor_stream(is);
}

bool CtSlice::lung_empty() const {
    for (float v : lung_mask.data) {
        if (v == 1.0f) return false;
    }
    return true;
}

void CtSlice::validate() const {
    if (!image.same_shape(lung_mask)) {
        throw ValidationError("slice " + patient_id + "/" + slice_id +
                              ": image and lung mask shapes differ");
    }
    if (!lung_mask.is_binary()) {
        throw ValidationError("slice " + patient_id + "/" + slice_id + ": lung mask is not binary");
    }
    if (infection_mask) {
        if (!infection_mask->same_shape(image)) {
            throw ValidationError("slice " + patient_id + "/" + slice_id +
                                  ": infection mask shape differs from image");
        }
        if (!infection_mask->is_binary()) {
            throw ValidationError("slice " + patient_id + "/" + slice_id +
                                  ": infection mask is not binary");
        }
        if (infected_label) {
            bool has_lesion = false;
            for (float v : infection_mask->data) {
                if (v == 1.0f) {
                    has_lesion = true;
                    break;
                }
            }
            if (*infected_label != has_lesion) {
                throw ValidationError("slice " + patient_id + "/" + slice_id +
                                      ": slice-level label contradicts infection mask");
            }
        }
    }
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == '\t') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

}  // namespace

DatasetManifest DatasetManifest::load(const std::string& path, std::string source_tag) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open manifest: " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();

    DatasetManifest m;
    m.source_tag = std::move(source_tag);
    std::set<std::pair<std::string, std::string>> seen;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const size_t first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        auto fields = split_tabs(line);
        if (fields.size() != 6) {
            throw DataError(path + ":" + std::to_string(lineno) + ": expected 6 tab-separated fields, got " +
                            std::to_string(fields.size()));
        }
        ManifestEntry e;
        e.patient_id = fields[0];
        e.slice_id = fields[1];
        auto resolve = [&](const std::string& p) {
            std::filesystem::path fp(p);
            return fp.is_absolute() ? fp.string() : (base / fp).string();
        };
        e.image_path = resolve(fields[2]);
        e.lung_mask_path = resolve(fields[3]);
        if (fields[4] != "-") e.infection_mask_path = resolve(fields[4]);
        if (fields[5] != "-") {
            if (fields[5] != "0" && fields[5] != "1") {
                throw DataError(path + ":" + std::to_string(lineno) + ": label must be 0, 1 or -");
            }
            e.infected_label = fields[5] == "1";
        }
        if (!seen.insert({e.patient_id, e.slice_id}).second) {
            throw DataError(path + ":" + std::to_string(lineno) + ": duplicate slice " + e.patient_id +
                            "/" + e.slice_id);
        }
        for (const std::string* p : {&e.image_path, &e.lung_mask_path}) {
            if (!std::filesystem::exists(*p)) {
                throw DataError(path + ":" + std::to_string(lineno) + ": missing file " + *p);
            }
        }
        if (e.infection_mask_path && !std::filesystem::exists(*e.infection_mask_path)) {
            throw DataError(path + ":" + std::to_string(lineno) + ": missing file " +
                            *e.infection_mask_path);
        }
        m.entries.push_back(std::move(e));
    }
    std::sort(m.entries.begin(), m.entries.end(), [](const ManifestEntry& a, const ManifestEntry& b) {
        return std::tie(a.patient_id, a.slice_id) < std::tie(b.patient_id, b.slice_id);
    });
    return m;
}

std::vector<std::string> DatasetManifest::patients() const {
    std::vector<std::string> ids;
    for (const auto& e : entries) {
        if (ids.empty() || ids.back() != e.patient_id) ids.push_back(e.patient_id);
    }
    // entries are sorted, so consecutive de-dup is enough
    return ids;
}

CtSlice load_slice(const ManifestEntry& entry) {
    CtSlice s;
    s.patient_id = entry.patient_id;
    s.slice_id = entry.slice_id;
    s.image = read_tensor(entry.image_path);
    s.lung_mask = read_tensor(entry.lung_mask_path);
    if (entry.infection_mask_path) s.infection_mask = read_tensor(*entry.infection_mask_path);
    s.infected_label = entry.infected_label;
    s.validate();
    return s;
}

std::optional<Tensor> preprocess(const CtSlice& slice) {
    if (slice.lung_empty()) return std::nullopt;
    Tensor norm = augment::normalize(slice.image);
    Tensor out({1, norm.shape[0], norm.shape[1]});
    out.data = std::move(norm.data);
    return out;
}

Tensor resize(const Tensor& image, int64_t out_h, int64_t out_w, ResizeKind kind) {
    if (image.rank() != 2) throw ShapeError("resize expects a 2-D tensor, got " + image.shape_str());
    const int64_t H = image.dim(0), W = image.dim(1);
    if (H < 2 || W < 2) throw ParamError("resize requires input sides >= 2");
    if (out_h < 1 || out_w < 1) throw ParamError("resize target must be positive");
    if (H == out_h && W == out_w) return image;

    Tensor out({out_h, out_w});
    const double sy = out_h > 1 ? static_cast<double>(H - 1) / static_cast<double>(out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(W - 1) / static_cast<double>(out_w - 1) : 0.0;
    for (int64_t y = 0; y < out_h; ++y) {
        const double fy = y * sy;
        for (int64_t x = 0; x < out_w; ++x) {
            const double fx = x * sx;
            if (kind == ResizeKind::Mask) {
                const int64_t iy = std::min<int64_t>(H - 1, static_cast<int64_t>(std::llround(fy)));
                const int64_t ix = std::min<int64_t>(W - 1, static_cast<int64_t>(std::llround(fx)));
                out.at2(y, x) = image.at2(iy, ix);
            } else {
                const int64_t y0 = static_cast<int64_t>(std::floor(fy));
                const int64_t x0 = static_cast<int64_t>(std::floor(fx));
                const int64_t y1 = std::min<int64_t>(H - 1, y0 + 1);
                const int64_t x1 = std::min<int64_t>(W - 1, x0 + 1);
                const double dy = fy - static_cast<double>(y0);
                const double dx = fx - static_cast<double>(x0);
                const double v = (1.0 - dy) * ((1.0 - dx) * image.at2(y0, x0) + dx * image.at2(y0, x1)) +
                                 dy * ((1.0 - dx) * image.at2(y1, x0) + dx * image.at2(y1, x1));
                out.at2(y, x) = static_cast<float>(v);
            }
        }
    }
    return out;
}

namespace {

std::vector<std::string> shuffled_patients(const DatasetManifest& manifest, uint64_t seed) {
    std::vector<std::string> ids = manifest.patients();
    Rng rng(mix_seed(seed, 0x73706c6974ULL));
    // Fisher-Yates
    for (size_t i = ids.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)));
        std::swap(ids[i - 1], ids[j]);
    }
    return ids;
}

}  // namespace

FoldPlan split(const DatasetManifest& manifest, double train_ratio, double val_ratio,
               double test_ratio, uint64_t seed) {
    if (train_ratio <= 0.0 || val_ratio < 0.0 || test_ratio < 0.0 ||
        std::fabs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
        throw ValidationError("split ratios must be non-negative and sum to 1");
    }
    auto ids = shuffled_patients(manifest, seed);
    const int64_t n = static_cast<int64_t>(ids.size());
    if (n < 3) throw ValidationError("split needs at least 3 patients, got " + std::to_string(n));
    int64_t n_val = static_cast<int64_t>(std::llround(val_ratio * static_cast<double>(n)));
    int64_t n_test = static_cast<int64_t>(std::llround(test_ratio * static_cast<double>(n)));
    // train absorbs the remainder but keeps at least one patient everywhere
    if (val_ratio > 0.0 && n_val == 0) n_val = 1;
    if (test_ratio > 0.0 && n_test == 0) n_test = 1;
    if (n_val + n_test >= n) {
        throw ValidationError("split leaves no training patients");
    }
    FoldPlan plan;
    plan.k = 1;
    FoldPlan::Fold fold;
    int64_t i = 0;
    for (; i < n - n_val - n_test; ++i) fold.train.push_back(ids[static_cast<size_t>(i)]);
    for (; i < n - n_test; ++i) fold.val.push_back(ids[static_cast<size_t>(i)]);
    for (; i < n; ++i) fold.test.push_back(ids[static_cast<size_t>(i)]);
    plan.folds.push_back(std::move(fold));
    return plan;
}

FoldPlan kfold(const DatasetManifest& manifest, int k, double val_fraction, uint64_t seed) {
    if (k < 2) throw ValidationError("kfold requires k >= 2");
    auto ids = shuffled_patients(manifest, seed);
    const int64_t n = static_cast<int64_t>(ids.size());
    if (n < k) {
        throw ValidationError("kfold needs at least " + std::to_string(k) + " patients, got " +
                              std::to_string(n));
    }
    // near-equal test groups; the first (n mod k) groups take one extra
    std::vector<std::vector<std::string>> groups(static_cast<size_t>(k));
    const int64_t base = n / k, extra = n % k;
    int64_t pos = 0;
    for (int g = 0; g < k; ++g) {
        const int64_t size = base + (g < extra ? 1 : 0);
        for (int64_t j = 0; j < size; ++j) groups[static_cast<size_t>(g)].push_back(ids[static_cast<size_t>(pos++)]);
    }

    FoldPlan plan;
    plan.k = k;
    for (int f = 0; f < k; ++f) {
        FoldPlan::Fold fold;
        fold.test = groups[static_cast<size_t>(f)];
        std::vector<std::string> rest;
        for (int g = 0; g < k; ++g) {
            if (g == f) continue;
            rest.insert(rest.end(), groups[static_cast<size_t>(g)].begin(), groups[static_cast<size_t>(g)].end());
        }
        int64_t n_val = static_cast<int64_t>(std::llround(val_fraction * static_cast<double>(rest.size())));
        if (val_fraction > 0.0 && n_val == 0) n_val = 1;
        if (n_val >= static_cast<int64_t>(rest.size())) {
            throw ValidationError("kfold validation fraction leaves no training patients");
        }
        fold.val.assign(rest.begin(), rest.begin() + n_val);
        fold.train.assign(rest.begin() + n_val, rest.end());
        plan.folds.push_back(std::move(fold));
    }
    return plan;
}

ExclusionList ExclusionList::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open exclusion list: " + path);
    ExclusionList ex;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const size_t first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        auto fields = split_tabs(line);
        if (fields.size() != 2) {
            throw DataError(path + ":" + std::to_string(lineno) +
                            ": expected 'patient_id<TAB>slice_id'");
        }
        ex.entries.insert({fields[0], fields[1]});
    }
    return ex;
}

bool ExclusionList::contains(const std::string& patient_id, const std::string& slice_id) const {
    return entries.count({patient_id, slice_id}) > 0;
}

}  // namespace covseg::data_io
