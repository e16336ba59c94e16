#pragma once

#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "covseg/tensor.hpp"

namespace covseg::data_io {

// CTT1 tensor file: 4-byte magic "CTT1", 1-byte dtype (0 = float32,
// 1 = uint8), 1-byte rank (<= 4), rank little-endian uint32 dims, row-major
// payload, little-endian throughout.
enum class DType : uint8_t { F32 = 0, U8 = 1 };

void write_tensor_stream(std::ostream& os, const Tensor& t, DType dtype);
// base_offset shifts reported error offsets when the blob is embedded.
Tensor read_tensor_stream(std::istream& is, size_t base_offset = 0);
void write_tensor(const std::string& path, const Tensor& t, DType dtype = DType::F32);
Tensor read_tensor(const std::string& path);

// One chest CT slice: raw-intensity image, lung mask, optional infection
// mask and optional slice-level label.
struct CtSlice {
    std::string patient_id, slice_id;
    Tensor image;
    Tensor lung_mask;
    std::optional<Tensor> infection_mask;
    std::optional<bool> infected_label;

    bool lung_empty() const;
    void validate() const;
};

// Manifest line: patient_id <TAB> slice_id <TAB> image <TAB> lung_mask
// <TAB> infection_mask|- <TAB> label|-    ("#" starts a comment)
struct ManifestEntry {
    std::string patient_id, slice_id;
    std::string image_path, lung_mask_path;
    std::optional<std::string> infection_mask_path;
    std::optional<bool> infected_label;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;  // sorted by (patient_id, slice_id)
    std::string source_tag;

    static DatasetManifest load(const std::string& path, std::string source_tag = "");
    std::vector<std::string> patients() const;  // unique, sorted
};

CtSlice load_slice(const ManifestEntry& entry);

// Per-image standardization; returns nullopt when the lung mask is empty
// (such slices are excluded upstream).
std::optional<Tensor> preprocess(const CtSlice& slice);

enum class ResizeKind { Image, Mask };
// Bilinear for images, nearest-neighbor for masks; endpoints align so an
// identity resize is exact and corners are preserved.
Tensor resize(const Tensor& image, int64_t out_h, int64_t out_w, ResizeKind kind);

struct FoldPlan {
    struct Fold {
        std::vector<std::string> train, val, test;  // patient ids
    };
    int k = 1;
    std::vector<Fold> folds;
};

// Single patient-independent split by ratios; val/test round to nearest,
// train absorbs the remainder.
FoldPlan split(const DatasetManifest& manifest, double train_ratio, double val_ratio,
               double test_ratio, uint64_t seed);
// k folds with disjoint, exhaustive test groups; validation takes
// val_fraction of the non-test patients.
FoldPlan kfold(const DatasetManifest& manifest, int k, double val_fraction, uint64_t seed);

// One "patient_id <TAB> slice_id" pair per line.
struct ExclusionList {
    std::set<std::pair<std::string, std::string>> entries;
    static ExclusionList load(const std::string& path);
    bool contains(const std::string& patient_id, const std::string& slice_id) const;
};

}  // namespace covseg::data_io
