#pragma once

#include <string>
#include <utility>
#include <vector>

#include "covseg/tensor.hpp"

namespace covseg::data_io {
struct CtSlice;
}

namespace covseg::augment {

// (x - mean) / std over all pixels, population std.
Tensor normalize(const Tensor& image);

// Lesion insertion: the infected image's lesion pixels replace the healthy
// lung content, everything outside the healthy lung is trimmed to zero, and
// the synthetic mask is the infection mask clipped to the healthy lung.
struct CompositeInputs {
    Tensor infected_image;     // normalized
    Tensor infection_mask;     // binary
    Tensor healthy_image;      // normalized
    Tensor healthy_lung_mask;  // binary
};

struct SyntheticPair {
    Tensor image;
    Tensor mask;
    double infection_rate = 0.0;
};

SyntheticPair composite(const CompositeInputs& inputs);

// Keep iff infection_rate > min_rate (strict).
bool filter_synthetic(const SyntheticPair& pair, double min_rate = 0.01);

struct AffineParams {
    double zoom = 1.0;
    double shift_y = 0.0;  // fraction of H
    double shift_x = 0.0;  // fraction of W
    double shear_deg = 0.0;
};

struct AffineRanges {
    double zoom_lo = 0.9, zoom_hi = 1.1;
    double shift = 0.05;      // +- fraction of H/W
    double shear_deg = 5.0;   // +- degrees
};

AffineParams sample_affine(const AffineRanges& ranges, Rng& rng);

// The same geometric transform on both: bilinear for the image (out-of-canvas
// filled with the image minimum), nearest for the mask (re-binarized).
std::pair<Tensor, Tensor> affine_augment(const Tensor& image, const Tensor& mask,
                                         const AffineParams& params);

struct CorpusItem {
    SyntheticPair pair;
    std::string infected_ref, healthy_ref;  // "patient/slice" provenance
    uint64_t slot_seed = 0;
};

struct CorpusResult {
    std::vector<CorpusItem> items;
    int64_t failed_slots = 0;  // slots that found no partner above min_rate
};

// Seeded per output slot with (seed, index), so parallel and serial runs
// produce identical corpora. A slot that falls below min_rate retries with
// the other healthy partners before being counted as failed.
CorpusResult generate_corpus(const std::vector<data_io::CtSlice>& infected,
                             const std::vector<data_io::CtSlice>& healthy, int64_t count,
                             uint64_t seed, double min_rate = 0.01);

}  // namespace covseg::augment
