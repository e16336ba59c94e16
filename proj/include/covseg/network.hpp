#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "covseg/autograd.hpp"
#include "covseg/tensor.hpp"

namespace covseg::network {

// Encoder-decoder segmentation network: a 3x3 stem convolution, four
// residual encoding blocks (each halving the resolution with a stride-2
// convolution), an optional multi-scale context block on the deepest
// features (1x1 projection plus 3x3 convolutions at dilations 1/2/4/8,
// fused by elementwise sum), and four decoding blocks that upsample,
// concatenate the resolution-matched encoder features and convolve once.
struct ModelConfig {
    int64_t base_width = 32;
    bool cpb_enabled = true;
    uint64_t seed = 0;
    int64_t input_channels = 1;
};

struct ParamEntry {
    std::string name;
    Tensor value;
    bool trainable = true;
};

class ModelParams {
public:
    ModelConfig config;
    std::vector<ParamEntry> entries;  // ordered by construction

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    size_t index_of(const std::string& name) const;
    void add(std::string name, Tensor value, bool trainable = true);
    bool all_finite() const;

private:
    std::unordered_map<std::string, size_t> index_;
};

// He-initialized parameters for the full ladder. base_width >= 4.
ModelParams build_model(const ModelConfig& cfg);

struct LayerCount {
    std::string name;
    int64_t count;
};
struct ParamLedger {
    std::vector<LayerCount> per_layer;
    int64_t total = 0;
    // Subtotal for entries under a prefix, e.g. "cpb.".
    int64_t prefix_total(const std::string& prefix) const;
};
// Counts trainable parameters only (running statistics excluded).
ParamLedger count_params(const ModelParams& params);

enum class Mode { Train, Eval };

// Probability map with the input's spatial size; H and W must be divisible
// by 16. Train mode updates batch-norm running statistics.
Tensor forward(ModelParams& params, const Tensor& batch, Mode mode);
Tensor forward_eval(const ModelParams& params, const Tensor& batch);
// Normalizes with the batch's own statistics but leaves the stored running
// statistics untouched; used by the trainer to monitor validation loss.
Tensor forward_batchstats(const ModelParams& params, const Tensor& batch);

// Gradients are aligned with ModelParams::entries; non-participating or
// non-trainable entries hold an empty tensor.
using GradVec = std::vector<Tensor>;

struct TrainForward {
    GradTape tape;
    GradTape::ValueId output = -1;
    // entry index -> tape id for every trainable parameter used in the pass
    std::vector<std::pair<size_t, GradTape::ValueId>> param_ids;
    double cpb_l2_penalty = 0.0;  // coefficient * sum(kernel^2) over the context block
};
TrainForward forward_train(ModelParams& params, const Tensor& batch, double cpb_l2_coefficient);

// Collects parameter gradients from a completed backward pass.
GradVec collect_param_grads(const ModelParams& params, const TrainForward& fwd);

double cpb_l2_penalty(const ModelParams& params, double coefficient);
// Adds d(penalty)/d(kernel) = 2 * coefficient * kernel into grads.
void add_cpb_l2_gradients(const ModelParams& params, double coefficient, GradVec& grads);

// Standalone context-block application (eval); input channels must equal the
// deepest encoder width (8 * base_width).
Tensor cpb_forward(const ModelParams& params, const Tensor& input);

void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace covseg::network
