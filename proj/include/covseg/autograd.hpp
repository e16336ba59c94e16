#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "covseg/ops.hpp"
#include "covseg/tensor.hpp"

namespace covseg {

// Ordered record of executed primitives. Backward replays the nodes in exact
// reverse execution order, accumulating gradients into every reachable value.
// A tape is confined to one evaluation context and is not shared.
class GradTape {
public:
    using ValueId = int;
    // Receives the tape and the id of the node's own output value.
    using BackwardFn = std::function<void(GradTape&, ValueId)>;

    ValueId leaf(Tensor value);
    ValueId push(Tensor value, BackwardFn backward);

    const Tensor& value(ValueId id) const { return values_[static_cast<size_t>(id)]; }
    bool has_grad(ValueId id) const { return grads_[static_cast<size_t>(id)].has_value(); }
    const Tensor& grad(ValueId id) const;
    Tensor grad_or_zeros(ValueId id) const;
    void accumulate(ValueId id, const Tensor& g);

    // Seeds the root gradient and replays the tape backward.
    void backward(ValueId root, Tensor seed);
    // Convenience for sum-reduced scalar closures: seeds with all-ones.
    void backward_sum(ValueId root);

    size_t size() const { return values_.size(); }

private:
    struct Node {
        ValueId output;
        BackwardFn backward;
    };
    std::vector<Tensor> values_;
    std::vector<std::optional<Tensor>> grads_;
    std::vector<Node> nodes_;
};

// Tape-recording wrappers around the primitive kernels.
namespace taped {

GradTape::ValueId conv2d(GradTape& tape, GradTape::ValueId input, GradTape::ValueId kernel,
                         GradTape::ValueId bias, const ops::Conv2dSpec& spec);
// Train-mode batch norm; updates the caller's running statistics in place.
GradTape::ValueId batch_norm_train(GradTape& tape, GradTape::ValueId input, GradTape::ValueId scale,
                                   GradTape::ValueId shift, Tensor& running_mean, Tensor& running_var,
                                   double eps = ops::kBatchNormEps,
                                   double momentum = ops::kBatchNormMomentum);
GradTape::ValueId relu(GradTape& tape, GradTape::ValueId input);
GradTape::ValueId sigmoid(GradTape& tape, GradTape::ValueId input);
GradTape::ValueId upsample2x(GradTape& tape, GradTape::ValueId input);
GradTape::ValueId concat_channels(GradTape& tape, GradTape::ValueId a, GradTape::ValueId b);
GradTape::ValueId add(GradTape& tape, GradTape::ValueId a, GradTape::ValueId b);

}  // namespace taped

}  // namespace covseg
