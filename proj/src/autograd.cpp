#include "covseg/autograd.hpp"

#include <memory>

namespace covseg {

GradTape::ValueId GradTape::leaf(Tensor value) {
    values_.push_back(std::move(value));
    grads_.emplace_back();
    return static_cast<ValueId>(values_.size() - 1);
}

GradTape::ValueId GradTape::push(Tensor value, BackwardFn backward) {
    const ValueId id = leaf(std::move(value));
    nodes_.push_back(Node{id, std::move(backward)});
    return id;
}

const Tensor& GradTape::grad(ValueId id) const {
    const auto& g = grads_[static_cast<size_t>(id)];
    if (!g) throw ValidationError("no gradient recorded for tape value " + std::to_string(id));
    return *g;
}

Tensor GradTape::grad_or_zeros(ValueId id) const {
    const auto& g = grads_[static_cast<size_t>(id)];
    if (g) return *g;
    return Tensor::zeros(values_[static_cast<size_t>(id)].shape);
}

void GradTape::accumulate(ValueId id, const Tensor& g) {
    auto& slot = grads_[static_cast<size_t>(id)];
    if (!slot) {
        slot = g;
        return;
    }
    if (!slot->same_shape(g)) {
        throw ShapeError("gradient accumulation shape mismatch: " + slot->shape_str() + " vs " +
                         g.shape_str());
    }
    for (size_t i = 0; i < g.data.size(); ++i) slot->data[i] += g.data[i];
}

void GradTape::backward(ValueId root, Tensor seed) {
    if (!seed.same_shape(value(root))) {
        throw ShapeError("backward seed shape " + seed.shape_str() + " does not match root value " +
                         value(root).shape_str());
    }
    accumulate(root, seed);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (!has_grad(it->output)) continue;  // value did not influence the root
        it->backward(*this, it->output);
    }
}

void GradTape::backward_sum(ValueId root) {
    backward(root, Tensor::full(value(root).shape, 1.0f));
}

namespace taped {

using ValueId = GradTape::ValueId;

ValueId conv2d(GradTape& tape, ValueId input, ValueId kernel, ValueId bias,
               const ops::Conv2dSpec& spec) {
    Tensor out = ops::conv2d(tape.value(input), tape.value(kernel), tape.value(bias), spec);
    return tape.push(std::move(out), [input, kernel, bias, spec](GradTape& t, ValueId self) {
        auto g = ops::conv2d_backward(t.value(input), t.value(kernel), spec, t.grad(self));
        t.accumulate(input, g.input);
        t.accumulate(kernel, g.kernel);
        t.accumulate(bias, g.bias);
    });
}

ValueId batch_norm_train(GradTape& tape, ValueId input, ValueId scale, ValueId shift,
                         Tensor& running_mean, Tensor& running_var, double eps, double momentum) {
    auto cache = std::make_shared<ops::BatchNormCache>();
    Tensor out = ops::batch_norm_train(tape.value(input), tape.value(scale), tape.value(shift),
                                       running_mean, running_var, eps, momentum, cache.get());
    return tape.push(std::move(out), [input, scale, shift, cache](GradTape& t, ValueId self) {
        auto g = ops::batch_norm_backward(t.value(input), t.value(scale), *cache, t.grad(self));
        t.accumulate(input, g.input);
        t.accumulate(scale, g.scale);
        t.accumulate(shift, g.shift);
    });
}

ValueId relu(GradTape& tape, ValueId input) {
    return tape.push(ops::relu(tape.value(input)), [input](GradTape& t, ValueId self) {
        t.accumulate(input, ops::relu_backward(t.value(input), t.grad(self)));
    });
}

ValueId sigmoid(GradTape& tape, ValueId input) {
    return tape.push(ops::sigmoid(tape.value(input)), [input](GradTape& t, ValueId self) {
        t.accumulate(input, ops::sigmoid_backward(t.value(self), t.grad(self)));
    });
}

ValueId upsample2x(GradTape& tape, ValueId input) {
    return tape.push(ops::upsample2x(tape.value(input)), [input](GradTape& t, ValueId self) {
        t.accumulate(input, ops::upsample2x_backward(t.grad(self)));
    });
}

ValueId concat_channels(GradTape& tape, ValueId a, ValueId b) {
    const int64_t channels_a = tape.value(a).dim(1);
    return tape.push(ops::concat_channels(tape.value(a), tape.value(b)),
                     [a, b, channels_a](GradTape& t, ValueId self) {
                         auto [ga, gb] = ops::concat_channels_backward(channels_a, t.grad(self));
                         t.accumulate(a, ga);
                         t.accumulate(b, gb);
                     });
}

ValueId add(GradTape& tape, ValueId a, ValueId b) {
    return tape.push(ops::add(tape.value(a), tape.value(b)), [a, b](GradTape& t, ValueId self) {
        t.accumulate(a, t.grad(self));
        t.accumulate(b, t.grad(self));
    });
}

}  // namespace taped

}  // namespace covseg
