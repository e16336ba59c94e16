#pragma once

#include <utility>

#include "covseg/tensor.hpp"

namespace covseg::ops {

// Convolution here is cross-correlation (no kernel flip), the usual
// deep-learning convention. "Same" padding produces ceil(H/stride) rows,
// with any odd padding row/column placed at bottom/right.
enum class Padding { Same, Explicit };

struct Conv2dSpec {
    int64_t stride = 1;
    int64_t dilation = 1;
    Padding padding = Padding::Same;
    int64_t pad = 0;  // used when padding == Explicit
};

struct Conv2dDims {
    int64_t out_h, out_w;
    int64_t pad_top, pad_left;
};

Conv2dDims conv2d_dims(int64_t in_h, int64_t in_w, int64_t kh, int64_t kw, const Conv2dSpec& spec);

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, const Conv2dSpec& spec);

struct Conv2dGrads {
    Tensor input, kernel, bias;
};
Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Conv2dSpec& spec,
                            const Tensor& grad_out);

// Per-channel statistics saved by the train-mode forward for the backward pass.
struct BatchNormCache {
    Tensor mean;     // (C)
    Tensor inv_std;  // (C), 1/sqrt(var + eps)
};

constexpr double kBatchNormEps = 1e-5;
constexpr double kBatchNormMomentum = 0.1;  // new = (1-m)*old + m*batch

Tensor batch_norm_train(const Tensor& input, const Tensor& scale, const Tensor& shift,
                        Tensor& running_mean, Tensor& running_var, double eps, double momentum,
                        BatchNormCache* cache);
Tensor batch_norm_eval(const Tensor& input, const Tensor& scale, const Tensor& shift,
                       const Tensor& running_mean, const Tensor& running_var, double eps);

struct BatchNormGrads {
    Tensor input, scale, shift;
};
BatchNormGrads batch_norm_backward(const Tensor& input, const Tensor& scale,
                                   const BatchNormCache& cache, const Tensor& grad_out);

Tensor relu(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

// Computed in 64-bit and clamped to [1e-7, 1-1e-7] so outputs stay strictly
// inside (0,1) in 32-bit storage even for saturating inputs.
Tensor sigmoid(const Tensor& input);
Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out);

Tensor upsample2x(const Tensor& input);
Tensor upsample2x_backward(const Tensor& grad_out);

Tensor concat_channels(const Tensor& a, const Tensor& b);
std::pair<Tensor, Tensor> concat_channels_backward(int64_t channels_a, const Tensor& grad_out);

Tensor add(const Tensor& a, const Tensor& b);

}  // namespace covseg::ops
