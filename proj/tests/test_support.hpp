#pragma once

// Shared test-only helpers and independent oracles. These stay deliberately
// naive (per-element nested loops) so they cannot share a failure mode with
// the library kernels they check.

#include <cmath>
#include <vector>

#include "covseg/tensor.hpp"

namespace covseg::testing {

// Brute-force cross-correlation: per output element, accumulate over
// (ci, kh, kw) in a 64-bit accumulator.
inline Tensor conv2d_oracle(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                            int64_t stride, int64_t dilation, int64_t pad_top, int64_t pad_left,
                            int64_t out_h, int64_t out_w) {
    const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t Co = kernel.dim(0), KH = kernel.dim(2), KW = kernel.dim(3);
    Tensor out({N, Co, out_h, out_w});
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Co; ++co) {
            for (int64_t oh = 0; oh < out_h; ++oh) {
                for (int64_t ow = 0; ow < out_w; ++ow) {
                    double acc = bias.data[static_cast<size_t>(co)];
                    for (int64_t ci = 0; ci < C; ++ci) {
                        for (int64_t kh = 0; kh < KH; ++kh) {
                            for (int64_t kw = 0; kw < KW; ++kw) {
                                const int64_t ih = oh * stride - pad_top + kh * dilation;
                                const int64_t iw = ow * stride - pad_left + kw * dilation;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += static_cast<double>(kernel.at4(co, ci, kh, kw)) *
                                       static_cast<double>(input.at4(n, ci, ih, iw));
                            }
                        }
                    }
                    out.at4(n, co, oh, ow) = static_cast<float>(acc);
                }
            }
        }
    }
    return out;
}

struct PixelCounts {
    long tp = 0, fp = 0, tn = 0, fn = 0;
};

// Per-pixel enumeration of the confusion counts and the derived metrics.
inline PixelCounts count_pixels(const Tensor& pred, const Tensor& gt) {
    PixelCounts c;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0.0f;
        const bool g = gt.data[i] != 0.0f;
        if (p && g) ++c.tp;
        if (p && !g) ++c.fp;
        if (!p && g) ++c.fn;
        if (!p && !g) ++c.tn;
    }
    return c;
}

inline double dsc_oracle(const Tensor& pred, const Tensor& gt) {
    const PixelCounts c = count_pixels(pred, gt);
    if (2 * c.tp + c.fp + c.fn == 0) return 1.0;
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
}

inline double mae_oracle(const Tensor& pred, const Tensor& gt) {
    double acc = 0.0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        acc += std::fabs(static_cast<double>(pred.data[i]) - static_cast<double>(gt.data[i]));
    }
    return acc / static_cast<double>(pred.data.size());
}

inline Tensor random_mask(Rng& rng, std::vector<int64_t> shape, double p_one) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = rng.uniform() < p_one ? 1.0f : 0.0f;
    return t;
}

}  // namespace covseg::testing
