#include "covseg/ops.hpp"

#include <cmath>

namespace covseg::ops {

namespace {

void require_rank4(const Tensor& t, const char* what) {
    if (t.rank() != 4) {
        throw ShapeError(std::string(what) + " must be rank 4, got " + t.shape_str());
    }
}

void check_conv_args(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     const Conv2dSpec& spec) {
    require_rank4(input, "conv2d input");
    require_rank4(kernel, "conv2d kernel");
    if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0)) {
        throw ShapeError("conv2d bias must be (Cout)=" + std::to_string(kernel.dim(0)) +
                         ", got " + bias.shape_str());
    }
    if (input.dim(1) != kernel.dim(1)) {
        throw ShapeError("conv2d channel mismatch: input has " + std::to_string(input.dim(1)) +
                         " channels, kernel expects " + std::to_string(kernel.dim(1)));
    }
    if (kernel.dim(2) % 2 == 0 || kernel.dim(3) % 2 == 0) {
        throw ParamError("conv2d kernel sides must be odd, got " + kernel.shape_str());
    }
    if (spec.stride <= 0 || spec.dilation <= 0) {
        throw ParamError("conv2d stride and dilation must be positive");
    }
    if (spec.padding == Padding::Explicit && spec.pad < 0) {
        throw ParamError("conv2d explicit padding must be non-negative");
    }
}

}  // namespace

Conv2dDims conv2d_dims(int64_t in_h, int64_t in_w, int64_t kh, int64_t kw, const Conv2dSpec& spec) {
    const int64_t eff_h = (kh - 1) * spec.dilation + 1;
    const int64_t eff_w = (kw - 1) * spec.dilation + 1;
    Conv2dDims d{};
    if (spec.padding == Padding::Same) {
        d.out_h = (in_h + spec.stride - 1) / spec.stride;  // ceil(H/stride)
        d.out_w = (in_w + spec.stride - 1) / spec.stride;
        const int64_t pad_h = std::max<int64_t>((d.out_h - 1) * spec.stride + eff_h - in_h, 0);
        const int64_t pad_w = std::max<int64_t>((d.out_w - 1) * spec.stride + eff_w - in_w, 0);
        d.pad_top = pad_h / 2;  // extra row/column goes to bottom/right
        d.pad_left = pad_w / 2;
    } else {
        d.out_h = (in_h + 2 * spec.pad - eff_h) / spec.stride + 1;
        d.out_w = (in_w + 2 * spec.pad - eff_w) / spec.stride + 1;
        if (d.out_h <= 0 || d.out_w <= 0) {
            throw ShapeError("conv2d output would be empty for input " + std::to_string(in_h) +
                             "x" + std::to_string(in_w));
        }
        d.pad_top = spec.pad;
        d.pad_left = spec.pad;
    }
    return d;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, const Conv2dSpec& spec) {
    check_conv_args(input, kernel, bias, spec);
    const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t Co = kernel.dim(0), KH = kernel.dim(2), KW = kernel.dim(3);
    const Conv2dDims d = conv2d_dims(H, W, KH, KW, spec);
    const int64_t OH = d.out_h, OW = d.out_w;

    Tensor out({N, Co, OH, OW});
    const float* in = input.data.data();
    const float* k = kernel.data.data();
    float* o = out.data.data();

    // Per output element the accumulation order is (ci, kh, kw), in 64-bit.
    std::vector<double> plane(static_cast<size_t>(OH * OW));
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Co; ++co) {
            std::fill(plane.begin(), plane.end(), static_cast<double>(bias.data[co]));
            for (int64_t ci = 0; ci < C; ++ci) {
                const float* in_c = in + (n * C + ci) * H * W;
                const float* k_c = k + (co * C + ci) * KH * KW;
                for (int64_t kh = 0; kh < KH; ++kh) {
                    for (int64_t kw = 0; kw < KW; ++kw) {
                        const double wgt = k_c[kh * KW + kw];
                        if (wgt == 0.0) continue;
                        for (int64_t oh = 0; oh < OH; ++oh) {
                            const int64_t ih = oh * spec.stride - d.pad_top + kh * spec.dilation;
                            if (ih < 0 || ih >= H) continue;
                            const float* in_row = in_c + ih * W;
                            double* p_row = plane.data() + oh * OW;
                            for (int64_t ow = 0; ow < OW; ++ow) {
                                const int64_t iw = ow * spec.stride - d.pad_left + kw * spec.dilation;
                                if (iw < 0 || iw >= W) continue;
                                p_row[ow] += wgt * static_cast<double>(in_row[iw]);
                            }
                        }
                    }
                }
            }
            float* o_plane = o + (n * Co + co) * OH * OW;
            for (int64_t i = 0; i < OH * OW; ++i) o_plane[i] = static_cast<float>(plane[static_cast<size_t>(i)]);
        }
    }
    return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Conv2dSpec& spec,
                            const Tensor& grad_out) {
    const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t Co = kernel.dim(0), KH = kernel.dim(2), KW = kernel.dim(3);
    const Conv2dDims d = conv2d_dims(H, W, KH, KW, spec);
    const int64_t OH = d.out_h, OW = d.out_w;
    if (grad_out.shape != std::vector<int64_t>{N, Co, OH, OW}) {
        throw ShapeError("conv2d_backward grad_out shape " + grad_out.shape_str() +
                         " does not match forward output");
    }

    Conv2dGrads g{Tensor({N, C, H, W}), Tensor({Co, C, KH, KW}), Tensor({Co})};
    const float* in = input.data.data();
    const float* k = kernel.data.data();
    const float* go = grad_out.data.data();

    // grad input: per (n, ci) plane, scatter from outputs in (co, kh, kw, oh, ow) order.
    std::vector<double> plane(static_cast<size_t>(H * W));
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t ci = 0; ci < C; ++ci) {
            std::fill(plane.begin(), plane.end(), 0.0);
            for (int64_t co = 0; co < Co; ++co) {
                const float* go_c = go + (n * Co + co) * OH * OW;
                const float* k_c = k + (co * C + ci) * KH * KW;
                for (int64_t kh = 0; kh < KH; ++kh) {
                    for (int64_t kw = 0; kw < KW; ++kw) {
                        const double wgt = k_c[kh * KW + kw];
                        if (wgt == 0.0) continue;
                        for (int64_t oh = 0; oh < OH; ++oh) {
                            const int64_t ih = oh * spec.stride - d.pad_top + kh * spec.dilation;
                            if (ih < 0 || ih >= H) continue;
                            double* p_row = plane.data() + ih * W;
                            const float* go_row = go_c + oh * OW;
                            for (int64_t ow = 0; ow < OW; ++ow) {
                                const int64_t iw = ow * spec.stride - d.pad_left + kw * spec.dilation;
                                if (iw < 0 || iw >= W) continue;
                                p_row[iw] += wgt * static_cast<double>(go_row[ow]);
                            }
                        }
                    }
                }
            }
            float* gi_plane = g.input.data.data() + (n * C + ci) * H * W;
            for (int64_t i = 0; i < H * W; ++i) gi_plane[i] = static_cast<float>(plane[static_cast<size_t>(i)]);
        }
    }

    // grad kernel and grad bias: gather per kernel element / channel.
    for (int64_t co = 0; co < Co; ++co) {
        double bias_acc = 0.0;
        for (int64_t n = 0; n < N; ++n) {
            const float* go_c = go + (n * Co + co) * OH * OW;
            for (int64_t i = 0; i < OH * OW; ++i) bias_acc += go_c[i];
        }
        g.bias.data[static_cast<size_t>(co)] = static_cast<float>(bias_acc);

        for (int64_t ci = 0; ci < C; ++ci) {
            for (int64_t kh = 0; kh < KH; ++kh) {
                for (int64_t kw = 0; kw < KW; ++kw) {
                    double acc = 0.0;
                    for (int64_t n = 0; n < N; ++n) {
                        const float* go_c = go + (n * Co + co) * OH * OW;
                        const float* in_c = in + (n * C + ci) * H * W;
                        for (int64_t oh = 0; oh < OH; ++oh) {
                            const int64_t ih = oh * spec.stride - d.pad_top + kh * spec.dilation;
                            if (ih < 0 || ih >= H) continue;
                            const float* in_row = in_c + ih * W;
                            const float* go_row = go_c + oh * OW;
                            for (int64_t ow = 0; ow < OW; ++ow) {
                                const int64_t iw = ow * spec.stride - d.pad_left + kw * spec.dilation;
                                if (iw < 0 || iw >= W) continue;
                                acc += static_cast<double>(go_row[ow]) * static_cast<double>(in_row[iw]);
                            }
                        }
                    }
                    g.kernel.data[static_cast<size_t>(((co * C + ci) * KH + kh) * KW + kw)] =
                        static_cast<float>(acc);
                }
            }
        }
    }
    return g;
}

namespace {

void check_bn_args(const Tensor& input, const Tensor& scale, const Tensor& shift,
                   const Tensor& running_mean, const Tensor& running_var) {
    require_rank4(input, "batch_norm input");
    const int64_t C = input.dim(1);
    for (const Tensor* t : {&scale, &shift, &running_mean, &running_var}) {
        if (t->rank() != 1 || t->dim(0) != C) {
            throw ShapeError("batch_norm per-channel parameter must be (C)=" + std::to_string(C) +
                             ", got " + t->shape_str());
        }
    }
}

}  // namespace

Tensor batch_norm_train(const Tensor& input, const Tensor& scale, const Tensor& shift,
                        Tensor& running_mean, Tensor& running_var, double eps, double momentum,
                        BatchNormCache* cache) {
    check_bn_args(input, scale, shift, running_mean, running_var);
    const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t M = N * H * W;
    const int64_t plane = H * W;

    Tensor out(input.shape);
    Tensor mean({C}), inv_std({C});
    for (int64_t c = 0; c < C; ++c) {
        double sum = 0.0, sum_sq = 0.0;
        for (int64_t n = 0; n < N; ++n) {
            const float* p = input.data.data() + (n * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                const double v = p[i];
                sum += v;
                sum_sq += v * v;
            }
        }
        const double mu = sum / static_cast<double>(M);
        double var = sum_sq / static_cast<double>(M) - mu * mu;
        if (var < 0.0) var = 0.0;  // guard rounding
        const double istd = 1.0 / std::sqrt(var + eps);
        mean.data[static_cast<size_t>(c)] = static_cast<float>(mu);
        inv_std.data[static_cast<size_t>(c)] = static_cast<float>(istd);

        running_mean.data[static_cast<size_t>(c)] = static_cast<float>(
            (1.0 - momentum) * running_mean.data[static_cast<size_t>(c)] + momentum * mu);
        running_var.data[static_cast<size_t>(c)] = static_cast<float>(
            (1.0 - momentum) * running_var.data[static_cast<size_t>(c)] + momentum * var);

        const double sc = scale.data[static_cast<size_t>(c)];
        const double sh = shift.data[static_cast<size_t>(c)];
        for (int64_t n = 0; n < N; ++n) {
            const float* p = input.data.data() + (n * C + c) * plane;
            float* q = out.data.data() + (n * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                q[i] = static_cast<float>((static_cast<double>(p[i]) - mu) * istd * sc + sh);
            }
        }
    }
    if (cache) {
        cache->mean = std::move(mean);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

Tensor batch_norm_eval(const Tensor& input, const Tensor& scale, const Tensor& shift,
                       const Tensor& running_mean, const Tensor& running_var, double eps) {
    check_bn_args(input, scale, shift, running_mean, running_var);
    const int64_t N = input.dim(0), C = input.dim(1), plane = input.dim(2) * input.dim(3);
    Tensor out(input.shape);
    for (int64_t c = 0; c < C; ++c) {
        const double mu = running_mean.data[static_cast<size_t>(c)];
        const double istd = 1.0 / std::sqrt(static_cast<double>(running_var.data[static_cast<size_t>(c)]) + eps);
        const double sc = scale.data[static_cast<size_t>(c)];
        const double sh = shift.data[static_cast<size_t>(c)];
        for (int64_t n = 0; n < N; ++n) {
            const float* p = input.data.data() + (n * C + c) * plane;
            float* q = out.data.data() + (n * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                q[i] = static_cast<float>((static_cast<double>(p[i]) - mu) * istd * sc + sh);
            }
        }
    }
    return out;
}

BatchNormGrads batch_norm_backward(const Tensor& input, const Tensor& scale,
                                   const BatchNormCache& cache, const Tensor& grad_out) {
    const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t M = N * H * W;
    const int64_t plane = H * W;
    if (!grad_out.same_shape(input)) {
        throw ShapeError("batch_norm_backward grad_out shape mismatch");
    }

    BatchNormGrads g{Tensor(input.shape), Tensor({C}), Tensor({C})};
    for (int64_t c = 0; c < C; ++c) {
        const double mu = cache.mean.data[static_cast<size_t>(c)];
        const double istd = cache.inv_std.data[static_cast<size_t>(c)];
        const double sc = scale.data[static_cast<size_t>(c)];

        // reductions over the channel
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int64_t n = 0; n < N; ++n) {
            const float* x = input.data.data() + (n * C + c) * plane;
            const float* dy = grad_out.data.data() + (n * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                const double xhat = (static_cast<double>(x[i]) - mu) * istd;
                sum_dy += dy[i];
                sum_dy_xhat += static_cast<double>(dy[i]) * xhat;
            }
        }
        g.shift.data[static_cast<size_t>(c)] = static_cast<float>(sum_dy);
        g.scale.data[static_cast<size_t>(c)] = static_cast<float>(sum_dy_xhat);

        // dx = (scale*istd/M) * (M*dy - sum_dy - xhat*sum_dy_xhat)
        const double k = sc * istd / static_cast<double>(M);
        for (int64_t n = 0; n < N; ++n) {
            const float* x = input.data.data() + (n * C + c) * plane;
            const float* dy = grad_out.data.data() + (n * C + c) * plane;
            float* dx = g.input.data.data() + (n * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                const double xhat = (static_cast<double>(x[i]) - mu) * istd;
                dx[i] = static_cast<float>(k * (static_cast<double>(M) * dy[i] - sum_dy - xhat * sum_dy_xhat));
            }
        }
    }
    return g;
}

Tensor relu(const Tensor& input) {
    Tensor out(input.shape);
    for (size_t i = 0; i < input.data.size(); ++i) {
        out.data[i] = input.data[i] > 0.0f ? input.data[i] : 0.0f;
    }
    return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
    Tensor g(input.shape);
    for (size_t i = 0; i < input.data.size(); ++i) {
        g.data[i] = input.data[i] > 0.0f ? grad_out.data[i] : 0.0f;
    }
    return g;
}

Tensor sigmoid(const Tensor& input) {
    constexpr float lo = 1e-7f;
    constexpr float hi = 1.0f - 1e-7f;
    Tensor out(input.shape);
    for (size_t i = 0; i < input.data.size(); ++i) {
        const double y = 1.0 / (1.0 + std::exp(-static_cast<double>(input.data[i])));
        float f = static_cast<float>(y);
        if (f < lo) f = lo;
        if (f > hi) f = hi;
        out.data[i] = f;
    }
    return out;
}

Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out) {
    Tensor g(output.shape);
    for (size_t i = 0; i < output.data.size(); ++i) {
        const double y = output.data[i];
        g.data[i] = static_cast<float>(static_cast<double>(grad_out.data[i]) * y * (1.0 - y));
    }
    return g;
}

Tensor upsample2x(const Tensor& input) {
    require_rank4(input, "upsample2x input");
    const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            for (int64_t h = 0; h < H; ++h) {
                for (int64_t w = 0; w < W; ++w) {
                    const float v = input.at4(n, c, h, w);
                    out.at4(n, c, 2 * h, 2 * w) = v;
                    out.at4(n, c, 2 * h, 2 * w + 1) = v;
                    out.at4(n, c, 2 * h + 1, 2 * w) = v;
                    out.at4(n, c, 2 * h + 1, 2 * w + 1) = v;
                }
            }
        }
    }
    return out;
}

Tensor upsample2x_backward(const Tensor& grad_out) {
    require_rank4(grad_out, "upsample2x grad");
    const int64_t N = grad_out.dim(0), C = grad_out.dim(1);
    const int64_t H = grad_out.dim(2) / 2, W = grad_out.dim(3) / 2;
    Tensor g({N, C, H, W});
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            for (int64_t h = 0; h < H; ++h) {
                for (int64_t w = 0; w < W; ++w) {
                    const double s = static_cast<double>(grad_out.at4(n, c, 2 * h, 2 * w)) +
                                     grad_out.at4(n, c, 2 * h, 2 * w + 1) +
                                     grad_out.at4(n, c, 2 * h + 1, 2 * w) +
                                     grad_out.at4(n, c, 2 * h + 1, 2 * w + 1);
                    g.at4(n, c, h, w) = static_cast<float>(s);
                }
            }
        }
    }
    return g;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_rank4(a, "concat operand a");
    require_rank4(b, "concat operand b");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw ShapeError("concat_channels operands disagree outside the channel axis: " +
                         a.shape_str() + " vs " + b.shape_str());
    }
    const int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    Tensor out({N, Ca + Cb, H, W});
    const int64_t plane = H * W;
    for (int64_t n = 0; n < N; ++n) {
        std::copy(a.data.begin() + n * Ca * plane, a.data.begin() + (n + 1) * Ca * plane,
                  out.data.begin() + n * (Ca + Cb) * plane);
        std::copy(b.data.begin() + n * Cb * plane, b.data.begin() + (n + 1) * Cb * plane,
                  out.data.begin() + (n * (Ca + Cb) + Ca) * plane);
    }
    return out;
}

std::pair<Tensor, Tensor> concat_channels_backward(int64_t channels_a, const Tensor& grad_out) {
    const int64_t N = grad_out.dim(0), C = grad_out.dim(1), H = grad_out.dim(2), W = grad_out.dim(3);
    const int64_t Ca = channels_a, Cb = C - channels_a;
    Tensor ga({N, Ca, H, W}), gb({N, Cb, H, W});
    const int64_t plane = H * W;
    for (int64_t n = 0; n < N; ++n) {
        std::copy(grad_out.data.begin() + n * C * plane, grad_out.data.begin() + (n * C + Ca) * plane,
                  ga.data.begin() + n * Ca * plane);
        std::copy(grad_out.data.begin() + (n * C + Ca) * plane, grad_out.data.begin() + (n + 1) * C * plane,
                  gb.data.begin() + n * Cb * plane);
    }
    return {std::move(ga), std::move(gb)};
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("add shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor out(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    return out;
}

}  // namespace covseg::ops
