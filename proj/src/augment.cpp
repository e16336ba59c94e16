#include "covseg/augment.hpp"

#include <cmath>

#include "covseg/data_io.hpp"
#include "covseg/metrics.hpp"

namespace covseg::augment {

Tensor normalize(const Tensor& image) {
    const int64_t n = image.numel();
    if (n == 0) throw DegenerateInputError("normalize: empty image");
    double sum = 0.0;
    for (float v : image.data) sum += v;
    const double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (float v : image.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double std = std::sqrt(var);
    if (std <= 0.0) throw DegenerateInputError("normalize: zero intensity variance");
    Tensor out(image.shape);
    for (size_t i = 0; i < image.data.size(); ++i) {
        out.data[i] = static_cast<float>((image.data[i] - mean) / std);
    }
    return out;
}

SyntheticPair composite(const CompositeInputs& in) {
    const Tensor& inf_img = in.infected_image;
    if (!inf_img.same_shape(in.infection_mask) || !inf_img.same_shape(in.healthy_image) ||
        !inf_img.same_shape(in.healthy_lung_mask)) {
        throw ValidationError("composite: all four inputs must share one shape");
    }
    if (!in.infection_mask.is_binary() || !in.healthy_lung_mask.is_binary()) {
        throw ValidationError("composite: masks must be binary");
    }

    SyntheticPair out;
    out.image = Tensor(inf_img.shape);
    out.mask = Tensor(inf_img.shape);
    for (size_t i = 0; i < inf_img.data.size(); ++i) {
        const float lung = in.healthy_lung_mask.data[i];
        const float inf = in.infection_mask.data[i];
        // [healthy*(1-inf) + infected*inf] clipped to the healthy lung
        const float blended = in.healthy_image.data[i] * (1.0f - inf) + in.infected_image.data[i] * inf;
        out.image.data[i] = blended * lung;
        out.mask.data[i] = lung * inf;
    }
    out.infection_rate = metrics::infection_rate(out.mask, in.healthy_lung_mask);
    return out;
}

bool filter_synthetic(const SyntheticPair& pair, double min_rate) {
    return pair.infection_rate > min_rate;
}

AffineParams sample_affine(const AffineRanges& ranges, Rng& rng) {
    AffineParams p;
    p.zoom = rng.uniform(ranges.zoom_lo, ranges.zoom_hi);
    p.shift_y = rng.uniform(-ranges.shift, ranges.shift);
    p.shift_x = rng.uniform(-ranges.shift, ranges.shift);
    p.shear_deg = rng.uniform(-ranges.shear_deg, ranges.shear_deg);
    return p;
}

std::pair<Tensor, Tensor> affine_augment(const Tensor& image, const Tensor& mask,
                                         const AffineParams& params) {
    if (image.rank() != 2 || !image.same_shape(mask)) {
        throw ValidationError("affine_augment expects two equal-shape 2-D tensors");
    }
    const int64_t H = image.dim(0), W = image.dim(1);
    const double cy = static_cast<double>(H - 1) / 2.0;
    const double cx = static_cast<double>(W - 1) / 2.0;
    const double ty = params.shift_y * static_cast<double>(H);
    const double tx = params.shift_x * static_cast<double>(W);
    const double shear = std::tan(params.shear_deg * 3.141592653589793 / 180.0);

    // Forward map: dst = Z * Sh * (src - c) + c + t with Z = zoom*I and
    // Sh = [[1, shear], [0, 1]]. Destination pixels are pulled through the
    // inverse so every output pixel is defined.
    const double inv_zoom = 1.0 / params.zoom;
    // inverse of Z*Sh: (1/zoom) * [[1, -shear], [0, 1]]
    auto src_of = [&](double dy, double dx, double& sy, double& sx) {
        const double ry = dy - cy - ty;
        const double rx = dx - cx - tx;
        sx = inv_zoom * (rx - shear * ry) + cx;
        sy = inv_zoom * ry + cy;
    };

    float fill = image.data.empty() ? 0.0f : image.data[0];
    for (float v : image.data) fill = std::min(fill, v);

    Tensor out_img(image.shape), out_mask(mask.shape);
    for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x) {
            double sy, sx;
            src_of(static_cast<double>(y), static_cast<double>(x), sy, sx);
            // image: bilinear
            {
                const int64_t y0 = static_cast<int64_t>(std::floor(sy));
                const int64_t x0 = static_cast<int64_t>(std::floor(sx));
                if (y0 < -1 || y0 >= H || x0 < -1 || x0 >= W) {
                    out_img.at2(y, x) = fill;
                } else {
                    const double dy = sy - static_cast<double>(y0);
                    const double dx = sx - static_cast<double>(x0);
                    auto sample = [&](int64_t yy, int64_t xx) -> double {
                        if (yy < 0 || yy >= H || xx < 0 || xx >= W) return fill;
                        return image.at2(yy, xx);
                    };
                    const double v = (1.0 - dy) * ((1.0 - dx) * sample(y0, x0) + dx * sample(y0, x0 + 1)) +
                                     dy * ((1.0 - dx) * sample(y0 + 1, x0) + dx * sample(y0 + 1, x0 + 1));
                    out_img.at2(y, x) = static_cast<float>(v);
                }
            }
            // mask: nearest then re-binarize; outside the canvas is background
            {
                const int64_t yn = static_cast<int64_t>(std::llround(sy));
                const int64_t xn = static_cast<int64_t>(std::llround(sx));
                float v = 0.0f;
                if (yn >= 0 && yn < H && xn >= 0 && xn < W) v = mask.at2(yn, xn);
                out_mask.at2(y, x) = v >= 0.5f ? 1.0f : 0.0f;
            }
        }
    }
    return {std::move(out_img), std::move(out_mask)};
}

CorpusResult generate_corpus(const std::vector<data_io::CtSlice>& infected,
                             const std::vector<data_io::CtSlice>& healthy, int64_t count,
                             uint64_t seed, double min_rate) {
    if (count < 0) throw ParamError("generate_corpus: count must be >= 0");
    if (count == 0) return {};
    if (infected.empty() || healthy.empty()) {
        throw ValidationError("generate_corpus: both slice sets must be non-empty");
    }
    for (const auto& s : infected) {
        if (!s.infection_mask) {
            throw ValidationError("generate_corpus: infected slice " + s.patient_id + "/" +
                                  s.slice_id + " has no infection mask");
        }
    }

    CorpusResult result;
    const int64_t n_healthy = static_cast<int64_t>(healthy.size());
    for (int64_t slot = 0; slot < count; ++slot) {
        const uint64_t slot_seed = mix_seed(seed, static_cast<uint64_t>(slot));
        Rng rng(slot_seed);
        const auto& inf = infected[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(infected.size())))];
        const Tensor inf_norm = normalize(inf.image);
        const int64_t start = rng.uniform_int(n_healthy);

        bool kept = false;
        // rotate through the healthy partners until one yields enough lesion
        for (int64_t t = 0; t < n_healthy && !kept; ++t) {
            const auto& h = healthy[static_cast<size_t>((start + t) % n_healthy)];
            if (!h.image.same_shape(inf.image) || h.lung_empty()) continue;
            CompositeInputs ci{inf_norm, *inf.infection_mask, normalize(h.image), h.lung_mask};
            SyntheticPair pair = composite(ci);
            if (!filter_synthetic(pair, min_rate)) continue;
            CorpusItem item;
            item.pair = std::move(pair);
            item.infected_ref = inf.patient_id + "/" + inf.slice_id;
            item.healthy_ref = h.patient_id + "/" + h.slice_id;
            item.slot_seed = slot_seed;
            result.items.push_back(std::move(item));
            kept = true;
        }
        if (!kept) ++result.failed_slots;
    }
    return result;
}

}  // namespace covseg::augment
