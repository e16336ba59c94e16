#include "covseg/tensor.hpp"

#include <cmath>
#include <sstream>

namespace covseg {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor Tensor::full(std::vector<int64_t> shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::initializer_list<float> values) {
    return Tensor(std::move(shape), std::vector<float>(values));
}

bool Tensor::all_finite() const {
    for (float v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool Tensor::is_binary() const {
    for (float v : data) {
        if (v != 0.0f && v != 1.0f) return false;
    }
    return true;
}

double Tensor::sum() const {
    double acc = 0.0;
    for (float v : data) acc += v;
    return acc;
}

float Tensor::max_abs() const {
    float m = 0.0f;
    for (float v : data) m = std::max(m, std::fabs(v));
    return m;
}

int64_t Rng::uniform_int(int64_t n) {
    if (n <= 0) throw ParamError("uniform_int requires n > 0");
    // Rejection sampling keeps the draw unbiased.
    uint64_t un = static_cast<uint64_t>(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
        x = gen_();
    } while (x >= limit);
    return static_cast<int64_t>(x % un);
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.141592653589793 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
}

uint64_t mix_seed(uint64_t a, uint64_t b) {
    // splitmix64 finalizer over the combined words
    uint64_t z = a + 0x9e3779b97f4a7c15ULL + (b << 1 | 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return mix_seed(mix_seed(a, b), c); }

Tensor randn(Rng& rng, std::vector<int64_t> shape, double stddev) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = static_cast<float>(rng.normal() * stddev);
    return t;
}

Tensor rand_uniform(Rng& rng, std::vector<int64_t> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

}  // namespace covseg
