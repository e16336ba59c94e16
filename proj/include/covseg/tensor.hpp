#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace covseg {

// Error taxonomy. The CLI maps these onto stable exit codes
// (config errors -> 2, data/validation errors -> 3).
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParamError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DegenerateInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Raised by the binary tensor reader; carries the byte offset of the defect.
struct FormatError : std::runtime_error {
    std::size_t offset;
    FormatError(const std::string& msg, std::size_t off)
        : std::runtime_error(msg + " (byte offset " + std::to_string(off) + ")"), offset(off) {}
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_to_string(const std::vector<int64_t>& shape);

// Dense row-major tensor of 32-bit reals. Feature maps are rank 4,
// interpreted as (batch, channels, height, width).
class Tensor {
public:
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(checked_numel(shape), 0.0f) {}
    Tensor(std::vector<int64_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_to_string(shape));
        }
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, float value);
    static Tensor from(std::vector<int64_t> shape, std::initializer_list<float> values);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    std::string shape_str() const { return shape_to_string(shape); }

    float& at2(int64_t y, int64_t x) { return data[static_cast<size_t>(y * shape[1] + x)]; }
    float at2(int64_t y, int64_t x) const { return data[static_cast<size_t>(y * shape[1] + x)]; }
    float& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    float at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }

    bool all_finite() const;
    // True when every element is exactly 0.0f or 1.0f.
    bool is_binary() const;
    double sum() const;    // accumulated in 64-bit
    float max_abs() const;

private:
    static size_t checked_numel(const std::vector<int64_t>& s) {
        int64_t n = shape_numel(s);
        return static_cast<size_t>(n);
    }
};

// Deterministic random source. All randomness in the library flows through
// this so runs are reproducible bit-for-bit; the normal transform is written
// out explicitly because std::normal_distribution is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }
    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int64_t uniform_int(int64_t n);  // [0, n)
    double normal();                 // Box-Muller

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Stable seed mixing for derived streams, e.g. (seed, epoch, index).
uint64_t mix_seed(uint64_t a, uint64_t b);
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c);

Tensor randn(Rng& rng, std::vector<int64_t> shape, double stddev = 1.0);
Tensor rand_uniform(Rng& rng, std::vector<int64_t> shape, double lo, double hi);

}  // namespace covseg
