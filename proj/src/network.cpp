#include "covseg/network.hpp"

#include <cmath>
#include <fstream>

#include "covseg/data_io.hpp"

namespace covseg::network {

Tensor& ModelParams::at(const std::string& name) {
    return entries[index_of(name)].value;
}

const Tensor& ModelParams::at(const std::string& name) const {
    return entries[index_of(name)].value;
}

size_t ModelParams::index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
}

void ModelParams::add(std::string name, Tensor value, bool trainable) {
    if (index_.count(name)) throw ValidationError("duplicate parameter '" + name + "'");
    index_[name] = entries.size();
    entries.push_back(ParamEntry{std::move(name), std::move(value), trainable});
}

bool ModelParams::all_finite() const {
    for (const auto& e : entries) {
        if (!e.value.all_finite()) return false;
    }
    return true;
}

namespace {

struct Widths {
    int64_t base;
    int64_t enc[4];   // encoder block filters
    int64_t dec[4];   // decoder block filters
    int64_t skip[4];  // channels concatenated by each decoder block
    int64_t cpb;      // deepest width
};

Widths widths_for(const ModelConfig& cfg) {
    const int64_t b = cfg.base_width;
    Widths w{};
    w.base = b;
    w.enc[0] = b;
    w.enc[1] = 2 * b;
    w.enc[2] = 4 * b;
    w.enc[3] = 8 * b;
    w.cpb = 8 * b;
    w.dec[0] = 16 * b;
    w.dec[1] = 8 * b;
    w.dec[2] = 4 * b;
    w.dec[3] = 2 * b;
    w.skip[0] = w.enc[2];  // dec1 restores H/8 -> enc3 features
    w.skip[1] = w.enc[1];
    w.skip[2] = w.enc[0];
    w.skip[3] = b;  // stem output at full resolution
    return w;
}

void add_conv(ModelParams& m, Rng& rng, const std::string& prefix, int64_t cout, int64_t cin,
              int64_t k) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
    m.add(prefix + ".weight", randn(rng, {cout, cin, k, k}, stddev));
    m.add(prefix + ".bias", Tensor::zeros({cout}));
}

void add_bn(ModelParams& m, const std::string& prefix, int64_t c) {
    m.add(prefix + ".scale", Tensor::full({c}, 1.0f));
    m.add(prefix + ".shift", Tensor::zeros({c}));
    m.add(prefix + ".running_mean", Tensor::zeros({c}), /*trainable=*/false);
    m.add(prefix + ".running_var", Tensor::full({c}, 1.0f), /*trainable=*/false);
}

}  // namespace

ModelParams build_model(const ModelConfig& cfg) {
    if (cfg.base_width < 4) throw ParamError("base_width must be >= 4");
    if (cfg.input_channels < 1) throw ParamError("input_channels must be >= 1");
    const Widths w = widths_for(cfg);

    ModelParams m;
    m.config = cfg;
    Rng rng(mix_seed(cfg.seed, 0x6d6f64656cULL));

    add_conv(m, rng, "init.conv", w.base, cfg.input_channels, 3);
    add_bn(m, "init.bn", w.base);

    int64_t in_ch = w.base;
    for (int k = 0; k < 4; ++k) {
        const std::string p = "enc" + std::to_string(k + 1);
        const int64_t f = w.enc[k];
        // unit 1 halves the resolution; its skip path needs a projection
        add_conv(m, rng, p + ".unit1.conv1", f, in_ch, 3);
        add_bn(m, p + ".unit1.bn1", f);
        add_conv(m, rng, p + ".unit1.conv2", f, f, 3);
        add_bn(m, p + ".unit1.bn2", f);
        add_conv(m, rng, p + ".unit1.proj", f, in_ch, 1);
        // unit 2 keeps shape; identity skip
        add_conv(m, rng, p + ".unit2.conv1", f, f, 3);
        add_bn(m, p + ".unit2.bn1", f);
        add_conv(m, rng, p + ".unit2.conv2", f, f, 3);
        add_bn(m, p + ".unit2.bn2", f);
        in_ch = f;
    }

    if (cfg.cpb_enabled) {
        add_conv(m, rng, "cpb.proj", w.cpb, w.cpb, 1);
        for (int d : {1, 2, 4, 8}) {
            add_conv(m, rng, "cpb.d" + std::to_string(d), w.cpb, w.cpb, 3);
        }
    }

    int64_t dec_in = w.cpb;
    for (int k = 0; k < 4; ++k) {
        const std::string p = "dec" + std::to_string(k + 1);
        add_conv(m, rng, p + ".conv", w.dec[k], dec_in + w.skip[k], 3);
        add_bn(m, p + ".bn", w.dec[k]);
        dec_in = w.dec[k];
    }

    add_conv(m, rng, "head.conv", 1, w.dec[3], 1);
    return m;
}

ParamLedger count_params(const ModelParams& params) {
    ParamLedger ledger;
    for (const auto& e : params.entries) {
        if (!e.trainable) continue;
        ledger.per_layer.push_back({e.name, e.value.numel()});
        ledger.total += e.value.numel();
    }
    return ledger;
}

int64_t ParamLedger::prefix_total(const std::string& prefix) const {
    int64_t t = 0;
    for (const auto& lc : per_layer) {
        if (lc.name.rfind(prefix, 0) == 0) t += lc.count;
    }
    return t;
}

namespace {

// Runs the ladder either recording onto a tape (train) or as plain
// evaluation. Handles carry the tensor in eval mode and the tape id in
// train mode.
struct Runner {
    const ModelParams& cparams;
    ModelParams* mparams = nullptr;  // set in train mode (running stats update)
    GradTape* tape = nullptr;
    bool batch_stats = false;  // eval with the batch's own statistics
    std::vector<std::pair<size_t, GradTape::ValueId>> param_ids;
    std::unordered_map<size_t, GradTape::ValueId> id_cache;

    struct H {
        Tensor value;
        GradTape::ValueId id = -1;
    };

    bool recording() const { return tape != nullptr; }

    GradTape::ValueId pid(const std::string& name) {
        const size_t idx = cparams.index_of(name);
        auto it = id_cache.find(idx);
        if (it != id_cache.end()) return it->second;
        const GradTape::ValueId id = tape->leaf(cparams.entries[idx].value);
        id_cache.emplace(idx, id);
        if (cparams.entries[idx].trainable) param_ids.emplace_back(idx, id);
        return id;
    }

    H input(Tensor batch) {
        if (recording()) return H{{}, tape->leaf(std::move(batch))};
        return H{std::move(batch), -1};
    }

    H conv(const H& x, const std::string& prefix, const ops::Conv2dSpec& spec) {
        if (recording()) {
            return H{{}, taped::conv2d(*tape, x.id, pid(prefix + ".weight"), pid(prefix + ".bias"), spec)};
        }
        return H{ops::conv2d(x.value, cparams.at(prefix + ".weight"), cparams.at(prefix + ".bias"), spec), -1};
    }

    H bn(const H& x, const std::string& prefix) {
        if (recording()) {
            return H{{}, taped::batch_norm_train(*tape, x.id, pid(prefix + ".scale"),
                                                 pid(prefix + ".shift"),
                                                 mparams->at(prefix + ".running_mean"),
                                                 mparams->at(prefix + ".running_var"))};
        }
        if (batch_stats) {
            Tensor rm = cparams.at(prefix + ".running_mean");  // scratch copies
            Tensor rv = cparams.at(prefix + ".running_var");
            return H{ops::batch_norm_train(x.value, cparams.at(prefix + ".scale"),
                                           cparams.at(prefix + ".shift"), rm, rv, ops::kBatchNormEps,
                                           0.0, nullptr),
                     -1};
        }
        return H{ops::batch_norm_eval(x.value, cparams.at(prefix + ".scale"), cparams.at(prefix + ".shift"),
                                      cparams.at(prefix + ".running_mean"), cparams.at(prefix + ".running_var"),
                                      ops::kBatchNormEps),
                 -1};
    }

    H relu(const H& x) {
        if (recording()) return H{{}, taped::relu(*tape, x.id)};
        return H{ops::relu(x.value), -1};
    }
    H sigmoid(const H& x) {
        if (recording()) return H{{}, taped::sigmoid(*tape, x.id)};
        return H{ops::sigmoid(x.value), -1};
    }
    H upsample(const H& x) {
        if (recording()) return H{{}, taped::upsample2x(*tape, x.id)};
        return H{ops::upsample2x(x.value), -1};
    }
    H cat(const H& a, const H& b) {
        if (recording()) return H{{}, taped::concat_channels(*tape, a.id, b.id)};
        return H{ops::concat_channels(a.value, b.value), -1};
    }
    H add(const H& a, const H& b) {
        if (recording()) return H{{}, taped::add(*tape, a.id, b.id)};
        return H{ops::add(a.value, b.value), -1};
    }

    H conv_bn_relu(const H& x, const std::string& conv_name, const std::string& bn_name,
                   const ops::Conv2dSpec& spec) {
        return relu(bn(conv(x, conv_name, spec), bn_name));
    }

    H encoding_unit(const H& x, const std::string& prefix, bool downsample) {
        const ops::Conv2dSpec first{downsample ? 2 : 1, 1, ops::Padding::Same, 0};
        const ops::Conv2dSpec rest{1, 1, ops::Padding::Same, 0};
        H y = conv_bn_relu(x, prefix + ".conv1", prefix + ".bn1", first);
        y = conv_bn_relu(y, prefix + ".conv2", prefix + ".bn2", rest);
        // residual link; unit 1 projects the skip to the new shape
        H skip = downsample ? conv(x, prefix + ".proj", ops::Conv2dSpec{2, 1, ops::Padding::Same, 0}) : x;
        return add(skip, y);
    }

    H encoding_block(const H& x, const std::string& prefix) {
        H y = encoding_unit(x, prefix + ".unit1", /*downsample=*/true);
        return encoding_unit(y, prefix + ".unit2", /*downsample=*/false);
    }

    H context_block(const H& x) {
        const ops::Conv2dSpec proj{1, 1, ops::Padding::Same, 0};
        H acc = conv(x, "cpb.proj", proj);
        for (int d : {1, 2, 4, 8}) {
            const ops::Conv2dSpec spec{1, d, ops::Padding::Same, 0};
            acc = add(acc, conv(x, "cpb.d" + std::to_string(d), spec));
        }
        return acc;
    }

    H decoding_block(const H& x, const H& skip, const std::string& prefix) {
        H y = upsample(x);
        y = cat(y, skip);
        return conv_bn_relu(y, prefix + ".conv", prefix + ".bn", ops::Conv2dSpec{1, 1, ops::Padding::Same, 0});
    }

    H run(Tensor batch) {
        const ops::Conv2dSpec s1{1, 1, ops::Padding::Same, 0};
        H x = input(std::move(batch));
        H stem = conv_bn_relu(x, "init.conv", "init.bn", s1);
        H e1 = encoding_block(stem, "enc1");
        H e2 = encoding_block(e1, "enc2");
        H e3 = encoding_block(e2, "enc3");
        H e4 = encoding_block(e3, "enc4");
        H bottom = cparams.config.cpb_enabled ? context_block(e4) : e4;
        H d1 = decoding_block(bottom, e3, "dec1");
        H d2 = decoding_block(d1, e2, "dec2");
        H d3 = decoding_block(d2, e1, "dec3");
        H d4 = decoding_block(d3, stem, "dec4");
        H logits = conv(d4, "head.conv", s1);
        return sigmoid(logits);
    }
};

void check_forward_input(const ModelParams& params, const Tensor& batch) {
    if (batch.rank() != 4) {
        throw ShapeError("forward expects a (N,C,H,W) batch, got " + batch.shape_str());
    }
    if (batch.dim(1) != params.config.input_channels) {
        throw ShapeError("forward expects " + std::to_string(params.config.input_channels) +
                         " input channels, got " + std::to_string(batch.dim(1)));
    }
    if (batch.dim(2) % 16 != 0 || batch.dim(3) % 16 != 0) {
        throw ShapeError("spatial dimensions must be divisible by 16 (four halvings), got " +
                         batch.shape_str());
    }
}

}  // namespace

Tensor forward_eval(const ModelParams& params, const Tensor& batch) {
    check_forward_input(params, batch);
    Runner r{params};
    return r.run(batch).value;
}

Tensor forward_batchstats(const ModelParams& params, const Tensor& batch) {
    check_forward_input(params, batch);
    Runner r{params};
    r.batch_stats = true;
    return r.run(batch).value;
}

TrainForward forward_train(ModelParams& params, const Tensor& batch, double cpb_l2_coefficient) {
    check_forward_input(params, batch);
    TrainForward out;
    Runner r{params, &params, &out.tape};
    Runner::H y = r.run(batch);
    out.output = y.id;
    out.param_ids = std::move(r.param_ids);
    out.cpb_l2_penalty = cpb_l2_penalty(params, cpb_l2_coefficient);
    return out;
}

Tensor forward(ModelParams& params, const Tensor& batch, Mode mode) {
    if (mode == Mode::Eval) return forward_eval(params, batch);
    TrainForward fwd = forward_train(params, batch, 0.0);
    return fwd.tape.value(fwd.output);
}

GradVec collect_param_grads(const ModelParams& params, const TrainForward& fwd) {
    GradVec grads(params.entries.size());
    for (const auto& [idx, id] : fwd.param_ids) {
        grads[idx] = fwd.tape.grad_or_zeros(id);
    }
    return grads;
}

double cpb_l2_penalty(const ModelParams& params, double coefficient) {
    if (!params.config.cpb_enabled || coefficient == 0.0) return 0.0;
    double acc = 0.0;
    for (const auto& e : params.entries) {
        if (e.name.rfind("cpb.", 0) == 0 && e.name.size() > 7 &&
            e.name.compare(e.name.size() - 7, 7, ".weight") == 0) {
            for (float v : e.value.data) acc += static_cast<double>(v) * v;
        }
    }
    return coefficient * acc;
}

void add_cpb_l2_gradients(const ModelParams& params, double coefficient, GradVec& grads) {
    if (!params.config.cpb_enabled || coefficient == 0.0) return;
    for (size_t i = 0; i < params.entries.size(); ++i) {
        const auto& e = params.entries[i];
        if (e.name.rfind("cpb.", 0) == 0 && e.name.size() > 7 &&
            e.name.compare(e.name.size() - 7, 7, ".weight") == 0) {
            if (grads[i].numel() == 0) grads[i] = Tensor::zeros(e.value.shape);
            for (size_t j = 0; j < e.value.data.size(); ++j) {
                grads[i].data[j] += static_cast<float>(2.0 * coefficient) * e.value.data[j];
            }
        }
    }
}

Tensor cpb_forward(const ModelParams& params, const Tensor& input) {
    if (!params.config.cpb_enabled) {
        throw ParamError("cpb_forward requires a model built with the context block enabled");
    }
    const int64_t expect = 8 * params.config.base_width;
    if (input.rank() != 4 || input.dim(1) != expect) {
        throw ShapeError("cpb_forward expects " + std::to_string(expect) + " channels, got " +
                         input.shape_str());
    }
    Runner r{params};
    Runner::H x{input, -1};
    return r.context_block(x).value;
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint file for writing: " + path);
    os.write("CRW1", 4);
    auto put_u32 = [&](uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    auto put_u64 = [&](uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); };
    put_u32(static_cast<uint32_t>(params.config.base_width));
    os.put(params.config.cpb_enabled ? 1 : 0);
    put_u64(params.config.seed);
    put_u32(static_cast<uint32_t>(params.config.input_channels));
    put_u32(static_cast<uint32_t>(params.entries.size()));
    for (const auto& e : params.entries) {
        put_u32(static_cast<uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        os.put(e.trainable ? 1 : 0);
        data_io::write_tensor_stream(os, e.value, data_io::DType::F32);
    }
    if (!os) throw DataError("checkpoint write failed: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "CRW1") {
        throw FormatError("bad checkpoint magic in " + path, 0);
    }
    auto get_u32 = [&]() {
        uint32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    auto get_u64 = [&]() {
        uint64_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    ModelParams m;
    m.config.base_width = get_u32();
    m.config.cpb_enabled = is.get() == 1;
    m.config.seed = get_u64();
    m.config.input_channels = get_u32();
    const uint32_t n = get_u32();
    if (!is) throw FormatError("truncated checkpoint header in " + path, static_cast<size_t>(is.tellg()));
    for (uint32_t i = 0; i < n; ++i) {
        const uint32_t len = get_u32();
        std::string name(len, '\0');
        is.read(name.data(), len);
        const int trainable = is.get();
        if (!is || trainable < 0) {
            const auto pos = is.tellg();
            throw FormatError("truncated checkpoint entry in " + path,
                              pos < 0 ? 0 : static_cast<size_t>(pos));
        }
        Tensor t = data_io::read_tensor_stream(is, static_cast<size_t>(is.tellg()));
        m.add(std::move(name), std::move(t), trainable == 1);
    }
    return m;
}

}  // namespace covseg::network
