// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dfshield/rng.hpp"
#include "dfshield/tensor.hpp"

namespace dfshield {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ModelKind { MlpBn, ConvTiny };

inline std::string to_string(ModelKind k) {
    return k == ModelKind::MlpBn ? "mlp-bn" : "conv-tiny";
}

inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "mlp-bn") return ModelKind::MlpBn;
    if (s == "conv-tiny") return ModelKind::ConvTiny;
    throw std::invalid_argument("unknown model kind: " + s);
}

// mlp-bn: three affine+BN+ReLU blocks then an output affine.
// conv-tiny: 3x3 conv (8ch) + BN + ReLU, 3x3 conv (16ch) + BN + ReLU,
// global average pool, output affine. Input is [C,H,W] with H=W=8.
struct ModelSpec {
    ModelKind kind = ModelKind::MlpBn;
    Shape input_shape;                      // per-sample shape
    int num_classes = 2;
    std::vector<int> hidden = {64, 64, 64}; // mlp widths
    std::vector<int> channels = {8, 16};    // conv channel counts

    std::size_t input_size() const { return numel(input_shape); }

    void validate() const {
        if (num_classes < 2)
            throw std::invalid_argument("model: num_classes must be >= 2");
        if (kind == ModelKind::MlpBn && hidden.size() != 3)
            throw std::invalid_argument(
                "model: mlp-bn requires exactly 3 hidden widths");
        if (kind == ModelKind::ConvTiny && input_shape.size() != 3)
            throw std::invalid_argument(
                "model: conv-tiny requires a [C,H,W] input shape");
        if (kind == ModelKind::ConvTiny && channels.size() != 2)
            throw std::invalid_argument(
                "model: conv-tiny requires exactly 2 channel counts");
    }

    std::size_t num_bn_layers() const {
        return kind == ModelKind::MlpBn ? hidden.size() : channels.size();
    }

    // feature count normalized by BN layer l
    std::size_t bn_width(std::size_t l) const {
        return kind == ModelKind::MlpBn
                   ? static_cast<std::size_t>(hidden[l])
                   : static_cast<std::size_t>(channels[l]);
    }
};

// Ordered named parameter tensors. Order is fixed by construction and
// defines the checkpoint tensor directory.
struct ParamStore {
    std::vector<std::pair<std::string, Tensor>> params;
    std::string role = "teacher";

    Tensor& at(const std::string& name) {
        for (auto& [n, t] : params)
            if (n == name) return t;
        throw std::invalid_argument("param not found: " + name);
    }
    const Tensor& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }
    void add(std::string name, Tensor t) {
        for (auto& [n, _] : params)
            if (n == name)
                throw std::invalid_argument("duplicate param name: " + name);
        params.emplace_back(std::move(name), std::move(t));
    }
};

struct BnLayerState {
    std::vector<double> running_mean;
    std::vector<double> running_var; // strictly positive elementwise
};

struct BNState {
    std::vector<BnLayerState> layers;
    double momentum = 0.1;
    double eps = 1e-5;
};

// Differentiable per-layer batch statistics of one forward pass.
struct BatchStats {
    std::vector<Tensor> mean;
    std::vector<Tensor> var; // biased (1/n) variance, matching BN
};

enum class ForwardMode { Eval, Train };

struct ForwardResult {
    Tensor logits;
    Tensor penultimate; // input to the output affine
    BatchStats stats;   // populated when capture_stats or Train mode
};

namespace detail {

// Normalizes x over `reduce_axes` (all axes except the feature/channel
// one). Eval mode uses running stats and never touches them; Train mode
// normalizes by batch stats and updates the running EMA. capture
// additionally records differentiable batch stats.
inline Tensor bn_forward(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, BnLayerState& st,
                         const BNState& hp, ForwardMode mode, bool capture,
                         const std::vector<std::size_t>& reduce_axes,
                         const Shape& stat_shape, BatchStats* out_stats) {
    std::size_t count = 1;
    for (auto ax : reduce_axes) count *= x.shape()[ax];
    Tensor batch_mean, batch_var;
    if (mode == ForwardMode::Train || capture) {
        if (count < 2)
            throw std::invalid_argument(
                "batch norm: batch statistics need at least 2 samples");
        batch_mean = mean_axes(x, reduce_axes);
        Tensor centered = x - batch_mean;
        batch_var = mean_axes(centered * centered, reduce_axes);
        if (out_stats) {
            out_stats->mean.push_back(batch_mean);
            out_stats->var.push_back(batch_var);
        }
    }
    Tensor mean_t, var_t;
    if (mode == ForwardMode::Train) {
        mean_t = batch_mean;
        var_t = batch_var;
        // EMA on detached values
        for (std::size_t i = 0; i < st.running_mean.size(); ++i) {
            st.running_mean[i] = (1.0 - hp.momentum) * st.running_mean[i] +
                                 hp.momentum * batch_mean.data()[i];
            st.running_var[i] = (1.0 - hp.momentum) * st.running_var[i] +
                                hp.momentum * batch_var.data()[i];
        }
    } else {
        mean_t = Tensor::from_data(stat_shape, st.running_mean);
        var_t = Tensor::from_data(stat_shape, st.running_var);
    }
    Tensor inv_std = Tensor::scalar(1.0) / sqrt_t(var_t + hp.eps);
    return (x - mean_t) * inv_std * gamma + beta;
}

} // namespace detail

// Evaluates the network. Eval mode is a pure function of
// (params, bn, x); Train mode mutates bn running statistics.
inline ForwardResult forward(const ModelSpec& spec, const ParamStore& params,
                             BNState& bn, const Tensor& x, ForwardMode mode,
                             bool capture_stats = false) {
    spec.validate();
    ForwardResult res;
    BatchStats* stats =
        (capture_stats || mode == ForwardMode::Train) ? &res.stats : nullptr;
    if (spec.kind == ModelKind::MlpBn) {
        if (x.shape().size() != 2 || x.shape()[1] != spec.input_size())
            throw std::invalid_argument("forward: input " +
                                        shape_str(x.shape()) +
                                        " does not match model input size " +
                                        std::to_string(spec.input_size()));
        Tensor h = x;
        for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
            std::string p = "fc" + std::to_string(l);
            Tensor z = matmul(h, params.at(p + ".w")) + params.at(p + ".b");
            Shape stat_shape{1, static_cast<std::size_t>(spec.hidden[l])};
            z = detail::bn_forward(z, params.at("bn" + std::to_string(l) + ".gamma"),
                                   params.at("bn" + std::to_string(l) + ".beta"),
                                   bn.layers[l], bn, mode, capture_stats, {0},
                                   stat_shape, stats);
            h = relu(z);
        }
        res.penultimate = h;
        res.logits = matmul(h, params.at("out.w")) + params.at("out.b");
    } else {
        Shape want{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
        if (x.shape().size() != 4 || x.shape()[1] != want[0] ||
            x.shape()[2] != want[1] || x.shape()[3] != want[2])
            throw std::invalid_argument("forward: input " +
                                        shape_str(x.shape()) +
                                        " does not match model input shape " +
                                        shape_str(want));
        Tensor h = x;
        for (std::size_t l = 0; l < spec.channels.size(); ++l) {
            std::string p = "conv" + std::to_string(l);
            Tensor z = conv2d(h, params.at(p + ".w"), params.at(p + ".b"), 1);
            Shape stat_shape{1, static_cast<std::size_t>(spec.channels[l]), 1, 1};
            z = detail::bn_forward(z, params.at("bn" + std::to_string(l) + ".gamma"),
                                   params.at("bn" + std::to_string(l) + ".beta"),
                                   bn.layers[l], bn, mode, capture_stats,
                                   {0, 2, 3}, stat_shape, stats);
            h = relu(z);
        }
        // global average pool to [B, C_last]
        Tensor pooled = mean_axes(h, {2, 3});
        pooled = reshape(pooled, {x.shape()[0],
                                  static_cast<std::size_t>(spec.channels.back())});
        res.penultimate = pooled;
        res.logits = matmul(pooled, params.at("out.w")) + params.at("out.b");
    }
    return res;
}

// Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases, BN scale
// 1 / shift 0, running mean 0 / variance 1.
inline std::pair<ParamStore, BNState> init_params(const ModelSpec& spec,
                                                  Rng& rng) {
    spec.validate();
    ParamStore ps;
    BNState bn;
    auto kaiming = [&](Shape shape, std::size_t fan_in) {
        double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::vector<double> d(numel(shape));
        for (auto& v : d) v = rng.uniform(-bound, bound);
        return Tensor::from_data(std::move(shape), std::move(d), true);
    };
    auto add_bn = [&](std::size_t l, std::size_t width, Shape stat_shape) {
        ps.add("bn" + std::to_string(l) + ".gamma",
               Tensor::from_data(stat_shape, std::vector<double>(width, 1.0), true));
        ps.add("bn" + std::to_string(l) + ".beta",
               Tensor::from_data(stat_shape, std::vector<double>(width, 0.0), true));
        BnLayerState st;
        st.running_mean.assign(width, 0.0);
        st.running_var.assign(width, 1.0);
        bn.layers.push_back(std::move(st));
    };
    if (spec.kind == ModelKind::MlpBn) {
        std::size_t in = spec.input_size();
        for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
            std::size_t out = static_cast<std::size_t>(spec.hidden[l]);
            ps.add("fc" + std::to_string(l) + ".w", kaiming({in, out}, in));
            ps.add("fc" + std::to_string(l) + ".b",
                   Tensor::from_data({1, out}, std::vector<double>(out, 0.0), true));
            add_bn(l, out, {1, out});
            in = out;
        }
        std::size_t c = static_cast<std::size_t>(spec.num_classes);
        ps.add("out.w", kaiming({in, c}, in));
        ps.add("out.b", Tensor::from_data({1, c}, std::vector<double>(c, 0.0), true));
    } else {
        std::size_t in_ch = spec.input_shape[0];
        for (std::size_t l = 0; l < spec.channels.size(); ++l) {
            std::size_t out_ch = static_cast<std::size_t>(spec.channels[l]);
            std::size_t fan_in = in_ch * 9;
            ps.add("conv" + std::to_string(l) + ".w",
                   kaiming({out_ch, in_ch, 3, 3}, fan_in));
            ps.add("conv" + std::to_string(l) + ".b",
                   Tensor::from_data({out_ch}, std::vector<double>(out_ch, 0.0),
                                     true));
            add_bn(l, out_ch, {1, out_ch, 1, 1});
            in_ch = out_ch;
        }
        std::size_t c = static_cast<std::size_t>(spec.num_classes);
        ps.add("out.w", kaiming({in_ch, c}, in_ch));
        ps.add("out.b", Tensor::from_data({1, c}, std::vector<double>(c, 0.0), true));
    }
    return {std::move(ps), std::move(bn)};
}

// ---------------------------------------------------------------------------
// checkpoint container: magic "DFS1", u64-LE length-prefixed JSON
// header, then each tensor as little-endian f64 in directory order.

namespace detail {

static_assert(sizeof(double) == 8, "checkpoint format assumes 8-byte doubles");

inline void write_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void write_f64s(std::string& out, const std::vector<double>& v) {
    for (double d : v) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        write_u64(out, bits);
    }
}

inline std::uint64_t read_u64(const std::string& buf, std::size_t& pos,
                              const char* what) {
    if (pos + 8 > buf.size())
        throw IoError(std::string("truncated file while reading ") + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i]))
             << (8 * i);
    pos += 8;
    return v;
}

inline std::vector<double> read_f64s(const std::string& buf, std::size_t& pos,
                                     std::size_t n, const char* what) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = read_u64(buf, pos, what);
        std::memcpy(&v[i], &bits, 8);
    }
    return v;
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open file: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write file: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline nlohmann::json spec_to_json(const ModelSpec& spec) {
    return {{"kind", to_string(spec.kind)},
            {"input_shape", spec.input_shape},
            {"num_classes", spec.num_classes},
            {"hidden", spec.hidden},
            {"channels", spec.channels}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec spec;
    spec.kind = model_kind_from_string(j.at("kind").get<std::string>());
    spec.input_shape = j.at("input_shape").get<Shape>();
    spec.num_classes = j.at("num_classes").get<int>();
    spec.hidden = j.at("hidden").get<std::vector<int>>();
    spec.channels = j.at("channels").get<std::vector<int>>();
    return spec;
}

} // namespace detail

inline std::string serialize_checkpoint(const ModelSpec& spec,
                                        const ParamStore& params,
                                        const BNState& bn) {
    nlohmann::json dir = nlohmann::json::array();
    for (const auto& [name, t] : params.params)
        dir.push_back({{"name", name}, {"shape", t.shape()}});
    nlohmann::json bn_layers = nlohmann::json::array();
    for (const auto& l : bn.layers)
        bn_layers.push_back({{"width", l.running_mean.size()}});
    nlohmann::json header = {{"version", 1},
                             {"model", detail::spec_to_json(spec)},
                             {"role", params.role},
                             {"bn", {{"momentum", bn.momentum}, {"eps", bn.eps}}},
                             {"bn_layers", bn_layers},
                             {"tensors", dir}};
    std::string hs = header.dump();
    std::string out = "DFS1";
    detail::write_u64(out, hs.size());
    out += hs;
    for (const auto& [name, t] : params.params) detail::write_f64s(out, t.data());
    for (const auto& l : bn.layers) {
        detail::write_f64s(out, l.running_mean);
        detail::write_f64s(out, l.running_var);
    }
    return out;
}

inline void save_checkpoint(const std::string& path, const ModelSpec& spec,
                            const ParamStore& params, const BNState& bn) {
    detail::write_file(path, serialize_checkpoint(spec, params, bn));
}

struct Model {
    ModelSpec spec;
    ParamStore params;
    BNState bn;
};

inline Model deserialize_checkpoint(const std::string& buf) {
    if (buf.size() < 4 || buf.compare(0, 4, "DFS1") != 0)
        throw IoError("bad magic: not a DFS1 checkpoint");
    std::size_t pos = 4;
    std::uint64_t hlen = detail::read_u64(buf, pos, "header length");
    if (pos + hlen > buf.size()) throw IoError("truncated file in header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.substr(pos, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("corrupt header: ") + e.what());
    }
    pos += hlen;
    if (header.at("version").get<int>() != 1)
        throw IoError("version mismatch: expected checkpoint version 1, got " +
                      header.at("version").dump());
    Model m;
    m.spec = detail::spec_from_json(header.at("model"));
    m.params.role = header.at("role").get<std::string>();
    m.bn.momentum = header.at("bn").at("momentum").get<double>();
    m.bn.eps = header.at("bn").at("eps").get<double>();
    for (const auto& e : header.at("tensors")) {
        Shape shape = e.at("shape").get<Shape>();
        auto data = detail::read_f64s(buf, pos, numel(shape), "tensor data");
        m.params.add(e.at("name").get<std::string>(),
                     Tensor::from_data(std::move(shape), std::move(data), true));
    }
    for (const auto& e : header.at("bn_layers")) {
        std::size_t w = e.at("width").get<std::size_t>();
        BnLayerState st;
        st.running_mean = detail::read_f64s(buf, pos, w, "bn running mean");
        st.running_var = detail::read_f64s(buf, pos, w, "bn running var");
        m.bn.layers.push_back(std::move(st));
    }
    if (pos != buf.size()) throw IoError("trailing bytes after checkpoint data");
    return m;
}

inline Model load_checkpoint(const std::string& path) {
    return deserialize_checkpoint(detail::read_file(path));
}

// FNV-1a over the serialized bytes; used by no-mutation contracts.
inline std::uint64_t checkpoint_hash(const ModelSpec& spec,
                                     const ParamStore& params,
                                     const BNState& bn) {
    return fnv1a(serialize_checkpoint(spec, params, bn));
}

// Deep copy with fresh leaf tensors (student initialized from teacher).
inline Model clone_model(const Model& m, const std::string& role) {
    Model out;
    out.spec = m.spec;
    out.bn = m.bn;
    out.params.role = role;
    for (const auto& [name, t] : m.params.params)
        out.params.add(name, Tensor::from_data(t.shape(), t.data(), true));
    return out;
}

} // namespace dfshield
