// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfshield/model.hpp"
#include "dfshield/rng.hpp"
#include "dfshield/tensor.hpp"

namespace dfshield {

struct ValueRange {
    double lo;
    double hi;
};

struct Dataset {
    Tensor x;                       // [N, ...sample shape]
    std::vector<int> y;             // class indices
    int num_classes = 0;
    std::optional<ValueRange> range; // present for clamped domains

    std::size_t size() const { return y.size(); }
    Shape sample_shape() const {
        Shape s(x.shape().begin() + 1, x.shape().end());
        return s;
    }

    // One sample batch by index list (plain data, no graph).
    Tensor gather(const std::vector<std::size_t>& idx) const {
        std::size_t stride = numel(sample_shape());
        std::vector<double> out(idx.size() * stride);
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy(x.data().begin() + idx[i] * stride,
                      x.data().begin() + (idx[i] + 1) * stride,
                      out.begin() + i * stride);
        Shape shape = x.shape();
        shape[0] = idx.size();
        return Tensor::from_data(std::move(shape), std::move(out));
    }

    std::vector<int> gather_labels(const std::vector<std::size_t>& idx) const {
        std::vector<int> out(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) out[i] = y[idx[i]];
        return out;
    }
};

// C Gaussian clusters at fixed angular positions on the unit circle.
// Samples are ordered class-major; pure function of (arguments, seed).
inline Dataset make_gauss2d(int classes, int per_class, double spread,
                            Rng& rng) {
    if (classes < 2) throw std::invalid_argument("gauss2d: need >= 2 classes");
    if (per_class < 1) throw std::invalid_argument("gauss2d: need >= 1 sample per class");
    std::size_t n = static_cast<std::size_t>(classes) * per_class;
    std::vector<double> xs(n * 2);
    std::vector<int> ys(n);
    for (int c = 0; c < classes; ++c) {
        double ang = 2.0 * 3.14159265358979323846 * c / classes;
        double cx = std::cos(ang), cy = std::sin(ang);
        for (int i = 0; i < per_class; ++i) {
            std::size_t k = static_cast<std::size_t>(c) * per_class + i;
            xs[2 * k] = cx + spread * rng.normal();
            xs[2 * k + 1] = cy + spread * rng.normal();
            ys[k] = c;
        }
    }
    Dataset ds;
    ds.x = Tensor::from_data({n, 2}, std::move(xs));
    ds.y = std::move(ys);
    ds.num_classes = classes;
    return ds;
}

namespace detail {

// Fixed 8x8 class templates: four families (horizontal stripes,
// vertical stripes, checkerboards, corner blobs) with a per-family
// scale parameter, 16 classes max.
inline double pattern_value(int c, int i, int j) {
    int family = c % 4;
    int p = c / 4 + 1; // 1..4
    switch (family) {
        case 0: return ((i / p) % 2 == 0) ? 1.0 : 0.0;
        case 1: return ((j / p) % 2 == 0) ? 1.0 : 0.0;
        case 2: return (((i + j) / p) % 2 == 0) ? 1.0 : 0.0;
        default: {
            double ci = (p % 2 == 0) ? 1.5 : 5.5;
            double cj = (p <= 2) ? 1.5 : 5.5;
            double d2 = (i - ci) * (i - ci) + (j - cj) * (j - cj);
            return d2 <= 7.0 ? 1.0 : 0.0;
        }
    }
}

} // namespace detail

// Each class is a fixed 8x8 template plus uniform noise in
// [-noise, noise], clamped to [0,1]. Sample shape is [1,8,8].
inline Dataset make_patterns8x8(int classes, int per_class, double noise,
                                Rng& rng) {
    if (classes < 2 || classes > 16)
        throw std::invalid_argument("patterns8x8: classes must be in [2,16]");
    if (per_class < 1)
        throw std::invalid_argument("patterns8x8: need >= 1 sample per class");
    std::size_t n = static_cast<std::size_t>(classes) * per_class;
    std::vector<double> xs(n * 64);
    std::vector<int> ys(n);
    for (int c = 0; c < classes; ++c)
        for (int s = 0; s < per_class; ++s) {
            std::size_t k = static_cast<std::size_t>(c) * per_class + s;
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 8; ++j) {
                    double v = detail::pattern_value(c, i, j);
                    if (noise > 0.0) v += rng.uniform(-noise, noise);
                    xs[k * 64 + i * 8 + j] = std::min(1.0, std::max(0.0, v));
                }
            ys[k] = c;
        }
    Dataset ds;
    ds.x = Tensor::from_data({n, 1, 8, 8}, std::move(xs));
    ds.y = std::move(ys);
    ds.num_classes = classes;
    ds.range = ValueRange{0.0, 1.0};
    return ds;
}

// Deterministic 80/20 split by index stride: every 5th sample (index
// % 5 == 4) goes to the test split.
inline std::pair<Dataset, Dataset> split_train_test(const Dataset& ds) {
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < ds.size(); ++i)
        (i % 5 == 4 ? te : tr).push_back(i);
    auto make = [&](const std::vector<std::size_t>& idx) {
        Dataset out;
        out.x = ds.gather(idx);
        out.y = ds.gather_labels(idx);
        out.num_classes = ds.num_classes;
        out.range = ds.range;
        return out;
    };
    return {make(tr), make(te)};
}

// ---------------------------------------------------------------------------
// ".dfsd" container: magic "DFSD", u64-LE length-prefixed JSON header,
// then sample data as little-endian f64 and labels as u64.

inline std::string serialize_dataset(const Dataset& ds) {
    nlohmann::json header = {{"version", 1},
                             {"shape", ds.x.shape()},
                             {"num_classes", ds.num_classes}};
    if (ds.range)
        header["range"] = {ds.range->lo, ds.range->hi};
    std::string hs = header.dump();
    std::string out = "DFSD";
    detail::write_u64(out, hs.size());
    out += hs;
    detail::write_f64s(out, ds.x.data());
    for (int label : ds.y)
        detail::write_u64(out, static_cast<std::uint64_t>(label));
    return out;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
    detail::write_file(path, serialize_dataset(ds));
}

inline Dataset deserialize_dataset(const std::string& buf) {
    if (buf.size() < 4 || buf.compare(0, 4, "DFSD") != 0)
        throw IoError("bad magic: not a DFSD dataset");
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
        throw IoError("version mismatch: expected dataset version 1, got " +
                      header.at("version").dump());
    Dataset ds;
    Shape shape = header.at("shape").get<Shape>();
    if (shape.empty() || shape[0] == 0)
        throw IoError("invalid dataset: empty sample set");
    ds.num_classes = header.at("num_classes").get<int>();
    if (header.contains("range")) {
        auto r = header.at("range").get<std::vector<double>>();
        ds.range = ValueRange{r.at(0), r.at(1)};
    }
    std::size_t n = shape[0];
    auto data = detail::read_f64s(buf, pos, numel(shape), "sample data");
    ds.x = Tensor::from_data(std::move(shape), std::move(data));
    ds.y.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        ds.y[i] = static_cast<int>(detail::read_u64(buf, pos, "labels"));
    if (pos != buf.size()) throw IoError("trailing bytes after dataset data");
    for (int label : ds.y)
        if (label < 0 || label >= ds.num_classes)
            throw IoError("invalid dataset: label out of range");
    return ds;
}

inline Dataset load_dataset(const std::string& path) {
    return deserialize_dataset(detail::read_file(path));
}

inline std::uint64_t dataset_hash(const Dataset& ds) {
    return fnv1a(serialize_dataset(ds));
}

} // namespace dfshield
