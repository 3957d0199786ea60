// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.
//
// Data-free synthetic sample generation: each batch is optimized
// directly from standard-normal noise against a weighted sum of a
// class loss (cross-entropy to artificial labels), a feature loss
// (batch-norm statistic matching against the teacher's running stats)
// and a pixel total-variation prior. In dss mode the three weights are
// drawn uniformly at random per batch; in fixed mode they are constants.

#pragma once

#include <array>
#include <atomic>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dfshield/data.hpp"
#include "dfshield/model.hpp"
#include "dfshield/rng.hpp"
#include "dfshield/tensor.hpp"

namespace dfshield {

enum class SynthMode { Dss, Fixed };
enum class FeatureStat { Variance, Stddev };

struct SynthConfig {
    std::size_t batch_size = 200;
    std::size_t num_batches = 1;
    std::size_t iterations = 1000; // Q
    double lr = 0.1;               // Adam
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    SynthMode mode = SynthMode::Dss;
    std::array<double, 3> fixed_coeffs{1.0, 1.0, 1.0};
    FeatureStat feature_stat = FeatureStat::Variance;
    std::size_t threads = 1;

    void validate() const {
        if (batch_size < 2)
            throw std::invalid_argument(
                "synth: batch_size must be >= 2 (batch statistics)");
        if (num_batches < 1)
            throw std::invalid_argument("synth: num_batches must be >= 1");
    }
};

struct CoefficientDraw {
    double class_w = 1.0;
    double feature_w = 1.0;
    double prior_w = 1.0;
};

struct SyntheticBatch {
    Tensor x;
    std::vector<int> y;
    CoefficientDraw coeffs;
    double final_loss = 0.0;
};

// Cross-entropy against the artificial labels (identical to the
// tensorcore loss, kept as a named entry point).
inline Tensor loss_class(const Tensor& logits, const std::vector<int>& labels) {
    return cross_entropy(logits, labels);
}

// Sum over BN layers of squared distances between the batch statistics
// of the current samples and the teacher's stored running statistics.
inline Tensor loss_feature(const BatchStats& stats, const BNState& bn,
                           FeatureStat which = FeatureStat::Variance) {
    if (stats.mean.size() != bn.layers.size())
        throw std::invalid_argument(
            "loss_feature: stats cover " + std::to_string(stats.mean.size()) +
            " layers, model has " + std::to_string(bn.layers.size()));
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t l = 0; l < bn.layers.size(); ++l) {
        const auto& st = bn.layers[l];
        Tensor tgt_mean = Tensor::from_data(stats.mean[l].shape(), st.running_mean);
        Tensor dm = stats.mean[l] - tgt_mean;
        Tensor spread = stats.var[l];
        std::vector<double> tgt = st.running_var;
        if (which == FeatureStat::Stddev) {
            spread = sqrt_t(spread);
            for (auto& v : tgt) v = std::sqrt(v);
        }
        Tensor dv = spread - Tensor::from_data(stats.var[l].shape(), tgt);
        total = total + reduce_sum(dm * dm) + reduce_sum(dv * dv);
    }
    return total;
}

// Pixel total variation: squared horizontal and vertical forward
// differences summed over batch and channels. Non-image inputs (rank-2
// toy samples) contribute zero by definition.
inline Tensor loss_prior(const Tensor& x) {
    if (x.shape().size() != 4) return Tensor::scalar(0.0);
    std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2],
                W = x.shape()[3];
    const auto& v = x.data();
    double total = 0.0;
    std::vector<std::pair<std::size_t, std::size_t>> pairs; // (hi, lo) index
    pairs.reserve(B * C * H * W * 2);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) {
                    std::size_t at = ((b * C + c) * H + i) * W + j;
                    if (j + 1 < W) pairs.emplace_back(at + 1, at);
                    if (i + 1 < H) pairs.emplace_back(at + W, at);
                }
    for (auto [hi, lo] : pairs) {
        double d = v[hi] - v[lo];
        total += d * d;
    }
    auto xn = x.node();
    auto shared = std::make_shared<decltype(pairs)>(std::move(pairs));
    return detail::make_op({1}, {total}, {x},
        [xn, shared](TensorNode& self) {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            double g = self.grad[0];
            for (auto [hi, lo] : *shared) {
                double d = xn->value[hi] - xn->value[lo];
                xn->grad[hi] += 2.0 * g * d;
                xn->grad[lo] -= 2.0 * g * d;
            }
        });
}

// dss: three independent U(0,1) draws; fixed: the configured constants.
inline CoefficientDraw sample_coefficients(Rng& rng, const SynthConfig& cfg) {
    if (cfg.mode == SynthMode::Fixed)
        return {cfg.fixed_coeffs[0], cfg.fixed_coeffs[1], cfg.fixed_coeffs[2]};
    CoefficientDraw d;
    d.class_w = rng.uniform();
    d.feature_w = rng.uniform();
    d.prior_w = rng.uniform();
    return d;
}

// Round-robin artificial labels: balanced and deterministic.
inline std::vector<int> round_robin_labels(std::size_t n, int classes) {
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % classes);
    return y;
}

// Optimizes one batch from N(0,1) noise with Q Adam steps on
// L = a1*class + a2*feature + a3*prior. The teacher is read-only: eval
// mode normalization, stats captured differentiably for the feature
// loss. Bounded domains are clamped after every step.
inline SyntheticBatch generate_batch(const Model& teacher,
                                     const SynthConfig& cfg,
                                     const std::optional<ValueRange>& range,
                                     Rng& rng) {
    cfg.validate();
    Shape shape{cfg.batch_size};
    for (auto d : teacher.spec.input_shape) shape.push_back(d);
    std::size_t n = numel(shape);
    SyntheticBatch out;
    out.coeffs = sample_coefficients(rng, cfg);
    out.y = round_robin_labels(cfg.batch_size, teacher.spec.num_classes);

    std::vector<double> xv(n);
    for (auto& v : xv) v = rng.normal();
    auto clamp_data = [&](std::vector<double>& v) {
        if (!range) return;
        for (auto& e : v) e = std::min(range->hi, std::max(range->lo, e));
    };
    clamp_data(xv);

    std::vector<double> m(n, 0.0), s(n, 0.0);
    BNState bn_view = teacher.bn; // eval mode never mutates, local copy anyway
    double last_loss = 0.0;
    auto eval_loss = [&](const Tensor& x) {
        auto res = forward(teacher.spec, teacher.params, bn_view, x,
                           ForwardMode::Eval, true);
        Tensor l = Tensor::scalar(out.coeffs.class_w) * loss_class(res.logits, out.y) +
                   Tensor::scalar(out.coeffs.feature_w) *
                       loss_feature(res.stats, bn_view, cfg.feature_stat) +
                   Tensor::scalar(out.coeffs.prior_w) * loss_prior(x);
        return l;
    };
    for (std::size_t q = 0; q < cfg.iterations; ++q) {
        Tensor x = Tensor::from_data(shape, xv, true);
        Tensor loss = eval_loss(x);
        if (!std::isfinite(loss.item()))
            throw NumericalError("synthesis loss non-finite at step " +
                                 std::to_string(q));
        backward(loss);
        last_loss = loss.item();
        const auto& g = x.grad();
        if (!all_finite(g))
            throw NumericalError("synthesis gradient non-finite at step " +
                                 std::to_string(q));
        double t = static_cast<double>(q + 1);
        double bc1 = 1.0 - std::pow(cfg.beta1, t);
        double bc2 = 1.0 - std::pow(cfg.beta2, t);
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            s[i] = cfg.beta2 * s[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            xv[i] -= cfg.lr * (m[i] / bc1) /
                     (std::sqrt(s[i] / bc2) + cfg.adam_eps);
        }
        clamp_data(xv);
    }
    out.x = Tensor::from_data(shape, std::move(xv));
    if (cfg.iterations > 0) {
        out.final_loss = last_loss;
    } else {
        out.final_loss = eval_loss(out.x).item();
    }
    return out;
}

struct SynthSidecar {
    std::vector<CoefficientDraw> coeffs;
    std::vector<double> final_losses;

    nlohmann::json to_json() const {
        nlohmann::json batches = nlohmann::json::array();
        for (std::size_t i = 0; i < coeffs.size(); ++i)
            batches.push_back({{"batch", i},
                               {"alpha_class", coeffs[i].class_w},
                               {"alpha_feature", coeffs[i].feature_w},
                               {"alpha_prior", coeffs[i].prior_w},
                               {"final_loss", final_losses[i]}});
        return {{"batches", batches}};
    }
};

// N independent batches, each with its own coefficient draw and noise
// substream. Batches may run on a worker pool; results are concatenated
// in batch-index order so the output is deterministic per seed either way.
inline std::pair<Dataset, SynthSidecar> generate_dataset(
    const Model& teacher, const SynthConfig& cfg,
    const std::optional<ValueRange>& range, Rng& rng) {
    cfg.validate();
    std::vector<SyntheticBatch> batches(cfg.num_batches);
    std::vector<Rng> seeds;
    seeds.reserve(cfg.num_batches);
    for (std::size_t i = 0; i < cfg.num_batches; ++i) seeds.push_back(rng.derive(i));
    std::size_t workers = std::max<std::size_t>(1, cfg.threads);
    if (workers == 1) {
        for (std::size_t i = 0; i < cfg.num_batches; ++i)
            batches[i] = generate_batch(teacher, cfg, range, seeds[i]);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        std::exception_ptr err;
        std::mutex err_mu;
        for (std::size_t w = 0; w < std::min(workers, cfg.num_batches); ++w)
            pool.emplace_back([&] {
                for (;;) {
                    std::size_t i = next.fetch_add(1);
                    if (i >= cfg.num_batches) return;
                    try {
                        batches[i] = generate_batch(teacher, cfg, range, seeds[i]);
                    } catch (...) {
                        std::lock_guard<std::mutex> lk(err_mu);
                        if (!err) err = std::current_exception();
                        return;
                    }
                }
            });
        for (auto& t : pool) t.join();
        if (err) std::rethrow_exception(err);
    }
    Shape shape = batches[0].x.shape();
    shape[0] = cfg.batch_size * cfg.num_batches;
    std::vector<double> xs;
    xs.reserve(numel(shape));
    Dataset ds;
    SynthSidecar side;
    for (auto& b : batches) {
        xs.insert(xs.end(), b.x.data().begin(), b.x.data().end());
        ds.y.insert(ds.y.end(), b.y.begin(), b.y.end());
        side.coeffs.push_back(b.coeffs);
        side.final_losses.push_back(b.final_loss);
    }
    ds.x = Tensor::from_data(std::move(shape), std::move(xs));
    ds.num_classes = teacher.spec.num_classes;
    ds.range = range;
    return {std::move(ds), std::move(side)};
}

} // namespace dfshield
