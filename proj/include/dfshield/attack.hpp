// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.
//
// Projected gradient descent attacks under l-inf and l2 budgets, with
// an unbounded mode (epsilon = inf) for obfuscated-gradient checks.

#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfshield/data.hpp"
#include "dfshield/model.hpp"
#include "dfshield/rng.hpp"
#include "dfshield/tensor.hpp"

namespace dfshield {

enum class AttackNorm { Linf, L2 };
enum class AttackLoss { Ce, KlVsClean };

struct AttackConfig {
    AttackNorm norm = AttackNorm::Linf;
    double epsilon = 8.0 / 255.0; // may be infinity
    double step = 0.0;            // 0 -> default epsilon/4
    std::size_t iterations = 10;
    bool random_start = true;
    AttackLoss loss = AttackLoss::Ce;
    std::optional<ValueRange> range;

    bool unbounded() const { return std::isinf(epsilon); }

    double step_size() const {
        if (step > 0.0) return step;
        if (unbounded())
            throw std::invalid_argument(
                "attack: unbounded attacks need an explicit step size");
        return epsilon / 4.0;
    }

    void validate() const {
        if (iterations < 1)
            throw std::invalid_argument("attack: iterations must be >= 1");
        if (!(epsilon > 0.0))
            throw std::invalid_argument("attack: epsilon must be > 0 or inf");
        step_size();
    }
};

// Projects x_adv onto the epsilon ball around x (per sample for l2),
// then clamps to the value range when bounded. Plain data, no graph.
inline Tensor project(const Tensor& x_adv, const Tensor& x,
                      const AttackConfig& cfg) {
    if (x_adv.shape() != x.shape())
        throw std::invalid_argument("project: shape mismatch " +
                                    shape_str(x_adv.shape()) + " vs " +
                                    shape_str(x.shape()));
    std::vector<double> out = x_adv.data();
    const auto& base = x.data();
    if (!cfg.unbounded()) {
        if (cfg.norm == AttackNorm::Linf) {
            for (std::size_t i = 0; i < out.size(); ++i) {
                double d = out[i] - base[i];
                d = std::min(cfg.epsilon, std::max(-cfg.epsilon, d));
                out[i] = base[i] + d;
            }
        } else {
            std::size_t batch = x.shape()[0];
            std::size_t stride = out.size() / batch;
            for (std::size_t b = 0; b < batch; ++b) {
                double norm2 = 0.0;
                for (std::size_t i = 0; i < stride; ++i) {
                    double d = out[b * stride + i] - base[b * stride + i];
                    norm2 += d * d;
                }
                double norm = std::sqrt(norm2);
                if (norm > cfg.epsilon) {
                    double scale = cfg.epsilon / norm;
                    for (std::size_t i = 0; i < stride; ++i) {
                        std::size_t k = b * stride + i;
                        out[k] = base[k] + (out[k] - base[k]) * scale;
                    }
                }
            }
        }
    }
    if (cfg.range)
        for (auto& v : out)
            v = std::min(cfg.range->hi, std::max(cfg.range->lo, v));
    return Tensor::from_data(x.shape(), std::move(out));
}

// Iterative signed-gradient ascent with projection each step
// (x^t = proj(x^{t-1} + step * sign(grad))). The model is evaluated in
// eval mode and never mutated. Batched over all samples at once.
inline Tensor pgd(const Model& model, const Tensor& x,
                  const std::vector<int>& labels, const AttackConfig& cfg,
                  Rng& rng) {
    cfg.validate();
    BNState bn_view = model.bn;
    double step = cfg.step_size();
    std::vector<double> cur = x.data();

    if (cfg.random_start && !cfg.unbounded()) {
        if (cfg.norm == AttackNorm::Linf) {
            for (auto& v : cur) v += rng.uniform(-cfg.epsilon, cfg.epsilon);
        } else {
            std::size_t batch = x.shape()[0];
            std::size_t stride = cur.size() / batch;
            for (std::size_t b = 0; b < batch; ++b) {
                std::vector<double> dir(stride);
                double norm2 = 0.0;
                for (auto& d : dir) {
                    d = rng.normal();
                    norm2 += d * d;
                }
                double norm = std::max(std::sqrt(norm2), 1e-12);
                // uniform radius in the l2 ball
                double r = cfg.epsilon *
                           std::pow(rng.uniform(), 1.0 / static_cast<double>(stride));
                for (std::size_t i = 0; i < stride; ++i)
                    cur[b * stride + i] += dir[i] * (r / norm);
            }
        }
        cur = project(Tensor::from_data(x.shape(), cur), x, cfg).data();
    }

    // reference distribution for the kl_vs_clean objective
    Tensor clean_logits;
    if (cfg.loss == AttackLoss::KlVsClean)
        clean_logits = forward(model.spec, model.params, bn_view, x,
                               ForwardMode::Eval).logits.detach();

    for (std::size_t t = 0; t < cfg.iterations; ++t) {
        Tensor xt = Tensor::from_data(x.shape(), cur, true);
        auto res = forward(model.spec, model.params, bn_view, xt,
                           ForwardMode::Eval);
        Tensor loss = (cfg.loss == AttackLoss::Ce)
                          ? cross_entropy(res.logits, labels)
                          : kl_divergence(res.logits, clean_logits);
        backward(loss);
        const auto& g = xt.grad();
        if (!all_finite(g))
            throw NumericalError("attack gradient non-finite at iteration " +
                                 std::to_string(t));
        for (std::size_t i = 0; i < cur.size(); ++i) {
            double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
            cur[i] += step * s;
        }
        cur = project(Tensor::from_data(x.shape(), cur), x, cfg).data();
    }
    return Tensor::from_data(x.shape(), std::move(cur));
}

struct RobustnessReport {
    double clean_accuracy = 0.0;
    // keyed by (attack label like "pgd", epsilon rendered text, iterations)
    std::vector<std::tuple<std::string, std::string, std::size_t, double>> robust;
    std::size_t sample_count = 0;

    nlohmann::json to_json() const {
        nlohmann::json entries = nlohmann::json::array();
        for (const auto& [name, eps, iters, acc] : robust)
            entries.push_back({{"attack", name},
                               {"epsilon", eps},
                               {"iterations", iters},
                               {"robust_accuracy", acc}});
        return {{"clean_accuracy", clean_accuracy},
                {"sample_count", sample_count},
                {"robust", entries}};
    }
};

namespace detail {

inline double accuracy_of(const Model& model, const Tensor& x,
                          const std::vector<int>& labels) {
    BNState bn_view = model.bn;
    auto logits = forward(model.spec, model.params, bn_view, x,
                          ForwardMode::Eval).logits;
    std::size_t c = logits.shape()[1];
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (logits.data()[i * c + j] > logits.data()[i * c + best]) best = j;
        if (static_cast<int>(best) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

inline std::string epsilon_text(double eps) {
    if (std::isinf(eps)) return "inf";
    std::ostringstream os;
    os << eps;
    return os.str();
}

} // namespace detail

// Robust accuracy at each iteration count plus an unbounded entry;
// the same seed is reused per column for comparability.
inline RobustnessReport attack_curve(const Model& model, const Dataset& ds,
                                     AttackConfig base,
                                     const std::vector<std::size_t>& iteration_list,
                                     std::size_t unbounded_iters,
                                     double unbounded_step, std::uint64_t seed) {
    if (iteration_list.empty())
        throw std::invalid_argument("attack_curve: iteration list is empty");
    RobustnessReport rep;
    rep.sample_count = ds.size();
    rep.clean_accuracy = detail::accuracy_of(model, ds.x, ds.y);
    for (std::size_t iters : iteration_list) {
        AttackConfig cfg = base;
        cfg.iterations = iters;
        Rng rng(seed);
        Tensor adv = pgd(model, ds.x, ds.y, cfg, rng);
        rep.robust.emplace_back("pgd", detail::epsilon_text(cfg.epsilon), iters,
                                detail::accuracy_of(model, adv, ds.y));
    }
    if (unbounded_iters > 0) {
        AttackConfig cfg = base;
        cfg.epsilon = std::numeric_limits<double>::infinity();
        cfg.step = unbounded_step;
        cfg.iterations = unbounded_iters;
        cfg.random_start = false;
        Rng rng(seed);
        Tensor adv = pgd(model, ds.x, ds.y, cfg, rng);
        rep.robust.emplace_back("pgd", "inf", unbounded_iters,
                                detail::accuracy_of(model, adv, ds.y));
    }
    return rep;
}

} // namespace dfshield
