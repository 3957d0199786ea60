// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.
//
// Teacher pretraining, the soft-label triple-KL training objective,
// STD/TRADES baselines, and sign-agreement gradient refinement over
// aggregated mini-batches.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfshield/attack.hpp"
#include "dfshield/data.hpp"
#include "dfshield/model.hpp"
#include "dfshield/rng.hpp"
#include "dfshield/tensor.hpp"

namespace dfshield {

enum class TrainLoss { DfShield, Trades, Std };
enum class RefineNorm { Sum, MeanOverB, MeanOverAgreeing };

struct TrainConfig {
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    std::size_t agg_batches = 10; // B
    double tau = 0.5;
    RefineNorm normalization = RefineNorm::Sum;
    bool grad_refine = true;
    bool scale_lr_with_b = true; // effective lr = lr * B when refining
    double lr = 1e-4;
    double momentum = 0.9;
    std::size_t epochs = 1;
    std::size_t batch_size = 200;
    TrainLoss loss = TrainLoss::DfShield;
    double trades_beta = 6.0;
    bool detach_reference = true; // smoothness-term reference S(x) detached

    void validate() const {
        if (tau < 0.0 || tau > 1.0)
            throw std::invalid_argument("train: tau must be in [0,1]");
        if (agg_batches < 1)
            throw std::invalid_argument("train: aggregated batch count must be >= 1");
        if (lambda1 < 0.0 || lambda2 < 0.0)
            throw std::invalid_argument("train: lambda weights must be >= 0");
    }
};

// Ordered per-parameter gradient (or score) vectors, parallel to the
// ParamStore directory.
using GradMap = std::vector<std::vector<double>>;

// ---------------------------------------------------------------------------
// training losses

// KL(S(x)||T(x)) + l1*KL(S(x')||T(x)) + l2*KL(S(x')||S(x)).
// Teacher logits must be detached by the caller (frozen teacher). The
// smoothness term's reference S(x) is detached by default, so gradient
// reaches the student only through the first argument of each KL.
inline Tensor loss_dfshield(const Tensor& s_clean, const Tensor& s_adv,
                            const Tensor& t_clean, double lambda1,
                            double lambda2, bool detach_reference = true) {
    Tensor ref = detach_reference ? s_clean.detach() : s_clean;
    return kl_divergence(s_clean, t_clean) +
           Tensor::scalar(lambda1) * kl_divergence(s_adv, t_clean) +
           Tensor::scalar(lambda2) * kl_divergence(s_adv, ref);
}

// Plain adversarial cross-entropy (standard AT objective).
inline Tensor loss_std(const Tensor& s_adv, const std::vector<int>& labels) {
    return cross_entropy(s_adv, labels);
}

// CE(S(x),y) + beta * KL(S(x')||S(x)) with a detached clean reference.
inline Tensor loss_trades(const Tensor& s_clean, const Tensor& s_adv,
                          const std::vector<int>& labels, double beta) {
    return cross_entropy(s_clean, labels) +
           Tensor::scalar(beta) * kl_divergence(s_adv, s_clean.detach());
}

// ---------------------------------------------------------------------------
// GradRefine

namespace detail {

inline void check_grad_maps(const std::vector<GradMap>& grads) {
    if (grads.empty())
        throw std::invalid_argument("grad refine: need at least one gradient map");
    for (const auto& g : grads) {
        if (g.size() != grads[0].size())
            throw std::invalid_argument("grad refine: mismatched parameter counts");
        for (std::size_t p = 0; p < g.size(); ++p)
            if (g[p].size() != grads[0][p].size())
                throw std::invalid_argument(
                    "grad refine: mismatched shapes for parameter " +
                    std::to_string(p));
    }
}

inline double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

} // namespace detail

// A_k = (1/B) * sum_b sign(g_k^(b)); sign(0) counts toward neither side.
inline GradMap agreement_score(const std::vector<GradMap>& grads) {
    detail::check_grad_maps(grads);
    double inv_b = 1.0 / static_cast<double>(grads.size());
    GradMap a(grads[0].size());
    for (std::size_t p = 0; p < a.size(); ++p) {
        a[p].assign(grads[0][p].size(), 0.0);
        for (const auto& g : grads)
            for (std::size_t k = 0; k < a[p].size(); ++k)
                a[p][k] += detail::sgn(g[p][k]);
        for (auto& v : a[p]) v *= inv_b;
    }
    return a;
}

// g*_k = mask(|A_k| >= tau) * sum_b 1{A_k * g_k^(b) > 0} * g_k^(b),
// optionally normalized over B or over the agreeing count.
inline GradMap refine_gradients(const std::vector<GradMap>& grads,
                                const GradMap& agreement, double tau,
                                RefineNorm normalization = RefineNorm::Sum) {
    detail::check_grad_maps(grads);
    if (agreement.size() != grads[0].size())
        throw std::invalid_argument("grad refine: agreement/gradient mismatch");
    GradMap out(grads[0].size());
    for (std::size_t p = 0; p < out.size(); ++p) {
        out[p].assign(grads[0][p].size(), 0.0);
        for (std::size_t k = 0; k < out[p].size(); ++k) {
            double a = agreement[p][k];
            if (std::abs(a) < tau) continue;
            double sum = 0.0;
            std::size_t agreeing = 0;
            for (const auto& g : grads)
                if (a * g[p][k] > 0.0) {
                    sum += g[p][k];
                    ++agreeing;
                }
            switch (normalization) {
                case RefineNorm::Sum: break;
                case RefineNorm::MeanOverB:
                    sum /= static_cast<double>(grads.size());
                    break;
                case RefineNorm::MeanOverAgreeing:
                    if (agreeing > 0) sum /= static_cast<double>(agreeing);
                    break;
            }
            out[p][k] = sum;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// optimizers (plain data, no graph)

struct SgdMomentum {
    double lr;
    double momentum;
    GradMap velocity;

    void step(ParamStore& params, const GradMap& grads) {
        if (velocity.empty()) {
            velocity.resize(params.params.size());
            for (std::size_t p = 0; p < velocity.size(); ++p)
                velocity[p].assign(params.params[p].second.size(), 0.0);
        }
        for (std::size_t p = 0; p < params.params.size(); ++p) {
            auto& t = params.params[p].second;
            std::vector<double> v = t.data();
            for (std::size_t k = 0; k < v.size(); ++k) {
                velocity[p][k] = momentum * velocity[p][k] + grads[p][k];
                v[k] -= lr * velocity[p][k];
            }
            t = Tensor::from_data(t.shape(), std::move(v), true);
        }
    }
};

namespace detail {

// Gradients of `loss` w.r.t. every parameter, in directory order;
// untouched parameters get zeros.
inline GradMap collect_gradients(const Tensor& loss, const ParamStore& params) {
    backward(loss);
    GradMap g(params.params.size());
    for (std::size_t p = 0; p < params.params.size(); ++p) {
        const auto& t = params.params[p].second;
        g[p] = t.grad().empty() ? std::vector<double>(t.size(), 0.0) : t.grad();
    }
    return g;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i)
        std::swap(idx[i - 1], idx[rng.index(i)]);
    return idx;
}

} // namespace detail

// ---------------------------------------------------------------------------
// teacher pretraining: plain cross-entropy, no adversarial examples

struct EpochLog {
    std::size_t epoch;
    double mean_loss;
    double clean_accuracy;
    double robust_accuracy; // -1 when not evaluated
    double mask_density;    // fraction of unmasked elements, -1 when n/a

    nlohmann::json to_json() const {
        nlohmann::json j = {{"epoch", epoch},
                            {"mean_loss", mean_loss},
                            {"clean_accuracy", clean_accuracy}};
        if (robust_accuracy >= 0.0) j["robust_accuracy"] = robust_accuracy;
        if (mask_density >= 0.0) j["mask_density"] = mask_density;
        return j;
    }
};

inline std::vector<EpochLog> pretrain_teacher(Model& model, const Dataset& ds,
                                              std::size_t epochs, double lr,
                                              double momentum,
                                              std::size_t batch_size, Rng& rng) {
    std::vector<EpochLog> log;
    SgdMomentum opt{lr, momentum, {}};
    for (std::size_t e = 0; e < epochs; ++e) {
        auto idx = detail::shuffled_indices(ds.size(), rng);
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t at = 0; at + 2 <= ds.size(); at += batch_size) {
            std::size_t take = std::min(batch_size, ds.size() - at);
            if (take < 2) break; // train-mode BN needs at least 2 samples
            std::vector<std::size_t> slice(idx.begin() + at, idx.begin() + at + take);
            Tensor x = ds.gather(slice);
            auto labels = ds.gather_labels(slice);
            auto res = forward(model.spec, model.params, model.bn, x,
                               ForwardMode::Train);
            Tensor loss = cross_entropy(res.logits, labels);
            if (!std::isfinite(loss.item()))
                throw NumericalError("pretraining loss non-finite at epoch " +
                                     std::to_string(e));
            auto g = detail::collect_gradients(loss, model.params);
            opt.step(model.params, g);
            loss_sum += loss.item();
            ++steps;
        }
        log.push_back({e, steps ? loss_sum / steps : 0.0,
                       detail::accuracy_of(model, ds.x, ds.y), -1.0, -1.0});
    }
    return log;
}

// ---------------------------------------------------------------------------
// adversarial training of the student (Algorithm: per step sample B
// mini-batches, craft adversarial counterparts with PGD on the current
// student, aggregate the B per-batch gradients with GradRefine, and
// apply one SGD-with-momentum update).

inline std::vector<EpochLog> train_student(const Model& teacher, Model& student,
                                           const Dataset& synth,
                                           const TrainConfig& cfg,
                                           const AttackConfig& attack_cfg,
                                           Rng& rng) {
    cfg.validate();
    double eff_lr = (cfg.grad_refine && cfg.scale_lr_with_b)
                        ? cfg.lr * static_cast<double>(cfg.agg_batches)
                        : cfg.lr;
    SgdMomentum opt{eff_lr, cfg.momentum, {}};
    std::vector<EpochLog> log;
    BNState teacher_bn = teacher.bn;
    std::size_t group = cfg.agg_batches * cfg.batch_size;
    if (synth.size() < group)
        throw std::invalid_argument(
            "train: dataset smaller than one aggregated step (" +
            std::to_string(synth.size()) + " < " + std::to_string(group) + ")");
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        auto idx = detail::shuffled_indices(synth.size(), rng);
        double loss_sum = 0.0, density_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t at = 0; at + group <= synth.size(); at += group) {
            std::vector<GradMap> grads;
            grads.reserve(cfg.agg_batches);
            for (std::size_t b = 0; b < cfg.agg_batches; ++b) {
                std::size_t lo = at + b * cfg.batch_size;
                std::vector<std::size_t> slice(idx.begin() + lo,
                                               idx.begin() + lo + cfg.batch_size);
                Tensor x = synth.gather(slice);
                auto labels = synth.gather_labels(slice);
                Tensor x_adv = pgd(student, x, labels, attack_cfg, rng);

                // clean pass in train mode (updates running stats);
                // adversarial pass normalized by running stats.
                auto s_clean = forward(student.spec, student.params, student.bn,
                                       x, ForwardMode::Train);
                auto s_adv = forward(student.spec, student.params, student.bn,
                                     x_adv, ForwardMode::Eval);
                Tensor loss;
                switch (cfg.loss) {
                    case TrainLoss::DfShield: {
                        Tensor t_clean =
                            forward(teacher.spec, teacher.params, teacher_bn, x,
                                    ForwardMode::Eval).logits.detach();
                        loss = loss_dfshield(s_clean.logits, s_adv.logits,
                                             t_clean, cfg.lambda1, cfg.lambda2,
                                             cfg.detach_reference);
                        break;
                    }
                    case TrainLoss::Trades:
                        loss = loss_trades(s_clean.logits, s_adv.logits, labels,
                                           cfg.trades_beta);
                        break;
                    case TrainLoss::Std:
                        loss = loss_std(s_adv.logits, labels);
                        break;
                }
                if (!std::isfinite(loss.item()))
                    throw NumericalError(
                        "training loss non-finite at epoch " + std::to_string(e) +
                        " step " + std::to_string(steps) + " batch " +
                        std::to_string(b));
                grads.push_back(detail::collect_gradients(loss, student.params));
                loss_sum += loss.item();
            }
            GradMap final_grad;
            if (cfg.grad_refine) {
                GradMap a = agreement_score(grads);
                final_grad = refine_gradients(grads, a, cfg.tau, cfg.normalization);
                std::size_t kept = 0, total = 0;
                for (std::size_t p = 0; p < a.size(); ++p)
                    for (double v : a[p]) {
                        total++;
                        if (std::abs(v) >= cfg.tau) kept++;
                    }
                density_sum += total ? static_cast<double>(kept) / total : 0.0;
            } else {
                // plain aggregation: mean of the B per-batch gradients
                final_grad = grads[0];
                for (std::size_t b = 1; b < grads.size(); ++b)
                    for (std::size_t p = 0; p < final_grad.size(); ++p)
                        for (std::size_t k = 0; k < final_grad[p].size(); ++k)
                            final_grad[p][k] += grads[b][p][k];
                double inv = 1.0 / static_cast<double>(grads.size());
                for (auto& p : final_grad)
                    for (auto& v : p) v *= inv;
                density_sum += 1.0;
            }
            opt.step(student.params, final_grad);
            ++steps;
        }
        double clean = detail::accuracy_of(student, synth.x, synth.y);
        log.push_back({e, steps ? loss_sum / (steps * cfg.agg_batches) : 0.0,
                       clean, -1.0, steps ? density_sum / steps : -1.0});
    }
    return log;
}

} // namespace dfshield
