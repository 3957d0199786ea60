// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.
//
// Evaluation machinery: clean/robust accuracy, k-NN diversity metrics
// (recall, coverage), binned distribution statistics (NDB, JSD), and
// 2-D loss-surface grids along filter-normalized random directions.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfshield/attack.hpp"
#include "dfshield/data.hpp"
#include "dfshield/model.hpp"
#include "dfshield/rng.hpp"
#include "dfshield/tensor.hpp"

namespace dfshield {

inline double accuracy_clean(const Model& model, const Dataset& ds) {
    if (ds.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
    return detail::accuracy_of(model, ds.x, ds.y);
}

inline double accuracy_robust(const Model& model, const Dataset& ds,
                              const AttackConfig& cfg, Rng& rng) {
    if (ds.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
    Tensor adv = pgd(model, ds.x, ds.y, cfg, rng);
    return detail::accuracy_of(model, adv, ds.y);
}

// ---------------------------------------------------------------------------
// feature embedding for diversity metrics

// Penultimate-layer activations in eval mode; raw-input passthrough for
// low-dimensional toy data.
inline std::vector<std::vector<double>> diversity_features(
    const Model& model, const Dataset& ds, bool passthrough = false) {
    std::size_t n = ds.size();
    std::vector<std::vector<double>> feats(n);
    if (passthrough) {
        std::size_t d = numel(ds.sample_shape());
        for (std::size_t i = 0; i < n; ++i)
            feats[i].assign(ds.x.data().begin() + i * d,
                            ds.x.data().begin() + (i + 1) * d);
        return feats;
    }
    BNState bn_view = model.bn;
    Tensor pen = forward(model.spec, model.params, bn_view, ds.x,
                         ForwardMode::Eval).penultimate;
    std::size_t d = pen.size() / n;
    for (std::size_t i = 0; i < n; ++i)
        feats[i].assign(pen.data().begin() + i * d,
                        pen.data().begin() + (i + 1) * d);
    return feats;
}

// ---------------------------------------------------------------------------
// k-NN manifold metrics

namespace detail {

inline double dist2(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// squared distance from each point to its k-th nearest neighbor within
// the same set (self excluded)
inline std::vector<double> knn_radius2(
    const std::vector<std::vector<double>>& pts, std::size_t k) {
    std::size_t n = pts.size();
    std::vector<double> out(n);
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t m = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) d[m++] = dist2(pts[i], pts[j]);
        std::nth_element(d.begin(), d.begin() + (k - 1), d.begin() + m);
        out[i] = d[k - 1];
    }
    return out;
}

} // namespace detail

struct DiversityReport {
    double recall = 0.0;
    double coverage = 0.0;
    int ndb = 0;
    double jsd = 0.0;
    std::size_t k = 5;
    std::size_t bins = 100;
    double significance = 0.05;

    nlohmann::json to_json() const {
        return {{"recall", recall}, {"coverage", coverage}, {"ndb", ndb},
                {"jsd", jsd},       {"k", k},               {"bins", bins},
                {"significance", significance}};
    }
};

// Fraction of real points lying inside the union of k-NN balls of the
// fake set (ball radius: each fake point's distance to its k-th nearest
// neighbor among the fakes).
inline double recall_metric(const std::vector<std::vector<double>>& real,
                            const std::vector<std::vector<double>>& fake,
                            std::size_t k = 5) {
    if (real.size() < k + 1 || fake.size() < k + 1)
        throw std::invalid_argument("recall: sets need at least k+1 points");
    auto radius2 = detail::knn_radius2(fake, k);
    std::size_t hit = 0;
    for (const auto& r : real)
        for (std::size_t j = 0; j < fake.size(); ++j)
            if (detail::dist2(r, fake[j]) <= radius2[j]) {
                ++hit;
                break;
            }
    return static_cast<double>(hit) / static_cast<double>(real.size());
}

// Fraction of real points whose own k-NN-radius ball (radius measured
// within the real set) contains at least one fake point.
inline double coverage_metric(const std::vector<std::vector<double>>& real,
                              const std::vector<std::vector<double>>& fake,
                              std::size_t k = 5) {
    if (real.size() < k + 1 || fake.size() < 1)
        throw std::invalid_argument("coverage: sets too small");
    auto radius2 = detail::knn_radius2(real, k);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < real.size(); ++i)
        for (const auto& f : fake)
            if (detail::dist2(real[i], f) <= radius2[i]) {
                ++hit;
                break;
            }
    return static_cast<double>(hit) / static_cast<double>(real.size());
}

namespace detail {

// Lloyd's k-means on the real set: seeded random distinct starting
// centroids, fixed iteration cap, ties broken by lowest centroid index.
inline std::vector<std::vector<double>> kmeans_centroids(
    const std::vector<std::vector<double>>& pts, std::size_t k, Rng& rng,
    std::size_t max_iters = 100) {
    std::size_t n = pts.size();
    std::vector<std::size_t> pick;
    std::vector<bool> used(n, false);
    while (pick.size() < k) {
        std::size_t i = rng.index(n);
        if (!used[i]) {
            used[i] = true;
            pick.push_back(i);
        }
    }
    std::vector<std::vector<double>> cent(k);
    for (std::size_t c = 0; c < k; ++c) cent[c] = pts[pick[c]];
    std::vector<std::size_t> assign(n, 0);
    for (std::size_t it = 0; it < max_iters; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double bd = dist2(pts[i], cent[0]);
            for (std::size_t c = 1; c < k; ++c) {
                double d = dist2(pts[i], cent[c]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        if (!changed && it > 0) break;
        std::vector<std::vector<double>> sum(k,
            std::vector<double>(pts[0].size(), 0.0));
        std::vector<std::size_t> count(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t d = 0; d < pts[i].size(); ++d)
                sum[assign[i]][d] += pts[i][d];
            count[assign[i]]++;
        }
        for (std::size_t c = 0; c < k; ++c)
            if (count[c] > 0)
                for (std::size_t d = 0; d < sum[c].size(); ++d)
                    cent[c][d] = sum[c][d] / count[c];
    }
    return cent;
}

inline std::vector<std::size_t> assign_to_centroids(
    const std::vector<std::vector<double>>& pts,
    const std::vector<std::vector<double>>& cent) {
    std::vector<std::size_t> out(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        std::size_t best = 0;
        double bd = dist2(pts[i], cent[0]);
        for (std::size_t c = 1; c < cent.size(); ++c) {
            double d = dist2(pts[i], cent[c]);
            if (d < bd) {
                bd = d;
                best = c;
            }
        }
        out[i] = best;
    }
    return out;
}

} // namespace detail

// NDB: K bins from k-means on the real features; per bin, a pooled
// two-proportion z-test (two-sided, via the complementary error
// function) at the given significance level; NDB counts rejections.
// JSD: Jensen-Shannon divergence between the two bin histograms,
// natural log, smoothing 1e-10.
inline std::pair<int, double> ndb_jsd(
    const std::vector<std::vector<double>>& real,
    const std::vector<std::vector<double>>& fake, std::size_t bins,
    double significance, Rng& rng) {
    if (real.size() < bins)
        throw std::invalid_argument("ndb: real set smaller than bin count");
    auto cent = detail::kmeans_centroids(real, bins, rng);
    auto ra = detail::assign_to_centroids(real, cent);
    auto fa = detail::assign_to_centroids(fake, cent);
    std::vector<double> pr(bins, 0.0), pf(bins, 0.0);
    for (auto b : ra) pr[b] += 1.0;
    for (auto b : fa) pf[b] += 1.0;
    double n = static_cast<double>(real.size());
    double m = static_cast<double>(fake.size());
    int ndb = 0;
    for (std::size_t b = 0; b < bins; ++b) {
        double p1 = pr[b] / n, p2 = pf[b] / m;
        double pooled = (pr[b] + pf[b]) / (n + m);
        double se = std::sqrt(pooled * (1.0 - pooled) * (1.0 / n + 1.0 / m));
        if (se == 0.0) continue;
        double z = std::abs(p1 - p2) / se;
        double pval = std::erfc(z / std::sqrt(2.0)); // two-sided
        if (pval < significance) ++ndb;
    }
    const double smooth = 1e-10;
    double zr = 0.0, zf = 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
        pr[b] = pr[b] / n + smooth;
        pf[b] = pf[b] / m + smooth;
        zr += pr[b];
        zf += pf[b];
    }
    double jsd = 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
        double p = pr[b] / zr, q = pf[b] / zf;
        double mid = 0.5 * (p + q);
        jsd += 0.5 * p * std::log(p / mid) + 0.5 * q * std::log(q / mid);
    }
    return {ndb, jsd};
}

inline DiversityReport diversity_report(
    const std::vector<std::vector<double>>& real,
    const std::vector<std::vector<double>>& fake, std::size_t k = 5,
    std::size_t bins = 100, double significance = 0.05,
    std::uint64_t seed = 0) {
    DiversityReport rep;
    rep.k = k;
    rep.bins = bins;
    rep.significance = significance;
    rep.recall = recall_metric(real, fake, k);
    rep.coverage = coverage_metric(real, fake, k);
    Rng rng(seed);
    auto [ndb, jsd] = ndb_jsd(real, fake, bins, significance, rng);
    rep.ndb = ndb;
    rep.jsd = jsd;
    return rep;
}

// ---------------------------------------------------------------------------
// loss-surface grids

struct SurfaceGrid {
    std::size_t resolution = 0;
    double range = 0.0;
    std::vector<double> values; // row-major R x R
    std::uint64_t seed1 = 0, seed2 = 0;

    double at(std::size_t i, std::size_t j) const {
        return values[i * resolution + j];
    }
    double axis(std::size_t i) const {
        return -range + 2.0 * range * static_cast<double>(i) /
                            static_cast<double>(resolution - 1);
    }

    void write_csv(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("cannot write file: " + path);
        f << "x\\y";
        for (std::size_t j = 0; j < resolution; ++j) f << "," << axis(j);
        f << "\n";
        for (std::size_t i = 0; i < resolution; ++i) {
            f << axis(i);
            for (std::size_t j = 0; j < resolution; ++j) f << "," << at(i, j);
            f << "\n";
        }
    }

    // 8-bit grayscale heatmap, low loss dark.
    void write_ppm(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot write file: " + path);
        double lo = *std::min_element(values.begin(), values.end());
        double hi = *std::max_element(values.begin(), values.end());
        double span = std::max(hi - lo, 1e-300);
        f << "P6\n" << resolution << " " << resolution << "\n255\n";
        for (double v : values) {
            auto b = static_cast<unsigned char>(255.0 * (v - lo) / span);
            f << b << b << b;
        }
    }
};

// flattened per-parameter direction vectors
using Direction = std::vector<std::vector<double>>;

namespace detail {

// Random direction matched group-wise to the parameter norms: per
// output column of affine weights, per output filter of conv kernels;
// bias and BN components zeroed.
inline Direction filter_normalized_direction(const ParamStore& params, Rng& rng) {
    Direction dir(params.params.size());
    for (std::size_t p = 0; p < params.params.size(); ++p) {
        const auto& [name, t] = params.params[p];
        dir[p].assign(t.size(), 0.0);
        bool is_affine_w = t.shape().size() == 2 && name.ends_with(".w");
        bool is_conv_w = t.shape().size() == 4;
        if (!is_affine_w && !is_conv_w) continue; // bias/BN stay zero
        for (auto& v : dir[p]) v = rng.normal();
        if (is_affine_w) {
            // group: one output column of [in, out]
            std::size_t in = t.shape()[0], out = t.shape()[1];
            for (std::size_t j = 0; j < out; ++j) {
                double dn = 0.0, pn = 0.0;
                for (std::size_t i = 0; i < in; ++i) {
                    dn += dir[p][i * out + j] * dir[p][i * out + j];
                    pn += t.data()[i * out + j] * t.data()[i * out + j];
                }
                double scale = (dn > 0.0) ? std::sqrt(pn / dn) : 0.0;
                for (std::size_t i = 0; i < in; ++i) dir[p][i * out + j] *= scale;
            }
        } else {
            // group: one output filter of [out, in, kh, kw]
            std::size_t out = t.shape()[0];
            std::size_t per = t.size() / out;
            for (std::size_t o = 0; o < out; ++o) {
                double dn = 0.0, pn = 0.0;
                for (std::size_t i = 0; i < per; ++i) {
                    dn += dir[p][o * per + i] * dir[p][o * per + i];
                    pn += t.data()[o * per + i] * t.data()[o * per + i];
                }
                double scale = (dn > 0.0) ? std::sqrt(pn / dn) : 0.0;
                for (std::size_t i = 0; i < per; ++i) dir[p][o * per + i] *= scale;
            }
        }
    }
    return dir;
}

} // namespace detail

// Loss values of an arbitrary objective over a (R x R) grid of
// parameter perturbations theta + a*d1 + b*d2 along two
// filter-normalized random directions. Works on a copy; the caller's
// store is untouched. `objective` is evaluated against the probe store.
template <typename LossFn>
SurfaceGrid loss_surface_over(const ParamStore& params, LossFn&& objective,
                              std::size_t resolution, double range,
                              std::uint64_t seed1, std::uint64_t seed2) {
    if (resolution % 2 == 0)
        throw std::invalid_argument("loss_surface: resolution must be odd");
    Rng r1(seed1), r2(seed2);
    Direction d1 = detail::filter_normalized_direction(params, r1);
    Direction d2 = detail::filter_normalized_direction(params, r2);
    SurfaceGrid grid;
    grid.resolution = resolution;
    grid.range = range;
    grid.seed1 = seed1;
    grid.seed2 = seed2;
    grid.values.resize(resolution * resolution);
    ParamStore probe;
    probe.role = params.role;
    for (const auto& [name, t] : params.params)
        probe.add(name, Tensor::from_data(t.shape(), t.data(), true));
    std::vector<std::vector<double>> base(probe.params.size());
    for (std::size_t p = 0; p < base.size(); ++p)
        base[p] = probe.params[p].second.data();
    for (std::size_t i = 0; i < resolution; ++i) {
        double a = grid.axis(i);
        for (std::size_t j = 0; j < resolution; ++j) {
            double b = grid.axis(j);
            for (std::size_t p = 0; p < base.size(); ++p) {
                std::vector<double> v = base[p];
                for (std::size_t k = 0; k < v.size(); ++k)
                    v[k] += a * d1[p][k] + b * d2[p][k];
                auto& t = probe.params[p].second;
                t = Tensor::from_data(t.shape(), std::move(v), true);
            }
            grid.values[i * resolution + j] = objective(probe);
        }
    }
    return grid;
}

// Cross-entropy surface of a model on a fixed batch (eval mode).
inline SurfaceGrid loss_surface(const Model& model, const Tensor& x,
                                const std::vector<int>& labels,
                                std::size_t resolution, double range,
                                std::uint64_t seed1, std::uint64_t seed2) {
    BNState bn_view = model.bn;
    return loss_surface_over(
        model.params,
        [&](const ParamStore& probe) {
            return cross_entropy(
                forward(model.spec, probe, bn_view, x, ForwardMode::Eval)
                    .logits, labels).item();
        },
        resolution, range, seed1, seed2);
}

// group norms of a direction vs the parameters they were matched to,
// exposed for verification
inline std::vector<std::pair<double, double>> direction_group_norms(
    const ParamStore& params, const Direction& dir) {
    std::vector<std::pair<double, double>> out;
    for (std::size_t p = 0; p < params.params.size(); ++p) {
        const auto& [name, t] = params.params[p];
        bool is_affine_w = t.shape().size() == 2 && name.ends_with(".w");
        bool is_conv_w = t.shape().size() == 4;
        if (!is_affine_w && !is_conv_w) continue;
        if (is_affine_w) {
            std::size_t in = t.shape()[0], outw = t.shape()[1];
            for (std::size_t j = 0; j < outw; ++j) {
                double dn = 0.0, pn = 0.0;
                for (std::size_t i = 0; i < in; ++i) {
                    dn += dir[p][i * outw + j] * dir[p][i * outw + j];
                    pn += t.data()[i * outw + j] * t.data()[i * outw + j];
                }
                out.emplace_back(std::sqrt(dn), std::sqrt(pn));
            }
        } else {
            std::size_t o_count = t.shape()[0];
            std::size_t per = t.size() / o_count;
            for (std::size_t o = 0; o < o_count; ++o) {
                double dn = 0.0, pn = 0.0;
                for (std::size_t i = 0; i < per; ++i) {
                    dn += dir[p][o * per + i] * dir[p][o * per + i];
                    pn += t.data()[o * per + i] * t.data()[o * per + i];
                }
                out.emplace_back(std::sqrt(dn), std::sqrt(pn));
            }
        }
    }
    return out;
}

} // namespace dfshield
