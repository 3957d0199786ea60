// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "dfshield/eval.hpp"

using namespace dfshield;

namespace {

Model make_model(std::uint64_t seed, int classes = 3) {
    ModelSpec spec;
    spec.kind = ModelKind::MlpBn;
    spec.input_shape = {2};
    spec.num_classes = classes;
    spec.hidden = {8, 8, 8};
    Rng rng(seed);
    auto [params, bn] = init_params(spec, rng);
    return Model{spec, std::move(params), std::move(bn)};
}

std::vector<std::vector<double>> random_points(std::size_t n, std::size_t d,
                                               Rng& rng, double scale = 1.0,
                                               double shift = 0.0) {
    std::vector<std::vector<double>> pts(n, std::vector<double>(d));
    for (auto& p : pts)
        for (auto& v : p) v = shift + scale * rng.normal();
    return pts;
}

// brute-force reference for recall and coverage built straight from
// their set definitions, quadratic and unoptimized on purpose
double recall_brute(const std::vector<std::vector<double>>& real,
                    const std::vector<std::vector<double>>& fake,
                    std::size_t k) {
    std::size_t hit = 0;
    for (const auto& r : real) {
        bool in_union = false;
        for (std::size_t j = 0; j < fake.size() && !in_union; ++j) {
            // radius: distance from fake[j] to its k-th nearest other fake
            std::vector<double> ds;
            for (std::size_t l = 0; l < fake.size(); ++l)
                if (l != j) ds.push_back(detail::dist2(fake[j], fake[l]));
            std::sort(ds.begin(), ds.end());
            if (detail::dist2(r, fake[j]) <= ds[k - 1]) in_union = true;
        }
        if (in_union) ++hit;
    }
    return static_cast<double>(hit) / real.size();
}

double coverage_brute(const std::vector<std::vector<double>>& real,
                      const std::vector<std::vector<double>>& fake,
                      std::size_t k) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < real.size(); ++i) {
        std::vector<double> ds;
        for (std::size_t l = 0; l < real.size(); ++l)
            if (l != i) ds.push_back(detail::dist2(real[i], real[l]));
        std::sort(ds.begin(), ds.end());
        double r2 = ds[k - 1];
        for (const auto& f : fake)
            if (detail::dist2(real[i], f) <= r2) {
                ++hit;
                break;
            }
    }
    return static_cast<double>(hit) / real.size();
}

} // namespace

TEST_CASE("recall and coverage match the brute-force definitions") {
    Rng rng(50);
    for (int trial = 0; trial < 30; ++trial) {
        std::size_t n = 8 + rng.index(40);
        std::size_t m = 8 + rng.index(40);
        std::size_t k = 1 + rng.index(5);
        auto real = random_points(n, 2, rng);
        auto fake = random_points(m, 2, rng, 1.0 + rng.uniform(), rng.normal());
        if (n < k + 1 || m < k + 1) continue;
        CHECK(recall_metric(real, fake, k) == recall_brute(real, fake, k));
        CHECK(coverage_metric(real, fake, k) == coverage_brute(real, fake, k));
    }
}

TEST_CASE("identical sets achieve perfect recall and coverage") {
    Rng rng(51);
    auto pts = random_points(30, 3, rng);
    CHECK(recall_metric(pts, pts, 5) == 1.0);
    CHECK(coverage_metric(pts, pts, 5) == 1.0);
}

TEST_CASE("a far-away fake set scores zero") {
    Rng rng(52);
    auto real = random_points(25, 2, rng);
    auto fake = random_points(25, 2, rng, 0.5, 1e6);
    CHECK(recall_metric(real, fake, 5) == 0.0);
    CHECK(coverage_metric(real, fake, 5) == 0.0);
    CHECK_THROWS_AS(recall_metric(real, random_points(3, 2, rng), 5),
                    std::invalid_argument);
}

TEST_CASE("ndb and jsd vanish for identical distributions") {
    Rng rng(53);
    auto pts = random_points(200, 2, rng);
    Rng mrng(54);
    auto [ndb, jsd] = ndb_jsd(pts, pts, 10, 0.05, mrng);
    CHECK(ndb == 0);
    CHECK(jsd == doctest::Approx(0.0).epsilon(1e-9));
    CHECK_THROWS_AS(ndb_jsd(random_points(5, 2, rng), pts, 10, 0.05, mrng),
                    std::invalid_argument);
}

TEST_CASE("ndb flags a collapsed fake distribution") {
    Rng rng(55);
    // real: two well-separated clusters; fake: only one of them
    auto a = random_points(100, 2, rng, 0.1, -5.0);
    auto b = random_points(100, 2, rng, 0.1, 5.0);
    auto real = a;
    real.insert(real.end(), b.begin(), b.end());
    auto fake = random_points(200, 2, rng, 0.1, -5.0);
    Rng mrng(56);
    auto [ndb, jsd] = ndb_jsd(real, fake, 2, 0.05, mrng);
    CHECK(ndb == 2); // both bins differ significantly
    // (0.5,0.5) vs (1,0): jsd = 0.75*ln(4/3) ~ 0.2158 nat
    CHECK(jsd == doctest::Approx(0.75 * std::log(4.0 / 3.0)).epsilon(1e-6));
    // diversity report agrees and serializes
    auto rep = diversity_report(real, fake, 5, 2, 0.05, 56);
    CHECK(rep.ndb == 2);
    CHECK(rep.to_json()["ndb"].get<int>() == 2);
}

TEST_CASE("diversity features: passthrough and penultimate") {
    Model m = make_model(60);
    Rng rng(61);
    Dataset ds = make_gauss2d(3, 4, 0.1, rng);
    auto raw = diversity_features(m, ds, true);
    CHECK(raw.size() == 12);
    CHECK(raw[0].size() == 2);
    CHECK(raw[3] == std::vector<double>{ds.x.data()[6], ds.x.data()[7]});
    auto pen = diversity_features(m, ds, false);
    CHECK(pen.size() == 12);
    CHECK(pen[0].size() == 8); // last hidden width
    // penultimate activations come after a relu
    for (const auto& f : pen)
        for (double v : f) CHECK(v >= 0.0);
}

TEST_CASE("filter-normalized directions match parameter group norms") {
    Model m = make_model(62);
    Rng rng(63);
    Direction d = detail::filter_normalized_direction(m.params, rng);
    auto norms = direction_group_norms(m.params, d);
    CHECK(!norms.empty());
    for (auto [dn, pn] : norms) CHECK(std::abs(dn - pn) < 1e-12);
    // bias and BN entries stay exactly zero
    for (std::size_t p = 0; p < m.params.params.size(); ++p) {
        const auto& [name, t] = m.params.params[p];
        bool scaled = (t.shape().size() == 2 && name.ends_with(".w")) ||
                      t.shape().size() == 4;
        if (!scaled)
            for (double v : d[p]) CHECK(v == 0.0);
    }
}

TEST_CASE("loss surface center equals the unperturbed loss exactly") {
    Model m = make_model(64);
    Rng rng(65);
    Dataset ds = make_gauss2d(3, 8, 0.2, rng);
    std::uint64_t before = checkpoint_hash(m.spec, m.params, m.bn);
    SurfaceGrid g = loss_surface(m, ds.x, ds.y, 5, 1.0, 7, 8);
    CHECK(g.values.size() == 25);
    CHECK(g.axis(0) == -1.0);
    CHECK(g.axis(4) == 1.0);
    CHECK(g.axis(2) == 0.0);
    BNState bn_view = m.bn;
    double center = cross_entropy(
        forward(m.spec, m.params, bn_view, ds.x, ForwardMode::Eval).logits,
        ds.y).item();
    CHECK(g.at(2, 2) == center); // bit-exact: zero perturbation
    CHECK(checkpoint_hash(m.spec, m.params, m.bn) == before);
    CHECK_THROWS_AS(loss_surface(m, ds.x, ds.y, 4, 1.0, 7, 8),
                    std::invalid_argument);
}

TEST_CASE("every grid point equals a hand-perturbed evaluation") {
    Model m = make_model(66, 2);
    Rng drng(67);
    Dataset ds = make_gauss2d(2, 10, 0.3, drng);
    SurfaceGrid g = loss_surface(m, ds.x, ds.y, 3, 0.7, 3, 4);
    Rng r1(3), r2(4);
    Direction d1 = detail::filter_normalized_direction(m.params, r1);
    Direction d2 = detail::filter_normalized_direction(m.params, r2);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            Model probe = clone_model(m, "probe");
            for (std::size_t p = 0; p < probe.params.params.size(); ++p) {
                auto& t = probe.params.params[p].second;
                std::vector<double> v = t.data();
                for (std::size_t k = 0; k < v.size(); ++k)
                    v[k] += g.axis(i) * d1[p][k] + g.axis(j) * d2[p][k];
                t = Tensor::from_data(t.shape(), std::move(v), true);
            }
            BNState bn_view = probe.bn;
            double want = cross_entropy(
                forward(probe.spec, probe.params, bn_view, ds.x,
                        ForwardMode::Eval).logits, ds.y).item();
            CHECK(g.at(i, j) == want);
        }
}

TEST_CASE("surface grid writes csv and ppm artifacts") {
    Model m = make_model(70);
    Rng rng(71);
    Dataset ds = make_gauss2d(3, 4, 0.2, rng);
    SurfaceGrid g = loss_surface(m, ds.x, ds.y, 3, 1.0, 1, 2);
    auto dir = std::filesystem::temp_directory_path();
    auto csv = (dir / "dfshield_surface_test.csv").string();
    auto ppm = (dir / "dfshield_surface_test.ppm").string();
    g.write_csv(csv);
    g.write_ppm(ppm);
    std::ifstream fc(csv);
    std::string header;
    std::getline(fc, header);
    CHECK(header.rfind("x\\y,", 0) == 0);
    std::size_t rows = 0;
    for (std::string line; std::getline(fc, line);) ++rows;
    CHECK(rows == 3);
    std::ifstream fp(ppm, std::ios::binary);
    std::string magic;
    fp >> magic;
    CHECK(magic == "P6");
    std::remove(csv.c_str());
    std::remove(ppm.c_str());
}

TEST_CASE("accuracy entry points validate input") {
    Model m = make_model(72);
    Dataset empty;
    CHECK_THROWS_AS(accuracy_clean(m, empty), std::invalid_argument);
    Rng rng(73);
    Dataset ds = make_gauss2d(3, 5, 0.1, rng);
    double acc = accuracy_clean(m, ds);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    AttackConfig cfg;
    cfg.epsilon = 0.2;
    cfg.iterations = 3;
    Rng arng(74);
    double racc = accuracy_robust(m, ds, cfg, arng);
    CHECK(racc >= 0.0);
    CHECK(racc <= acc + 1e-12);
}
