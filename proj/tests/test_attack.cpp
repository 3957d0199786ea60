// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dfshield/attack.hpp"

using namespace dfshield;

namespace {

Model make_model(std::uint64_t seed = 42) {
    ModelSpec spec;
    spec.kind = ModelKind::MlpBn;
    spec.input_shape = {2};
    spec.num_classes = 3;
    spec.hidden = {8, 8, 8};
    Rng rng(seed);
    auto [params, bn] = init_params(spec, rng);
    return Model{spec, std::move(params), std::move(bn)};
}

} // namespace

TEST_CASE("project is identity inside the ball and clips outside (linf)") {
    AttackConfig cfg;
    cfg.norm = AttackNorm::Linf;
    cfg.epsilon = 0.5;
    Tensor x = Tensor::from_data({2, 2}, {0.0, 0.0, 1.0, 1.0});
    Tensor inside = Tensor::from_data({2, 2}, {0.3, -0.4, 1.2, 0.9});
    CHECK(project(inside, x, cfg).data() == inside.data());
    Tensor outside = Tensor::from_data({2, 2}, {0.9, -2.0, 1.2, 3.0});
    auto p = project(outside, x, cfg).data();
    CHECK(p == std::vector<double>{0.5, -0.5, 1.2, 1.5});
    // projecting twice changes nothing
    Tensor p1 = Tensor::from_data({2, 2}, p);
    CHECK(project(p1, x, cfg).data() == p);
}

TEST_CASE("project respects the per-sample l2 budget") {
    AttackConfig cfg;
    cfg.norm = AttackNorm::L2;
    cfg.epsilon = 1.0;
    Rng rng(5);
    std::vector<double> base(10 * 4), pert(10 * 4);
    for (auto& v : base) v = rng.normal();
    for (std::size_t i = 0; i < pert.size(); ++i)
        pert[i] = base[i] + 3.0 * rng.normal();
    Tensor x = Tensor::from_data({10, 4}, base);
    auto out = project(Tensor::from_data({10, 4}, pert), x, cfg).data();
    for (std::size_t b = 0; b < 10; ++b) {
        double n2 = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            double d = out[b * 4 + i] - base[b * 4 + i];
            n2 += d * d;
        }
        CHECK(std::sqrt(n2) <= cfg.epsilon + 1e-12);
    }
    // direction is preserved: rescaled delta is parallel to the original
    for (std::size_t b = 0; b < 10; ++b) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            double d0 = pert[b * 4 + i] - base[b * 4 + i];
            double d1 = out[b * 4 + i] - base[b * 4 + i];
            dot += d0 * d1;
            na += d0 * d0;
            nb += d1 * d1;
        }
        CHECK(dot / std::sqrt(na * nb) == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("project clamps to the value range and rejects shape mismatch") {
    AttackConfig cfg;
    cfg.epsilon = 10.0;
    cfg.range = ValueRange{0.0, 1.0};
    Tensor x = Tensor::from_data({1, 2}, {0.5, 0.5});
    Tensor adv = Tensor::from_data({1, 2}, {-3.0, 7.0});
    CHECK(project(adv, x, cfg).data() == std::vector<double>{0.0, 1.0});
    Tensor bad = Tensor::from_data({2}, {0.0, 0.0});
    CHECK_THROWS_AS(project(bad, x, cfg), std::invalid_argument);
}

TEST_CASE("config validation") {
    AttackConfig cfg;
    cfg.iterations = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.iterations = 1;
    cfg.epsilon = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.epsilon = 0.2;
    CHECK(cfg.step_size() == doctest::Approx(0.05));
    cfg.epsilon = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument); // needs explicit step
    cfg.step = 0.1;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("pgd against a constant-output model is a no-op without random start") {
    Model m = make_model();
    // zero every parameter: logits are constant, gradient w.r.t. x is zero
    for (auto& [name, t] : m.params.params)
        std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
    AttackConfig cfg;
    cfg.epsilon = 0.3;
    cfg.iterations = 5;
    cfg.random_start = false;
    Rng rng(1);
    Tensor x = Tensor::from_data({4, 2}, {0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8});
    Tensor adv = pgd(m, x, {0, 1, 2, 0}, cfg, rng);
    CHECK(adv.data() == x.data());
}

TEST_CASE("single-step pgd is fgsm: base + step * sign(grad)") {
    Model m = make_model();
    Rng drng(2);
    std::vector<double> xs(6 * 2);
    for (auto& v : xs) v = drng.normal();
    Tensor x = Tensor::from_data({6, 2}, xs);
    std::vector<int> y{0, 1, 2, 0, 1, 2};

    AttackConfig cfg;
    cfg.epsilon = 0.25;
    cfg.iterations = 1;
    cfg.random_start = false;
    Rng rng(3);
    Tensor adv = pgd(m, x, y, cfg, rng);

    // manual fgsm from the same gradient
    BNState bn_view = m.bn;
    Tensor xt = Tensor::from_data({6, 2}, xs, true);
    auto res = forward(m.spec, m.params, bn_view, xt, ForwardMode::Eval);
    backward(cross_entropy(res.logits, y));
    for (std::size_t i = 0; i < xs.size(); ++i) {
        double g = xt.grad()[i];
        double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
        double want = xs[i] + cfg.step_size() * s;
        CHECK(adv.data()[i] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("pgd stays in the ball, lowers accuracy, and never mutates the model") {
    Model m = make_model();
    // a separable toy problem the random model already ranks non-trivially
    Rng drng(4);
    std::size_t n = 64;
    std::vector<double> xs(n * 2);
    for (auto& v : xs) v = drng.normal() * 0.5;
    Tensor x = Tensor::from_data({n, 2}, xs);
    std::vector<int> y(n);
    {
        BNState bn_view = m.bn;
        auto logits = forward(m.spec, m.params, bn_view, x, ForwardMode::Eval).logits;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < 3; ++j)
                if (logits.data()[i * 3 + j] > logits.data()[i * 3 + best]) best = j;
            y[i] = static_cast<int>(best);
        }
    }
    std::uint64_t before = checkpoint_hash(m.spec, m.params, m.bn);
    AttackConfig cfg;
    cfg.epsilon = 0.5;
    cfg.iterations = 20;
    for (AttackNorm norm : {AttackNorm::Linf, AttackNorm::L2}) {
        cfg.norm = norm;
        Rng rng(6);
        Tensor adv = pgd(m, x, y, cfg, rng);
        double acc_clean = detail::accuracy_of(m, x, y);
        double acc_adv = detail::accuracy_of(m, adv, y);
        CHECK(acc_clean == 1.0); // labels were taken from the model itself
        CHECK(acc_adv < acc_clean);
        // budget honored for every sample
        for (std::size_t b = 0; b < n; ++b) {
            if (norm == AttackNorm::Linf) {
                for (std::size_t i = 0; i < 2; ++i)
                    CHECK(std::abs(adv.data()[b * 2 + i] - xs[b * 2 + i]) <=
                          cfg.epsilon + 1e-12);
            } else {
                double n2 = 0.0;
                for (std::size_t i = 0; i < 2; ++i) {
                    double d = adv.data()[b * 2 + i] - xs[b * 2 + i];
                    n2 += d * d;
                }
                CHECK(std::sqrt(n2) <= cfg.epsilon + 1e-12);
            }
        }
    }
    CHECK(checkpoint_hash(m.spec, m.params, m.bn) == before);
}

TEST_CASE("pgd is deterministic per seed and varies across seeds") {
    Model m = make_model();
    Rng drng(7);
    std::vector<double> xs(8 * 2);
    for (auto& v : xs) v = drng.normal();
    Tensor x = Tensor::from_data({8, 2}, xs);
    std::vector<int> y{0, 1, 2, 0, 1, 2, 0, 1};
    AttackConfig cfg;
    cfg.epsilon = 0.3;
    cfg.iterations = 7;
    Rng a(11), b(11), c(12);
    Tensor r1 = pgd(m, x, y, cfg, a);
    Tensor r2 = pgd(m, x, y, cfg, b);
    Tensor r3 = pgd(m, x, y, cfg, c);
    CHECK(r1.data() == r2.data());
    CHECK(r1.data() != r3.data());
}

TEST_CASE("kl objective uses the clean prediction as reference") {
    Model m = make_model();
    Rng drng(8);
    std::vector<double> xs(8 * 2);
    for (auto& v : xs) v = drng.normal();
    Tensor x = Tensor::from_data({8, 2}, xs);
    std::vector<int> y(8, 0); // ignored by the kl objective
    AttackConfig cfg;
    cfg.loss = AttackLoss::KlVsClean;
    cfg.epsilon = 0.4;
    cfg.iterations = 10;
    cfg.random_start = false;
    Rng rng(9);
    Tensor adv = pgd(m, x, y, cfg, rng);
    // the attack should move the prediction away from the clean one
    BNState bn_view = m.bn;
    Tensor clean = forward(m.spec, m.params, bn_view, x, ForwardMode::Eval).logits;
    Tensor pert = forward(m.spec, m.params, bn_view, adv, ForwardMode::Eval).logits;
    CHECK(kl_divergence(pert, clean.detach()).item() > 0.0);
    CHECK(adv.data() != x.data());
}

TEST_CASE("attack_curve shape and unbounded entry") {
    Model m = make_model();
    Rng dsrng(13);
    Dataset ds = make_gauss2d(3, 10, 0.1, dsrng);
    AttackConfig cfg;
    cfg.epsilon = 0.2;
    RobustnessReport rep = attack_curve(m, ds, cfg, {1, 2, 5}, 20, 0.05, 99);
    CHECK(rep.sample_count == 30);
    CHECK(rep.robust.size() == 4);
    CHECK(std::get<1>(rep.robust[3]) == "inf");
    auto j = rep.to_json();
    CHECK(j["robust"].size() == 4);
    CHECK(j["clean_accuracy"].get<double>() == rep.clean_accuracy);
    CHECK_THROWS_AS(attack_curve(m, ds, cfg, {}, 0, 0.0, 1),
                    std::invalid_argument);
}
