// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.
//
// End-to-end desk-scale pipelines on the 2-d toy problem: pretrain a
// teacher, synthesize fixed-coefficient and randomized-coefficient
// datasets, train a student on the synthetic data, and evaluate
// robustness and diversity. Shared by the command-line tool and the
// acceptance suite so both exercise identical code paths.

#pragma once

#include <string>
#include <vector>

#include "dfshield/attack.hpp"
#include "dfshield/config.hpp"
#include "dfshield/data.hpp"
#include "dfshield/eval.hpp"
#include "dfshield/model.hpp"
#include "dfshield/synth.hpp"
#include "dfshield/train.hpp"

namespace dfshield {

struct Toy2dParams {
    // data
    int classes = 3;
    int per_class = 200;
    double spread = 0.2;
    // teacher
    std::vector<int> hidden = {16, 16, 16};
    std::size_t pretrain_epochs = 60;
    double pretrain_lr = 0.05;
    double pretrain_momentum = 0.9;
    std::size_t pretrain_batch = 32;
    // synthesis
    std::size_t synth_batch = 40;
    std::size_t synth_batches = 24;
    std::size_t synth_iters = 200;
    double synth_lr = 0.1;
    // the fixed-coefficient baseline: class-loss-dominated, the common
    // inversion recipe before coefficient randomization
    std::array<double, 3> fixed_coeffs{1.0, 0.1, 0.1};
    // synthesis domain, mirroring the bounded value range of image data
    ValueRange synth_range{-1.5, 1.5};
    // diversity metrics: neighborhood size and feature space
    std::size_t diversity_k = 2;
    bool diversity_raw = false; // false -> penultimate activations
    // attack: l2 budgets sized against the ~0.2-spread clusters; a
    // separate (smaller) budget is used while training for stability
    AttackNorm norm = AttackNorm::L2;
    double epsilon = 1.0;
    double train_epsilon = 0.8;
    std::size_t attack_iters = 10;
    // student training
    std::size_t agg_batches = 4;
    std::size_t train_batch = 30;
    std::size_t train_epochs = 200;
    double train_lr = 1e-3;
    double tau = 0.5;
    std::size_t threads = 1;
};

struct Toy2dResult {
    Model teacher;
    Model student;
    Dataset train_set, test_set;
    Dataset fixed_synth, dss_synth;
    SynthSidecar fixed_sidecar, dss_sidecar;
    DiversityReport fixed_div, dss_div;
    double teacher_clean = 0.0, teacher_robust = 0.0;
    double student_clean = 0.0, student_robust = 0.0;
    std::vector<EpochLog> pretrain_log, train_log;
};

inline AttackConfig toy2d_attack(const Toy2dParams& p, bool training = false) {
    AttackConfig atk;
    atk.norm = p.norm;
    atk.epsilon = (training && p.train_epsilon > 0.0) ? p.train_epsilon
                                                      : p.epsilon;
    atk.iterations = p.attack_iters;
    return atk;
}

// Stage seeds fan out from the global seed by stage-name mixing, so
// individual stages can be reproduced in isolation.
inline Toy2dResult run_toy2d(std::uint64_t seed, const Toy2dParams& p = {}) {
    Toy2dResult r;
    Rng base(seed);

    // data
    {
        Rng rng = base.derive("data");
        Dataset full = make_gauss2d(p.classes, p.per_class, p.spread, rng);
        auto [tr, te] = split_train_test(full);
        r.train_set = std::move(tr);
        r.test_set = std::move(te);
    }

    // teacher
    {
        ModelSpec spec;
        spec.kind = ModelKind::MlpBn;
        spec.input_shape = {2};
        spec.num_classes = p.classes;
        spec.hidden = p.hidden;
        Rng init = base.derive("init");
        auto [params, bn] = init_params(spec, init);
        r.teacher = Model{spec, std::move(params), std::move(bn)};
        r.teacher.params.role = "teacher";
        Rng rng = base.derive("pretrain");
        r.pretrain_log = pretrain_teacher(r.teacher, r.train_set,
                                          p.pretrain_epochs, p.pretrain_lr,
                                          p.pretrain_momentum, p.pretrain_batch,
                                          rng);
    }

    // synthesis: fixed coefficients vs per-batch random coefficients
    {
        SynthConfig sc;
        sc.batch_size = p.synth_batch;
        sc.num_batches = p.synth_batches;
        sc.iterations = p.synth_iters;
        sc.lr = p.synth_lr;
        sc.threads = p.threads;
        sc.fixed_coeffs = p.fixed_coeffs;
        sc.mode = SynthMode::Fixed;
        Rng rf = base.derive("synth-fixed");
        auto [df, sf] = generate_dataset(r.teacher, sc, p.synth_range, rf);
        r.fixed_synth = std::move(df);
        r.fixed_sidecar = std::move(sf);
        sc.mode = SynthMode::Dss;
        Rng rd = base.derive("synth-dss");
        auto [dd, sd] = generate_dataset(r.teacher, sc, p.synth_range, rd);
        r.dss_synth = std::move(dd);
        r.dss_sidecar = std::move(sd);
    }

    // diversity of each synthetic set against held-out real data
    {
        auto real = diversity_features(r.teacher, r.test_set, p.diversity_raw);
        auto fixed =
            diversity_features(r.teacher, r.fixed_synth, p.diversity_raw);
        auto dss = diversity_features(r.teacher, r.dss_synth, p.diversity_raw);
        std::size_t bins = std::min<std::size_t>(20, real.size() / 5);
        std::uint64_t mseed = base.derive("diversity").next_u64();
        r.fixed_div =
            diversity_report(real, fixed, p.diversity_k, bins, 0.05, mseed);
        r.dss_div =
            diversity_report(real, dss, p.diversity_k, bins, 0.05, mseed);
    }

    // student training on the randomized-coefficient synthetic data
    {
        r.student = clone_model(r.teacher, "student");
        TrainConfig tc;
        tc.agg_batches = p.agg_batches;
        tc.batch_size = p.train_batch;
        tc.epochs = p.train_epochs;
        tc.lr = p.train_lr;
        tc.tau = p.tau;
        AttackConfig atk = toy2d_attack(p, /*training=*/true);
        Rng rng = base.derive("train");
        r.train_log = train_student(r.teacher, r.student, r.dss_synth, tc, atk,
                                    rng);
    }

    // evaluation on the held-out split
    {
        AttackConfig atk = toy2d_attack(p);
        r.teacher_clean = accuracy_clean(r.teacher, r.test_set);
        r.student_clean = accuracy_clean(r.student, r.test_set);
        Rng r1 = base.derive("eval-teacher");
        Rng r2 = base.derive("eval-student");
        r.teacher_robust = accuracy_robust(r.teacher, r.test_set, atk, r1);
        r.student_robust = accuracy_robust(r.student, r.test_set, atk, r2);
    }
    return r;
}

// Writes the x/y/label scatter of a 2-d dataset.
inline void write_scatter_csv(const std::string& path, const Dataset& ds) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write file: " + path);
    f << "x,y,label\n";
    std::size_t stride = numel(ds.sample_shape());
    if (stride != 2)
        throw std::invalid_argument("scatter: dataset is not 2-d");
    for (std::size_t i = 0; i < ds.size(); ++i)
        f << ds.x.data()[i * 2] << "," << ds.x.data()[i * 2 + 1] << ","
          << ds.y[i] << "\n";
}

struct SweepRow {
    std::string param;
    double value = 0.0;
    double clean = 0.0;
    double robust = 0.0;
    std::uint64_t student_hash = 0;
};

// Re-trains the student from the same teacher and synthetic data for
// each parameter value; everything else is held fixed, including seeds.
inline std::vector<SweepRow> run_sweep(const Toy2dResult& base_run,
                                       const Toy2dParams& p,
                                       const std::string& param,
                                       const std::vector<double>& values,
                                       std::uint64_t seed) {
    std::vector<SweepRow> rows;
    Rng base(seed);
    for (double v : values) {
        TrainConfig tc;
        tc.agg_batches = p.agg_batches;
        tc.batch_size = p.train_batch;
        tc.epochs = p.train_epochs;
        tc.lr = p.train_lr;
        tc.tau = p.tau;
        if (param == "tau") {
            tc.tau = v;
        } else if (param == "B") {
            tc.agg_batches = static_cast<std::size_t>(v);
        } else {
            throw std::invalid_argument("sweep: unknown parameter '" + param +
                                        "' (expected tau or B)");
        }
        Model student = clone_model(base_run.teacher, "student");
        AttackConfig atk = toy2d_attack(p, /*training=*/true);
        Rng rng = base.derive("train");
        train_student(base_run.teacher, student, base_run.dss_synth, tc, atk,
                      rng);
        SweepRow row;
        row.param = param;
        row.value = v;
        row.clean = accuracy_clean(student, base_run.test_set);
        Rng erng = base.derive("eval");
        AttackConfig eval_atk = toy2d_attack(p);
        row.robust = accuracy_robust(student, base_run.test_set, eval_atk, erng);
        row.student_hash = checkpoint_hash(student.spec, student.params,
                                           student.bn);
        rows.push_back(row);
    }
    return rows;
}

inline void write_sweep_csv(const std::string& path,
                            const std::vector<SweepRow>& rows) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write file: " + path);
    f << "param,value,clean_accuracy,robust_accuracy\n";
    for (const auto& r : rows)
        f << r.param << "," << r.value << "," << r.clean << "," << r.robust
          << "\n";
}

} // namespace dfshield
