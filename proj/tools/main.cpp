// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.
//
// Command-line front end. Every subcommand reads one JSON config (all
// keys optional unless noted), applies --seed/--threads/--out
// overrides, and writes its artifacts into the output directory.
//
// Exit codes: 0 success, 2 configuration error, 3 I/O error,
// 4 numerical error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dfshield/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dfshield;
using nlohmann::json;

namespace {

struct CliArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::optional<std::string> out;
};

RunConfig resolve_config(const CliArgs& a) {
    RunConfig cfg = a.config_path.empty() ? RunConfig{} : load_config(a.config_path);
    if (a.seed) cfg.seed = *a.seed;
    if (a.threads) cfg.threads = *a.threads;
    if (a.out) cfg.out_dir = *a.out;
    cfg.synth.threads = cfg.threads;
    return cfg;
}

fs::path out_dir(const RunConfig& cfg) {
    fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    return dir;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write file: " + path.string());
    f << j.dump(2) << "\n";
}

Dataset build_dataset(const RunConfig& cfg, Rng& rng) {
    if (cfg.dataset.generator == "gauss2d")
        return make_gauss2d(cfg.dataset.classes, cfg.dataset.per_class,
                            cfg.dataset.spread, rng);
    return make_patterns8x8(cfg.dataset.classes, cfg.dataset.per_class,
                            cfg.dataset.spread, rng);
}

ModelSpec default_spec_for(const RunConfig& cfg) {
    ModelSpec spec = cfg.model;
    if (spec.input_shape.empty()) {
        if (cfg.dataset.generator == "gauss2d") {
            spec.kind = ModelKind::MlpBn;
            spec.input_shape = {2};
            if (spec.hidden.empty()) spec.hidden = {16, 16, 16};
        } else {
            spec.kind = ModelKind::ConvTiny;
            spec.input_shape = {1, 8, 8};
        }
        spec.num_classes = cfg.dataset.classes;
    }
    return spec;
}

Model load_model_or_fail(const std::string& path, const char* which) {
    if (path.empty())
        throw std::invalid_argument(std::string("config: '") + which +
                                    "' is required for this command");
    return load_checkpoint(path);
}

Dataset load_dataset_or_fail(const std::string& path) {
    if (path.empty())
        throw std::invalid_argument(
            "config: 'dataset_path' is required for this command");
    return load_dataset(path);
}

json epoch_log_json(const std::vector<EpochLog>& log) {
    json out = json::array();
    for (const auto& e : log) out.push_back(e.to_json());
    return out;
}

// --------------------------------------------------------------------------
// subcommands

int cmd_pretrain(const CliArgs& a) {
    RunConfig cfg = resolve_config(a);
    fs::path dir = out_dir(cfg);
    Rng drng = stage_rng(cfg, "data");
    Dataset full = build_dataset(cfg, drng);
    auto [train, test] = split_train_test(full);
    ModelSpec spec = default_spec_for(cfg);
    Rng irng = stage_rng(cfg, "init");
    auto [params, bn] = init_params(spec, irng);
    Model teacher{spec, std::move(params), std::move(bn)};
    teacher.params.role = "teacher";
    Rng trng = stage_rng(cfg, "pretrain");
    auto log = pretrain_teacher(teacher, train, cfg.pretrain.epochs,
                                cfg.pretrain.lr, cfg.pretrain.momentum,
                                cfg.pretrain.batch_size, trng);
    std::string tpath = cfg.teacher_path.empty()
                            ? (dir / "teacher.dfsc").string()
                            : cfg.teacher_path;
    save_checkpoint(tpath, teacher.spec, teacher.params, teacher.bn);
    save_dataset((dir / "train.dfsd").string(), train);
    save_dataset((dir / "test.dfsd").string(), test);
    write_json(dir / "pretrain_log.json",
               {{"teacher", tpath},
                {"train_accuracy", accuracy_clean(teacher, train)},
                {"test_accuracy", accuracy_clean(teacher, test)},
                {"epochs", epoch_log_json(log)}});
    std::cout << "teacher saved to " << tpath
              << " (test accuracy " << accuracy_clean(teacher, test) << ")\n";
    return 0;
}

int cmd_synth(const CliArgs& a) {
    RunConfig cfg = resolve_config(a);
    fs::path dir = out_dir(cfg);
    Model teacher = load_model_or_fail(cfg.teacher_path, "teacher_path");
    Rng rng = stage_rng(cfg, "synth");
    auto [ds, sidecar] = generate_dataset(teacher, cfg.synth,
                                          cfg.attack.range, rng);
    std::string dpath = cfg.dataset_path.empty()
                            ? (dir / "synth.dfsd").string()
                            : cfg.dataset_path;
    save_dataset(dpath, ds);
    write_json(dir / "synth_sidecar.json", sidecar.to_json());
    std::cout << "synthesized " << ds.size() << " samples to " << dpath << "\n";
    return 0;
}

int cmd_train(const CliArgs& a) {
    RunConfig cfg = resolve_config(a);
    fs::path dir = out_dir(cfg);
    Model teacher = load_model_or_fail(cfg.teacher_path, "teacher_path");
    Dataset synth = load_dataset_or_fail(cfg.dataset_path);
    Model student = clone_model(teacher, "student");
    Rng rng = stage_rng(cfg, "train");
    auto log = train_student(teacher, student, synth, cfg.train, cfg.attack,
                             rng);
    std::string spath = cfg.student_path.empty()
                            ? (dir / "student.dfsc").string()
                            : cfg.student_path;
    save_checkpoint(spath, student.spec, student.params, student.bn);
    write_json(dir / "train_log.json",
               {{"student", spath}, {"epochs", epoch_log_json(log)}});
    std::cout << "student saved to " << spath << "\n";
    return 0;
}

int cmd_attack(const CliArgs& a, const std::vector<std::size_t>& iters,
               std::size_t unbounded_iters, double unbounded_step) {
    RunConfig cfg = resolve_config(a);
    fs::path dir = out_dir(cfg);
    std::string mpath = cfg.student_path.empty() ? cfg.teacher_path
                                                 : cfg.student_path;
    Model model = load_model_or_fail(mpath, "student_path or teacher_path");
    Dataset ds = load_dataset_or_fail(cfg.dataset_path);
    cfg.attack.validate();
    RobustnessReport rep =
        attack_curve(model, ds, cfg.attack, iters, unbounded_iters,
                     unbounded_step, Rng(cfg.seed).derive("attack").next_u64());
    write_json(dir / "robustness.json", rep.to_json());
    std::cout << "clean accuracy " << rep.clean_accuracy << "\n";
    for (const auto& [name, eps, it, acc] : rep.robust)
        std::cout << name << " eps=" << eps << " iters=" << it
                  << " robust accuracy " << acc << "\n";
    return 0;
}

int cmd_eval(const CliArgs& a) {
    RunConfig cfg = resolve_config(a);
    fs::path dir = out_dir(cfg);
    std::string mpath = cfg.student_path.empty() ? cfg.teacher_path
                                                 : cfg.student_path;
    Model model = load_model_or_fail(mpath, "student_path or teacher_path");
    Dataset ds = load_dataset_or_fail(cfg.dataset_path);
    double clean = accuracy_clean(model, ds);
    Rng rng = stage_rng(cfg, "eval");
    double robust = accuracy_robust(model, ds, cfg.attack, rng);
    write_json(dir / "eval.json", {{"model", mpath},
                                   {"samples", ds.size()},
                                   {"clean_accuracy", clean},
                                   {"robust_accuracy", robust}});
    std::cout << "clean " << clean << " robust " << robust << "\n";
    return 0;
}

int cmd_diversity(const CliArgs& a, const std::string& real_path,
                  const std::string& fake_path, std::size_t k, bool raw) {
    RunConfig cfg = resolve_config(a);
    fs::path dir = out_dir(cfg);
    Model teacher = load_model_or_fail(cfg.teacher_path, "teacher_path");
    Dataset real = load_dataset(real_path);
    Dataset fake = load_dataset(fake_path);
    auto rf = diversity_features(teacher, real, raw);
    auto ff = diversity_features(teacher, fake, raw);
    std::size_t bins = std::min<std::size_t>(20, rf.size() / 5);
    DiversityReport rep =
        diversity_report(rf, ff, k, bins, 0.05,
                         Rng(cfg.seed).derive("diversity").next_u64());
    write_json(dir / "diversity.json", rep.to_json());
    std::cout << "recall " << rep.recall << " coverage " << rep.coverage
              << " ndb " << rep.ndb << " jsd " << rep.jsd << "\n";
    return 0;
}

int cmd_surface(const CliArgs& a, std::size_t resolution, double range) {
    RunConfig cfg = resolve_config(a);
    fs::path dir = out_dir(cfg);
    std::string mpath = cfg.student_path.empty() ? cfg.teacher_path
                                                 : cfg.student_path;
    Model model = load_model_or_fail(mpath, "student_path or teacher_path");
    Dataset ds = load_dataset_or_fail(cfg.dataset_path);
    Rng srng = stage_rng(cfg, "surface");
    std::uint64_t s1 = srng.next_u64(), s2 = srng.next_u64();
    SurfaceGrid g = loss_surface(model, ds.x, ds.y, resolution, range, s1, s2);
    g.write_csv((dir / "surface.csv").string());
    g.write_ppm((dir / "surface.ppm").string());
    std::cout << "surface grid " << resolution << "x" << resolution
              << " written (center loss " << g.at(resolution / 2, resolution / 2)
              << ")\n";
    return 0;
}

Toy2dParams toy_params(const RunConfig& cfg) {
    Toy2dParams p;
    p.threads = cfg.threads;
    return p;
}

int cmd_toy2d(const CliArgs& a) {
    RunConfig cfg = resolve_config(a);
    fs::path dir = out_dir(cfg);
    Toy2dParams p = toy_params(cfg);
    Toy2dResult r = run_toy2d(cfg.seed, p);

    save_checkpoint((dir / "teacher.dfsc").string(), r.teacher.spec,
                    r.teacher.params, r.teacher.bn);
    save_checkpoint((dir / "student.dfsc").string(), r.student.spec,
                    r.student.params, r.student.bn);
    save_dataset((dir / "synth_fixed.dfsd").string(), r.fixed_synth);
    save_dataset((dir / "synth_dss.dfsd").string(), r.dss_synth);
    write_scatter_csv((dir / "scatter_real.csv").string(), r.test_set);
    write_scatter_csv((dir / "scatter_fixed.csv").string(), r.fixed_synth);
    write_scatter_csv((dir / "scatter_dss.csv").string(), r.dss_synth);
    write_json(dir / "synth_fixed_sidecar.json", r.fixed_sidecar.to_json());
    write_json(dir / "synth_dss_sidecar.json", r.dss_sidecar.to_json());
    write_json(dir / "diversity.json",
               {{"fixed", r.fixed_div.to_json()}, {"dss", r.dss_div.to_json()}});
    write_json(dir / "report.json",
               {{"teacher_clean", r.teacher_clean},
                {"teacher_robust", r.teacher_robust},
                {"student_clean", r.student_clean},
                {"student_robust", r.student_robust},
                {"pretrain", epoch_log_json(r.pretrain_log)},
                {"train", epoch_log_json(r.train_log)}});
    std::cout << "teacher clean " << r.teacher_clean << " robust "
              << r.teacher_robust << "\n"
              << "student clean " << r.student_clean << " robust "
              << r.student_robust << "\n"
              << "coverage fixed " << r.fixed_div.coverage << " dss "
              << r.dss_div.coverage << "\n";
    return 0;
}

int cmd_sweep(const CliArgs& a, const std::string& param,
              std::vector<double> values) {
    RunConfig cfg = resolve_config(a);
    fs::path dir = out_dir(cfg);
    if (values.empty()) {
        if (param == "tau")
            values = {0.0, 0.25, 0.5, 0.75, 1.0};
        else if (param == "B")
            values = {1, 2, 4, 10};
        else
            throw std::invalid_argument("sweep: unknown parameter '" + param +
                                        "' (expected tau or B)");
    }
    Toy2dParams p = toy_params(cfg);
    Toy2dResult base = run_toy2d(cfg.seed, p);
    auto rows = run_sweep(base, p, param, values,
                          Rng(cfg.seed).derive("sweep").next_u64());
    write_sweep_csv((dir / ("sweep_" + param + ".csv")).string(), rows);
    for (const auto& r : rows)
        std::cout << param << "=" << r.value << " clean " << r.clean
                  << " robust " << r.robust << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"data-free robust distillation toolkit"};
    app.require_subcommand(1);

    CliArgs args;
    std::uint64_t seed_val = 0;
    std::size_t threads_val = 0;
    std::string out_val;
    app.add_option("--config", args.config_path, "JSON config file");
    auto* seed_opt = app.add_option("--seed", seed_val, "override seed");
    auto* threads_opt =
        app.add_option("--threads", threads_val, "override worker count");
    auto* out_opt = app.add_option("--out", out_val, "output directory");

    auto* pretrain = app.add_subcommand("pretrain", "train a teacher on real data");
    auto* synth = app.add_subcommand("synth", "synthesize data from a teacher");
    auto* train = app.add_subcommand("train", "adversarially train a student");
    auto* attack = app.add_subcommand("attack", "run a PGD iteration curve");
    std::vector<std::size_t> attack_iters{1, 2, 5, 10, 100};
    std::size_t unbounded_iters = 0;
    double unbounded_step = 0.1;
    attack->add_option("--iters", attack_iters, "PGD iteration counts");
    attack->add_option("--unbounded-iters", unbounded_iters,
                       "extra unbounded-budget PGD entry (0 = off)");
    attack->add_option("--unbounded-step", unbounded_step,
                       "step size for the unbounded entry");
    auto* eval = app.add_subcommand("eval", "clean and robust accuracy");
    auto* diversity =
        app.add_subcommand("diversity", "compare a synthetic set to real data");
    std::string real_path, fake_path;
    std::size_t div_k = 2;
    bool div_raw = false;
    diversity->add_option("--real", real_path, "real dataset (.dfsd)")
        ->required();
    diversity->add_option("--fake", fake_path, "synthetic dataset (.dfsd)")
        ->required();
    diversity->add_option("--k", div_k, "neighborhood size");
    diversity->add_flag("--raw", div_raw,
                        "measure in input space instead of feature space");
    auto* surface = app.add_subcommand("surface", "2-d loss surface grid");
    std::size_t resolution = 25;
    double range = 1.0;
    surface->add_option("--resolution", resolution, "odd grid resolution");
    surface->add_option("--range", range, "half-width of the grid");
    auto* toy2d = app.add_subcommand("toy2d", "full pipeline on the 2-d toy task");
    auto* sweep = app.add_subcommand("sweep", "re-train over tau or B");
    std::string sweep_param = "tau";
    std::vector<double> sweep_values;
    sweep->add_option("--param", sweep_param, "tau or B");
    sweep->add_option("--values", sweep_values, "parameter values");

    // parent-level flags (--config etc.) may appear after the subcommand
    for (auto* sc : app.get_subcommands(nullptr)) sc->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (*seed_opt) args.seed = seed_val;
    if (*threads_opt) args.threads = threads_val;
    if (*out_opt) args.out = out_val;

    try {
        if (pretrain->parsed()) return cmd_pretrain(args);
        if (synth->parsed()) return cmd_synth(args);
        if (train->parsed()) return cmd_train(args);
        if (attack->parsed())
            return cmd_attack(args, attack_iters, unbounded_iters,
                              unbounded_step);
        if (eval->parsed()) return cmd_eval(args);
        if (diversity->parsed())
            return cmd_diversity(args, real_path, fake_path, div_k, div_raw);
        if (surface->parsed()) return cmd_surface(args, resolution, range);
        if (toy2d->parsed()) return cmd_toy2d(args);
        if (sweep->parsed()) return cmd_sweep(args, sweep_param, sweep_values);
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
