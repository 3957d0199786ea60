// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.
//
// Run configuration: one JSON document with nested sections for the
// dataset generator, model, synthesis, attack, and training stages.
// Parsing is strict — unknown keys, type mismatches, and missing
// required fields are all rejected with the offending key named.

#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfshield/attack.hpp"
#include "dfshield/model.hpp"
#include "dfshield/synth.hpp"
#include "dfshield/train.hpp"

namespace dfshield {

struct DatasetSpec {
    std::string generator = "gauss2d"; // gauss2d | patterns8x8
    int classes = 3;
    int per_class = 200;
    double spread = 0.15; // gauss2d cluster spread / patterns noise level
};

struct PretrainConfig {
    std::size_t epochs = 40;
    double lr = 0.05;
    double momentum = 0.9;
    std::size_t batch_size = 32;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::string out_dir = ".";
    std::string teacher_path;
    std::string student_path;
    std::string dataset_path;
    ModelSpec model;
    DatasetSpec dataset;
    PretrainConfig pretrain;
    SynthConfig synth;
    TrainConfig train;
    AttackConfig attack;
};

namespace detail {

using nlohmann::json;

inline void expect_object(const json& j, const std::string& where) {
    if (!j.is_object())
        throw std::invalid_argument("config: section '" + where +
                                    "' must be an object");
}

inline void reject_unknown(const json& j, const std::string& where,
                           const std::set<std::string>& allowed) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw std::invalid_argument("config: unknown key '" + it.key() +
                                        "' in section '" + where + "'");
}

template <typename T>
T typed(const json& j, const std::string& key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw std::invalid_argument("config: key '" + key + "' in section '" +
                                    where + "' has the wrong type");
    }
}

template <typename T>
void read_if(const json& j, const std::string& key, const std::string& where,
             T& out) {
    if (j.contains(key)) out = typed<T>(j, key, where);
}

inline void require(const json& j, const std::string& key,
                    const std::string& where) {
    if (!j.contains(key))
        throw std::invalid_argument("config: missing required field '" + key +
                                    "' in section '" + where + "'");
}

template <typename Enum>
Enum parse_enum(const json& j, const std::string& key, const std::string& where,
                const std::vector<std::pair<std::string, Enum>>& table,
                Enum fallback) {
    if (!j.contains(key)) return fallback;
    std::string v = typed<std::string>(j, key, where);
    for (const auto& [name, e] : table)
        if (name == v) return e;
    throw std::invalid_argument("config: key '" + key + "' in section '" +
                                where + "' has unsupported value '" + v + "'");
}

template <typename Enum>
std::string enum_name(Enum e,
                      const std::vector<std::pair<std::string, Enum>>& table) {
    for (const auto& [name, v] : table)
        if (v == e) return name;
    throw std::invalid_argument("config: unnamed enum value");
}

inline const std::vector<std::pair<std::string, ModelKind>> kind_names{
    {"mlp-bn", ModelKind::MlpBn}, {"conv-tiny", ModelKind::ConvTiny}};
inline const std::vector<std::pair<std::string, SynthMode>> mode_names{
    {"dss", SynthMode::Dss}, {"fixed", SynthMode::Fixed}};
inline const std::vector<std::pair<std::string, FeatureStat>> stat_names{
    {"variance", FeatureStat::Variance}, {"stddev", FeatureStat::Stddev}};
inline const std::vector<std::pair<std::string, AttackNorm>> norm_names{
    {"linf", AttackNorm::Linf}, {"l2", AttackNorm::L2}};
inline const std::vector<std::pair<std::string, AttackLoss>> aloss_names{
    {"ce", AttackLoss::Ce}, {"kl", AttackLoss::KlVsClean}};
inline const std::vector<std::pair<std::string, TrainLoss>> tloss_names{
    {"dfshield", TrainLoss::DfShield},
    {"trades", TrainLoss::Trades},
    {"std", TrainLoss::Std}};
inline const std::vector<std::pair<std::string, RefineNorm>> rnorm_names{
    {"sum", RefineNorm::Sum},
    {"mean_b", RefineNorm::MeanOverB},
    {"mean_agree", RefineNorm::MeanOverAgreeing}};

inline void parse_dataset(const json& j, DatasetSpec& out) {
    expect_object(j, "dataset");
    reject_unknown(j, "dataset", {"generator", "classes", "per_class", "spread"});
    read_if(j, "generator", "dataset", out.generator);
    if (out.generator != "gauss2d" && out.generator != "patterns8x8")
        throw std::invalid_argument(
            "config: key 'generator' in section 'dataset' has unsupported "
            "value '" + out.generator + "'");
    read_if(j, "classes", "dataset", out.classes);
    read_if(j, "per_class", "dataset", out.per_class);
    read_if(j, "spread", "dataset", out.spread);
}

inline void parse_model(const json& j, ModelSpec& out) {
    expect_object(j, "model");
    reject_unknown(j, "model",
                   {"kind", "input_shape", "classes", "hidden", "channels"});
    require(j, "kind", "model");
    out.kind = parse_enum(j, "kind", "model", kind_names, out.kind);
    read_if(j, "input_shape", "model", out.input_shape);
    read_if(j, "classes", "model", out.num_classes);
    read_if(j, "hidden", "model", out.hidden);
    read_if(j, "channels", "model", out.channels);
}

inline void parse_pretrain(const json& j, PretrainConfig& out) {
    expect_object(j, "pretrain");
    reject_unknown(j, "pretrain", {"epochs", "lr", "momentum", "batch_size"});
    read_if(j, "epochs", "pretrain", out.epochs);
    read_if(j, "lr", "pretrain", out.lr);
    read_if(j, "momentum", "pretrain", out.momentum);
    read_if(j, "batch_size", "pretrain", out.batch_size);
}

inline void parse_synth(const json& j, SynthConfig& out) {
    expect_object(j, "synth");
    reject_unknown(j, "synth",
                   {"batch_size", "num_batches", "iterations", "lr", "beta1",
                    "beta2", "adam_eps", "mode", "fixed_coeffs", "feature_stat",
                    "threads"});
    read_if(j, "batch_size", "synth", out.batch_size);
    read_if(j, "num_batches", "synth", out.num_batches);
    read_if(j, "iterations", "synth", out.iterations);
    read_if(j, "lr", "synth", out.lr);
    read_if(j, "beta1", "synth", out.beta1);
    read_if(j, "beta2", "synth", out.beta2);
    read_if(j, "adam_eps", "synth", out.adam_eps);
    out.mode = parse_enum(j, "mode", "synth", mode_names, out.mode);
    if (j.contains("fixed_coeffs")) {
        auto v = typed<std::vector<double>>(j, "fixed_coeffs", "synth");
        if (v.size() != 3)
            throw std::invalid_argument(
                "config: key 'fixed_coeffs' in section 'synth' needs exactly "
                "3 values");
        out.fixed_coeffs = {v[0], v[1], v[2]};
    }
    out.feature_stat =
        parse_enum(j, "feature_stat", "synth", stat_names, out.feature_stat);
    read_if(j, "threads", "synth", out.threads);
}

// epsilon accepts a number or the literal token "inf"
inline double parse_epsilon(const json& j) {
    const auto& e = j.at("epsilon");
    if (e.is_string()) {
        if (e.get<std::string>() == "inf")
            return std::numeric_limits<double>::infinity();
        throw std::invalid_argument(
            "config: key 'epsilon' in section 'attack' must be a number or "
            "\"inf\"");
    }
    return typed<double>(j, "epsilon", "attack");
}

inline void parse_attack(const json& j, AttackConfig& out) {
    expect_object(j, "attack");
    reject_unknown(j, "attack",
                   {"norm", "epsilon", "step", "iterations", "random_start",
                    "loss", "range"});
    out.norm = parse_enum(j, "norm", "attack", norm_names, out.norm);
    if (j.contains("epsilon")) out.epsilon = parse_epsilon(j);
    read_if(j, "step", "attack", out.step);
    read_if(j, "iterations", "attack", out.iterations);
    read_if(j, "random_start", "attack", out.random_start);
    out.loss = parse_enum(j, "loss", "attack", aloss_names, out.loss);
    if (j.contains("range")) {
        auto v = typed<std::vector<double>>(j, "range", "attack");
        if (v.size() != 2)
            throw std::invalid_argument(
                "config: key 'range' in section 'attack' needs exactly 2 "
                "values");
        out.range = ValueRange{v[0], v[1]};
    }
}

inline void parse_train(const json& j, TrainConfig& out) {
    expect_object(j, "train");
    reject_unknown(j, "train",
                   {"lambda1", "lambda2", "agg_batches", "tau", "normalization",
                    "grad_refine", "scale_lr_with_b", "lr", "momentum",
                    "epochs", "batch_size", "loss", "trades_beta",
                    "detach_reference"});
    read_if(j, "lambda1", "train", out.lambda1);
    read_if(j, "lambda2", "train", out.lambda2);
    read_if(j, "agg_batches", "train", out.agg_batches);
    read_if(j, "tau", "train", out.tau);
    out.normalization = parse_enum(j, "normalization", "train", rnorm_names,
                                   out.normalization);
    read_if(j, "grad_refine", "train", out.grad_refine);
    read_if(j, "scale_lr_with_b", "train", out.scale_lr_with_b);
    read_if(j, "lr", "train", out.lr);
    read_if(j, "momentum", "train", out.momentum);
    read_if(j, "epochs", "train", out.epochs);
    read_if(j, "batch_size", "train", out.batch_size);
    out.loss = parse_enum(j, "loss", "train", tloss_names, out.loss);
    read_if(j, "trades_beta", "train", out.trades_beta);
    read_if(j, "detach_reference", "train", out.detach_reference);
}

} // namespace detail

// Strict parse; absent sections and keys keep their documented defaults.
inline RunConfig parse_config(const nlohmann::json& j) {
    detail::expect_object(j, "<root>");
    detail::reject_unknown(j, "<root>",
                           {"seed", "threads", "out_dir", "teacher_path",
                            "student_path", "dataset_path", "dataset", "model",
                            "pretrain", "synth", "train", "attack"});
    RunConfig cfg;
    detail::read_if(j, "seed", "<root>", cfg.seed);
    detail::read_if(j, "threads", "<root>", cfg.threads);
    detail::read_if(j, "out_dir", "<root>", cfg.out_dir);
    detail::read_if(j, "teacher_path", "<root>", cfg.teacher_path);
    detail::read_if(j, "student_path", "<root>", cfg.student_path);
    detail::read_if(j, "dataset_path", "<root>", cfg.dataset_path);
    if (j.contains("dataset")) detail::parse_dataset(j.at("dataset"), cfg.dataset);
    if (j.contains("model")) detail::parse_model(j.at("model"), cfg.model);
    if (j.contains("pretrain"))
        detail::parse_pretrain(j.at("pretrain"), cfg.pretrain);
    if (j.contains("synth")) detail::parse_synth(j.at("synth"), cfg.synth);
    if (j.contains("train")) detail::parse_train(j.at("train"), cfg.train);
    if (j.contains("attack")) detail::parse_attack(j.at("attack"), cfg.attack);
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config: " + path + " is not valid JSON: " +
                                    e.what());
    }
    return parse_config(j);
}

inline nlohmann::json dump_config(const RunConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;
    j["out_dir"] = cfg.out_dir;
    j["teacher_path"] = cfg.teacher_path;
    j["student_path"] = cfg.student_path;
    j["dataset_path"] = cfg.dataset_path;
    j["dataset"] = {{"generator", cfg.dataset.generator},
                    {"classes", cfg.dataset.classes},
                    {"per_class", cfg.dataset.per_class},
                    {"spread", cfg.dataset.spread}};
    j["model"] = {{"kind", detail::enum_name(cfg.model.kind, detail::kind_names)},
                  {"input_shape", cfg.model.input_shape},
                  {"classes", cfg.model.num_classes},
                  {"hidden", cfg.model.hidden},
                  {"channels", cfg.model.channels}};
    j["pretrain"] = {{"epochs", cfg.pretrain.epochs},
                     {"lr", cfg.pretrain.lr},
                     {"momentum", cfg.pretrain.momentum},
                     {"batch_size", cfg.pretrain.batch_size}};
    j["synth"] = {{"batch_size", cfg.synth.batch_size},
                  {"num_batches", cfg.synth.num_batches},
                  {"iterations", cfg.synth.iterations},
                  {"lr", cfg.synth.lr},
                  {"beta1", cfg.synth.beta1},
                  {"beta2", cfg.synth.beta2},
                  {"adam_eps", cfg.synth.adam_eps},
                  {"mode", detail::enum_name(cfg.synth.mode, detail::mode_names)},
                  {"fixed_coeffs", cfg.synth.fixed_coeffs},
                  {"feature_stat", detail::enum_name(cfg.synth.feature_stat,
                                                     detail::stat_names)},
                  {"threads", cfg.synth.threads}};
    j["train"] = {{"lambda1", cfg.train.lambda1},
                  {"lambda2", cfg.train.lambda2},
                  {"agg_batches", cfg.train.agg_batches},
                  {"tau", cfg.train.tau},
                  {"normalization", detail::enum_name(cfg.train.normalization,
                                                      detail::rnorm_names)},
                  {"grad_refine", cfg.train.grad_refine},
                  {"scale_lr_with_b", cfg.train.scale_lr_with_b},
                  {"lr", cfg.train.lr},
                  {"momentum", cfg.train.momentum},
                  {"epochs", cfg.train.epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"loss", detail::enum_name(cfg.train.loss, detail::tloss_names)},
                  {"trades_beta", cfg.train.trades_beta},
                  {"detach_reference", cfg.train.detach_reference}};
    j["attack"] = {{"norm", detail::enum_name(cfg.attack.norm, detail::norm_names)},
                   {"step", cfg.attack.step},
                   {"iterations", cfg.attack.iterations},
                   {"random_start", cfg.attack.random_start},
                   {"loss", detail::enum_name(cfg.attack.loss,
                                              detail::aloss_names)}};
    if (std::isinf(cfg.attack.epsilon))
        j["attack"]["epsilon"] = "inf";
    else
        j["attack"]["epsilon"] = cfg.attack.epsilon;
    if (cfg.attack.range)
        j["attack"]["range"] = {cfg.attack.range->lo, cfg.attack.range->hi};
    return j;
}

// One global seed fans out to per-stage streams by stage-name mixing,
// so any stage can be rerun in isolation.
inline Rng stage_rng(const RunConfig& cfg, std::string_view stage) {
    return Rng(cfg.seed).derive(stage);
}

} // namespace dfshield
