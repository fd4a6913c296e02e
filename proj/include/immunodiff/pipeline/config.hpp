#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "immunodiff/cbi/adapter.hpp"
#include "immunodiff/core/error.hpp"
#include "immunodiff/core/tensor_io.hpp"
#include "immunodiff/data/phantom.hpp"
#include "immunodiff/diffusion/trainer.hpp"
#include "immunodiff/heads/prediction.hpp"
#include "immunodiff/nd/denoiser.hpp"
#include "immunodiff/vl/contrastive.hpp"

namespace immunodiff::pipeline {

using json = nlohmann::json;

struct StageConfig {
    std::size_t steps = 300;
    std::size_t batch_size = 8;
    double lr = 2.5e-5;
    std::size_t probe_size = 16;
};

struct RunConfig {
    std::uint64_t seed = 1;

    // data
    std::size_t n_cases = 64;
    std::size_t height = 32;
    std::size_t width = 32;
    double responder_fraction = 19.0 / 74.0;
    std::size_t n_folds = 5;
    double noise_sigma = 0.02;
    std::size_t holdout_fold = 0;

    // schedule
    std::size_t T = 100;
    std::string schedule_kind = "linear";

    // denoiser
    std::size_t base_channels = 8;
    std::size_t depth = 3;
    std::size_t time_embed_dim = 32;

    // vl
    vl::VLConfig vl{};
    std::size_t vl_epochs = 30;
    std::size_t vl_batch_size = 16;
    double vl_lr = 2.5e-5;

    StageConfig ddpm{};
    StageConfig control{};
    StageConfig cbi{};
    cbi::AdapterConfig adapter{};

    // heads
    std::size_t head_epochs = 400;
    double head_lr = 0.05;
    double head_l2 = 1e-2;
    std::optional<std::size_t> t_feat;  // unset: T / 4

    // evaluation
    std::size_t n_generate = 24;
    std::size_t ssim_window = 7;
    std::optional<double> mmd_bandwidth;

    // paths, relative to the run directory
    std::string dataset_dir = "data";
    std::string checkpoint_dir = "checkpoints";
    std::string report_path = "report.txt";

    std::size_t feature_timestep() const { return t_feat ? *t_feat : T / 4; }

    nd::DenoiserConfig denoiser() const {
        nd::DenoiserConfig d;
        d.in_channels = 1;
        d.height = height;
        d.width = width;
        d.base_channels = base_channels;
        d.depth = depth;
        d.time_embed_dim = time_embed_dim;
        d.cond_dim = 0;  // conditioning reaches the locked base only through the control branch
        d.timesteps = T;
        return d;
    }

    data::PhantomConfig phantom() const {
        data::PhantomConfig p;
        p.height = height;
        p.width = width;
        p.responder_fraction = responder_fraction;
        p.n_folds = n_folds;
        p.noise_sigma = noise_sigma;
        return p;
    }

    vl::VLConfig vl_config() const {
        vl::VLConfig v = vl;
        v.height = height;
        v.width = width;
        return v;
    }

    static diffusion::DiffusionTrainConfig train_config(const StageConfig& s) {
        diffusion::DiffusionTrainConfig t;
        t.steps = s.steps;
        t.batch_size = s.batch_size;
        t.probe_size = s.probe_size;
        t.adam.lr = s.lr;
        return t;
    }

    heads::HeadTrainConfig head_config() const { return {head_epochs, head_lr, head_l2}; }

    void validate() const {
        require_config(n_cases >= 5 && n_cases >= n_folds, "config: data.n_cases must be >= max(5, n_folds)");
        require_config(responder_fraction > 0.0 && responder_fraction < 1.0,
                       "config: data.responder_fraction must lie in (0, 1)");
        require_config(n_folds >= 2, "config: data.n_folds must be >= 2");
        require_config(holdout_fold < n_folds, "config: data.holdout_fold must be < n_folds");
        require_config(T >= 1, "config: schedule.T must be >= 1");
        diffusion::parse_schedule_kind(schedule_kind);
        phantom().validate();
        denoiser().validate();
        vl_config().validate();
        adapter.validate();
        require_config(feature_timestep() < T, "config: heads.t_feat must be < schedule.T");
        require_config(vl_batch_size >= 2, "config: vl.batch_size must be >= 2");
        for (const auto* s : {&ddpm, &control, &cbi})
            require_config(s->batch_size >= 1 && s->lr > 0.0, "config: stage batch_size and lr must be positive");
        require_config(vl_lr > 0.0 && head_lr > 0.0, "config: learning rates must be positive");
        require_config(ssim_window % 2 == 1 && ssim_window <= std::min(height, width),
                       "config: eval.ssim_window must be odd and fit the image");
        require_config(adapter.image_grid <= std::min(height, width) && height % adapter.image_grid == 0 &&
                           width % adapter.image_grid == 0,
                       "config: image size must be divisible by cbi.image_grid");
    }
};

namespace detail {

inline json stage_json(const StageConfig& s) {
    return {{"steps", s.steps}, {"batch_size", s.batch_size}, {"lr", s.lr}, {"probe_size", s.probe_size}};
}

inline void read_stage(const json& j, StageConfig& s) {
    s.steps = j.at("steps").get<std::size_t>();
    s.batch_size = j.at("batch_size").get<std::size_t>();
    s.lr = j.at("lr").get<double>();
    s.probe_size = j.at("probe_size").get<std::size_t>();
}

// Every key of `user` must exist in `schema`; objects are checked recursively.
inline void check_keys(const json& user, const json& schema, const std::string& path) {
    if (!user.is_object()) return;
    if (!schema.is_object()) throw ConfigError("config: '" + path + "' must not be an object");
    for (const auto& [k, v] : user.items()) {
        const std::string p = path.empty() ? k : path + "." + k;
        if (!schema.contains(k)) throw ConfigError("config: unknown key '" + p + "'");
        check_keys(v, schema.at(k), p);
    }
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
    const auto& a = c.adapter;
    json j;
    j["seed"] = c.seed;
    j["data"] = {{"n_cases", c.n_cases},   {"height", c.height},           {"width", c.width},
                 {"responder_fraction", c.responder_fraction},              {"n_folds", c.n_folds},
                 {"noise_sigma", c.noise_sigma}, {"holdout_fold", c.holdout_fold}};
    j["schedule"] = {{"T", c.T}, {"kind", c.schedule_kind}};
    j["model"] = {{"base_channels", c.base_channels}, {"depth", c.depth}, {"time_embed_dim", c.time_embed_dim}};
    j["vl"] = {{"blocks", c.vl.blocks},
               {"d", c.vl.d},
               {"proj_dim", c.vl.proj_dim},
               {"tau", c.vl.tau},
               {"coord_channels", c.vl.coord_channels},
               {"symmetric", c.vl.symmetric},
               {"epochs", c.vl_epochs},
               {"batch_size", c.vl_batch_size},
               {"lr", c.vl_lr}};
    j["ddpm"] = detail::stage_json(c.ddpm);
    j["control"] = detail::stage_json(c.control);
    json cb = detail::stage_json(c.cbi);
    cb["d_tok"] = a.d_tok;
    cb["rope_base"] = a.rope_base;
    cb["lambda"] = a.lambda;
    cb["image_channels"] = a.image_channels;
    cb["image_grid"] = a.image_grid;
    cb["literal_product"] = a.literal_product;
    cb["image_bypass"] = a.image_bypass;
    cb["rope_on_values"] = a.rope_on_values;
    j["cbi"] = cb;
    j["heads"] = {{"epochs", c.head_epochs}, {"lr", c.head_lr}, {"l2", c.head_l2}};
    j["heads"]["t_feat"] = c.t_feat ? json(*c.t_feat) : json(nullptr);
    j["eval"] = {{"n_generate", c.n_generate}, {"ssim_window", c.ssim_window}};
    j["eval"]["mmd_bandwidth"] = c.mmd_bandwidth ? json(*c.mmd_bandwidth) : json(nullptr);
    j["paths"] = {{"dataset", c.dataset_dir}, {"checkpoints", c.checkpoint_dir}, {"report", c.report_path}};
    return j;
}

// Defaults overlaid with `user`; unknown keys and wrong types are rejected.
inline RunConfig config_from_json(const json& user) {
    if (!user.is_object()) throw ConfigError("config: top level must be a JSON object");
    json schema = to_json(RunConfig{});
    detail::check_keys(user, schema, "");
    json j = schema;
    j.merge_patch(user);
    RunConfig c;
    try {
        c.seed = j.at("seed").get<std::uint64_t>();
        const auto& d = j.at("data");
        c.n_cases = d.at("n_cases").get<std::size_t>();
        c.height = d.at("height").get<std::size_t>();
        c.width = d.at("width").get<std::size_t>();
        c.responder_fraction = d.at("responder_fraction").get<double>();
        c.n_folds = d.at("n_folds").get<std::size_t>();
        c.noise_sigma = d.at("noise_sigma").get<double>();
        c.holdout_fold = d.at("holdout_fold").get<std::size_t>();
        c.T = j.at("schedule").at("T").get<std::size_t>();
        c.schedule_kind = j.at("schedule").at("kind").get<std::string>();
        const auto& m = j.at("model");
        c.base_channels = m.at("base_channels").get<std::size_t>();
        c.depth = m.at("depth").get<std::size_t>();
        c.time_embed_dim = m.at("time_embed_dim").get<std::size_t>();
        const auto& v = j.at("vl");
        c.vl.blocks = v.at("blocks").get<std::size_t>();
        c.vl.d = v.at("d").get<std::size_t>();
        c.vl.proj_dim = v.at("proj_dim").get<std::size_t>();
        c.vl.tau = v.at("tau").get<double>();
        c.vl.coord_channels = v.at("coord_channels").get<bool>();
        c.vl.symmetric = v.at("symmetric").get<bool>();
        c.vl_epochs = v.at("epochs").get<std::size_t>();
        c.vl_batch_size = v.at("batch_size").get<std::size_t>();
        c.vl_lr = v.at("lr").get<double>();
        detail::read_stage(j.at("ddpm"), c.ddpm);
        detail::read_stage(j.at("control"), c.control);
        const auto& cb = j.at("cbi");
        detail::read_stage(cb, c.cbi);
        c.adapter.d_tok = cb.at("d_tok").get<std::size_t>();
        c.adapter.rope_base = cb.at("rope_base").get<double>();
        c.adapter.lambda = cb.at("lambda").get<double>();
        c.adapter.image_channels = cb.at("image_channels").get<std::size_t>();
        c.adapter.image_grid = cb.at("image_grid").get<std::size_t>();
        c.adapter.literal_product = cb.at("literal_product").get<bool>();
        c.adapter.image_bypass = cb.at("image_bypass").get<bool>();
        c.adapter.rope_on_values = cb.at("rope_on_values").get<bool>();
        const auto& h = j.at("heads");
        c.head_epochs = h.at("epochs").get<std::size_t>();
        c.head_lr = h.at("lr").get<double>();
        c.head_l2 = h.at("l2").get<double>();
        if (h.contains("t_feat") && !h.at("t_feat").is_null()) c.t_feat = h.at("t_feat").get<std::size_t>();
        const auto& e = j.at("eval");
        c.n_generate = e.at("n_generate").get<std::size_t>();
        c.ssim_window = e.at("ssim_window").get<std::size_t>();
        if (e.contains("mmd_bandwidth") && !e.at("mmd_bandwidth").is_null()) c.mmd_bandwidth = e.at("mmd_bandwidth").get<double>();
        const auto& p = j.at("paths");
        c.dataset_dir = p.at("dataset").get<std::string>();
        c.checkpoint_dir = p.at("checkpoints").get<std::string>();
        c.report_path = p.at("report").get<std::string>();
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("config: ") + ex.what());
    }
    c.validate();
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& ex) {
        throw ConfigError("config " + path.string() + ": " + ex.what());
    }
    return config_from_json(j);
}

// Compact canonical form (object keys sorted) used for hashing and echoes.
inline std::string canonical(const RunConfig& c) { return to_json(c).dump(); }

inline std::string config_hash(const RunConfig& c) {
    const std::string s = canonical(c);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace immunodiff::pipeline
