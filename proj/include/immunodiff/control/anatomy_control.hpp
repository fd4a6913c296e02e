#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "immunodiff/core/error.hpp"
#include "immunodiff/core/rng.hpp"
#include "immunodiff/data/phantom.hpp"
#include "immunodiff/diffusion/schedule.hpp"
#include "immunodiff/diffusion/trainer.hpp"
#include "immunodiff/nd/denoiser.hpp"
#include "immunodiff/vl/contrastive.hpp"

namespace immunodiff::control {

using nd::Bound;
using nd::Graph;
using nd::ParamStore;
using nd::Tensor;
using nd::Var;

// Locked base denoiser plus a trainable branch.
//
// branch holds a copy of the base encoder parameters (time MLP, in_conv,
// enc*, mid; conditioning weights excluded) and
//   control_proj.{weight,bias}   [c0, ctrl_dim], [c0]   added after the branch in_conv
//   zero{i}.{weight,bias}        [ch(i), ch(i), 1, 1]   branch skip i -> base skip i
//   zero_mid.{weight,bias}       [ch(D-1), ch(D-1), 1, 1]
// The zero* layers start at exactly zero, so the controlled model equals the
// base until training moves them.
template <class T>
struct ControlledDenoiser {
    nd::Denoiser<T> base;
    ParamStore<T> branch;
    std::size_t ctrl_dim = 0;
};

inline bool is_encoder_param(const std::string& name) {
    if (name.find(".cond.") != std::string::npos) return false;
    return name.rfind("time.", 0) == 0 || name.rfind("in_conv.", 0) == 0 || name.rfind("enc", 0) == 0 ||
           name.rfind("mid.", 0) == 0;
}

template <class T>
void set_control_proj(ControlledDenoiser<T>& cd, std::size_t ctrl_dim, std::uint64_t seed) {
    require_config(ctrl_dim >= 1, "control: ctrl_dim must be >= 1");
    Rng rng(derive_seed(seed, 0xC1));
    const std::size_t c0 = cd.base.config.channels(0);
    cd.branch["control_proj.weight"] = nd::he_uniform<T>({c0, ctrl_dim}, ctrl_dim, rng);
    cd.branch["control_proj.bias"] = Tensor<T>({c0});
    cd.ctrl_dim = ctrl_dim;
}

template <class T>
ControlledDenoiser<T> make_controlled(const nd::Denoiser<T>& base, std::size_t ctrl_dim, std::uint64_t seed) {
    ControlledDenoiser<T> cd{base, {}, 0};
    for (const auto& [name, t] : base.params)
        if (is_encoder_param(name)) cd.branch[name] = t;
    const auto& c = base.config;
    for (std::size_t i = 0; i < c.depth; ++i) {
        const std::size_t ch = c.channels(i);
        cd.branch["zero" + std::to_string(i) + ".weight"] = Tensor<T>({ch, ch, 1, 1});
        cd.branch["zero" + std::to_string(i) + ".bias"] = Tensor<T>({ch});
    }
    const std::size_t cm = c.channels(c.depth - 1);
    cd.branch["zero_mid.weight"] = Tensor<T>({cm, cm, 1, 1});
    cd.branch["zero_mid.bias"] = Tensor<T>({cm});
    set_control_proj(cd, ctrl_dim, seed);
    return cd;
}

// Full controlled forward pass. ctrl: [N, ctrl_dim].
template <class T>
nd::DenoiseVars controlled_graph(Graph<T>& g, const ControlledDenoiser<T>& cd, const Bound<T>& base,
                                 const Bound<T>& branch, Var x, const std::vector<std::size_t>& t, Var ctrl) {
    const auto& cv = g.value(ctrl);
    require(cv.rank() == 2 && cv.dim(1) == cd.ctrl_dim,
            "controlled_denoise: control shape " + nd::shape_str(cv.shape()) + " does not match [N, " +
                std::to_string(cd.ctrl_dim) + "]");
    require(cv.dim(0) == g.value(x).dim(0), "controlled_denoise: control batch differs from image batch");
    const auto& c = cd.base.config;
    Var inject = g.linear(ctrl, branch.at("control_proj.weight"), branch.at("control_proj.bias"));
    nd::EncoderTaps taps = nd::encoder_graph(g, c, branch, x, t, std::nullopt, inject);
    nd::ControlResiduals res;
    for (std::size_t i = 0; i < c.depth; ++i) {
        const std::string z = "zero" + std::to_string(i);
        res.skips.push_back(g.conv2d(taps.skips[i], branch.at(z + ".weight"), branch.at(z + ".bias")));
    }
    res.mid = g.conv2d(taps.mid, branch.at("zero_mid.weight"), branch.at("zero_mid.bias"));
    return nd::denoise_graph(g, c, base, x, t, std::nullopt, &res);
}

template <class T>
nd::DenoiseResult<T> controlled_denoise(const ControlledDenoiser<T>& cd, const Tensor<T>& x_t,
                                        const std::vector<std::size_t>& t, const Tensor<T>& ctrl) {
    Graph<T> g;
    auto base = nd::bind(g, cd.base.params, false);
    auto branch = nd::bind(g, cd.branch, false);
    auto out = controlled_graph(g, cd, base, branch, g.constant(x_t), t, g.constant(ctrl));
    nd::DenoiseResult<T> r{g.value(out.eps), {}};
    for (Var u : out.upblocks) r.upblocks.push_back(g.value(u));
    return r;
}

// c_a = project(g_v, encode(f_v, vessel)) ++ project(g_l, encode(f_l, lobe))
template <class T>
std::vector<T> make_anatomy_control(const vl::VLEncoders<T>& e, const data::Mask& vessel, const data::Mask& lobe) {
    std::vector<T> c = vl::project(e, "v", vl::encode_mask(e, "v", vessel));
    const std::vector<T> zl = vl::project(e, "l", vl::encode_mask(e, "l", lobe));
    c.insert(c.end(), zl.begin(), zl.end());
    return c;
}

// Rows of a [N, k] tensor, gathered by index.
template <class T>
Tensor<T> gather_rows(const std::vector<std::vector<T>>& rows, const std::vector<std::size_t>& idx) {
    const std::size_t k = rows.at(idx.front()).size();
    Tensor<T> out({idx.size(), k});
    for (std::size_t b = 0; b < idx.size(); ++b) {
        require(rows.at(idx[b]).size() == k, "gather_rows: ragged rows");
        std::copy(rows[idx[b]].begin(), rows[idx[b]].end(), out.data() + b * k);
    }
    return out;
}

// Trains the branch on eps-prediction with per-image anatomy controls.
// controls[i] belongs to images[i]. Base parameters enter the tape as
// constants and are never handed to the optimizer.
template <class T>
diffusion::TrainCurve train_stage1(ControlledDenoiser<T>& cd, const diffusion::NoiseSchedule& s,
                                   const std::vector<Tensor<T>>& images, const std::vector<std::vector<T>>& controls,
                                   const diffusion::DiffusionTrainConfig& tc, std::uint64_t seed) {
    require_config(!cd.base.params.empty(), "train_stage1: base denoiser missing (train-ddpm checkpoint required)");
    require_config(images.size() == controls.size(), "train_stage1: one control per image required");
    require_config(s.T == cd.base.config.timesteps, "train_stage1: schedule T differs from denoiser timesteps");
    const ControlledDenoiser<T>* model = &cd;
    diffusion::EpsGraphFn<T> fn = [model, &controls](Graph<T>& g, const Bound<T>& branch,
                                                     const std::vector<std::size_t>& idx, Var x,
                                                     const std::vector<std::size_t>& t) {
        auto base = nd::bind(g, model->base.params, false);
        return controlled_graph(g, *model, base, branch, x, t, g.constant(gather_rows(controls, idx))).eps;
    };
    const std::uint64_t before = nd::hash_store(cd.base.params);
    auto curve = diffusion::train_eps(cd.branch, images, s, fn, tc, seed);
    require(nd::hash_store(cd.base.params) == before, "train_stage1: locked base parameters changed");
    return curve;
}

}  // namespace immunodiff::control
