#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <vector>

#include "immunodiff/core/error.hpp"
#include "immunodiff/core/rng.hpp"
#include "immunodiff/diffusion/schedule.hpp"
#include "immunodiff/nd/denoiser.hpp"
#include "immunodiff/nd/graph.hpp"
#include "immunodiff/nd/params.hpp"

namespace immunodiff::diffusion {

using nd::Bound;
using nd::Graph;
using nd::ParamStore;
using nd::Var;

struct DiffusionTrainConfig {
    std::size_t steps = 300;
    std::size_t batch_size = 8;
    std::size_t probe_size = 16;
    nd::AdamConfig adam{};
};

// step_loss[k] is the minibatch loss seen at step k. The probe loss is the
// eps-MSE on a fixed set of (image, t, eps) triples drawn once from the seed,
// measured before the first and after the last update, so the two numbers
// are directly comparable.
struct TrainCurve {
    std::vector<double> step_loss;
    double probe_initial = 0.0;
    double probe_final = 0.0;

    double probe_drop() const { return probe_initial > 0.0 ? 1.0 - probe_final / probe_initial : 0.0; }
};

// Builds the eps prediction for a batch. `idx` names the dataset items in
// the batch so callers can look up per-item conditioning.
template <class T>
using EpsGraphFn = std::function<Var(Graph<T>& g, const Bound<T>& trainable, const std::vector<std::size_t>& idx,
                                     Var x_t, const std::vector<std::size_t>& t)>;

namespace detail {

// images: each [C, H, W]; returns [B, C, H, W] for the chosen indices.
template <class T>
nd::Tensor<T> stack(const std::vector<nd::Tensor<T>>& images, const std::vector<std::size_t>& idx) {
    nd::Shape s{idx.size()};
    for (std::size_t d : images.at(idx.front()).shape()) s.push_back(d);
    nd::Tensor<T> out(s);
    const std::size_t per = images.at(idx.front()).size();
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto& im = images.at(idx[b]);
        require(im.size() == per, "stack: image sizes differ");
        std::copy(im.data(), im.data() + per, out.data() + b * per);
    }
    return out;
}

}  // namespace detail

template <class T>
struct ProbeSet {
    std::vector<std::size_t> idx;
    std::vector<std::size_t> t;
    nd::Tensor<T> eps;  // [P, C, H, W]
};

template <class T>
ProbeSet<T> make_probe(const std::vector<nd::Tensor<T>>& images, const NoiseSchedule& s, std::size_t size,
                       std::uint64_t seed) {
    ProbeSet<T> p;
    const std::size_t n = std::min(size, images.size());
    Rng rng(derive_seed(seed, 0x9B));
    for (std::size_t k = 0; k < n; ++k) {
        p.idx.push_back(k * images.size() / n);
        // Timesteps evenly cover [0, T) so the probe weighs every noise level.
        p.t.push_back((2 * k + 1) * s.T / (2 * n));
    }
    nd::Shape shape{n};
    for (std::size_t d : images.front().shape()) shape.push_back(d);
    p.eps = standard_normal<T>(shape, rng);
    return p;
}

template <class T>
double probe_loss(const std::vector<nd::Tensor<T>>& images, const NoiseSchedule& s, const ProbeSet<T>& p,
                  const ParamStore<T>& trainable, const EpsGraphFn<T>& fn, std::size_t chunk = 8) {
    double total = 0.0;
    const std::size_t per = p.eps.size() / p.idx.size();
    for (std::size_t b0 = 0; b0 < p.idx.size(); b0 += chunk) {
        const std::size_t b1 = std::min(p.idx.size(), b0 + chunk);
        std::vector<std::size_t> idx(p.idx.begin() + b0, p.idx.begin() + b1);
        std::vector<std::size_t> t(p.t.begin() + b0, p.t.begin() + b1);
        nd::Shape es = p.eps.shape();
        es[0] = b1 - b0;
        nd::Tensor<T> eps(es);
        std::copy(p.eps.data() + b0 * per, p.eps.data() + b1 * per, eps.data());
        const auto x_t = forward_diffuse_batch(detail::stack(images, idx), t, eps, s);
        Graph<T> g;
        auto bound = nd::bind(g, trainable, false);
        Var pred = fn(g, bound, idx, g.constant(x_t), t);
        total += ddpm_loss(eps, g.value(pred)) * static_cast<double>(b1 - b0);
    }
    return total / static_cast<double>(p.idx.size());
}

// Generic eps-prediction training loop over `images`: each step draws a
// batch of indices, timesteps and noise from one seeded stream, then takes
// one Adam step on `trainable`.
template <class T>
TrainCurve train_eps(ParamStore<T>& trainable, const std::vector<nd::Tensor<T>>& images, const NoiseSchedule& s,
                     const EpsGraphFn<T>& fn, const DiffusionTrainConfig& tc, std::uint64_t seed) {
    require_config(!images.empty(), "train_eps: no training images");
    require_config(tc.batch_size >= 1, "train_eps: batch_size must be >= 1");
    const ProbeSet<T> probe = make_probe(images, s, tc.probe_size, seed);
    TrainCurve curve;
    curve.probe_initial = probe_loss(images, s, probe, trainable, fn);
    Rng rng(derive_seed(seed, 0x9A));
    nd::AdamState<T> state;
    for (std::size_t step = 0; step < tc.steps; ++step) {
        std::vector<std::size_t> idx(tc.batch_size), t(tc.batch_size);
        for (auto& i : idx) i = static_cast<std::size_t>(rng.below(images.size()));
        for (auto& v : t) v = static_cast<std::size_t>(rng.below(s.T));
        nd::Shape es{tc.batch_size};
        for (std::size_t d : images.front().shape()) es.push_back(d);
        const auto eps = standard_normal<T>(es, rng);
        const auto x_t = forward_diffuse_batch(detail::stack(images, idx), t, eps, s);
        Graph<T> g;
        auto bound = nd::bind(g, trainable, true);
        Var pred = fn(g, bound, idx, g.constant(x_t), t);
        Var loss = g.mse(pred, g.constant(eps));
        curve.step_loss.push_back(static_cast<double>(g.value(loss).item()));
        nd::adam_step(trainable, g.backward(loss), state, tc.adam);
    }
    curve.probe_final = probe_loss(images, s, probe, trainable, fn);
    return curve;
}

// Unconditional DDPM pretraining of a denoiser.
template <class T>
TrainCurve train_ddpm(nd::Denoiser<T>& d, const std::vector<nd::Tensor<T>>& images, const NoiseSchedule& s,
                      const DiffusionTrainConfig& tc, std::uint64_t seed) {
    require_config(s.T == d.config.timesteps, "train_ddpm: schedule T differs from denoiser timesteps");
    const nd::DenoiserConfig cfg = d.config;
    EpsGraphFn<T> fn = [cfg](Graph<T>& g, const Bound<T>& p, const std::vector<std::size_t>&, Var x,
                             const std::vector<std::size_t>& t) { return nd::denoise_graph(g, cfg, p, x, t).eps; };
    return train_eps(d.params, images, s, fn, tc, seed);
}

}  // namespace immunodiff::diffusion
