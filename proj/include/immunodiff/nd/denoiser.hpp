#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "immunodiff/core/error.hpp"
#include "immunodiff/core/rng.hpp"
#include "immunodiff/nd/graph.hpp"
#include "immunodiff/nd/params.hpp"

namespace immunodiff::nd {

// Small image-space U-Net used as the noise predictor.
//
// Level i works at resolution (H, W) / 2^i with ch(i) = base_channels * 2^i
// channels. With E = time_embed_dim, K = cond_dim, c0 = ch(0), D = depth:
//
//   name                 shape                          note
//   time.fc1.{weight,bias}   [E, E], [E]                sinusoid -> SiLU MLP
//   time.fc2.{weight,bias}   [E, E], [E]
//   in_conv.{weight,bias}    [c0, in, 3, 3], [c0]
//   enc{i}.conv.*            [ch(i), cin(i), 3, 3]      cin(0) = c0, cin(i) = ch(i-1)
//   enc{i}.temb.*            [ch(i), E], [ch(i)]
//   enc{i}.cond.weight       [ch(i), K]                 no bias; absent when K == 0
//   mid.conv/temb/cond       same pattern, ch(D-1) -> ch(D-1)
//   dec{j}.conv.*            [ch(j), prev(j) + ch(j), 3, 3]  prev = ch(D-1) for j = D-1, else ch(j+1)
//   dec{j}.temb.*, dec{j}.cond.weight
//   out_conv.{weight,bias}   [in, c0, 3, 3], [in]
//
// Each block computes SiLU(conv(h) + temb_proj + cond_proj). Encoder level i
// keeps its output as skip i and average-pools (except the last level).
// Decoder block j concatenates its input with skip j; its output is the
// "upblock" feature tap j and is upsampled before block j - 1.
struct DenoiserConfig {
    std::size_t in_channels = 1;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t base_channels = 8;
    std::size_t depth = 3;
    std::size_t time_embed_dim = 32;
    std::size_t cond_dim = 64;
    std::size_t timesteps = 100;

    std::size_t channels(std::size_t level) const { return base_channels << level; }

    void validate() const {
        require_config(in_channels >= 1, "denoiser: in_channels must be >= 1");
        require_config(height >= 1 && width >= 1, "denoiser: image size must be positive");
        require_config(depth >= 2, "denoiser: depth must be >= 2, got " + std::to_string(depth));
        require_config(base_channels >= 4, "denoiser: base_channels must be >= 4, got " + std::to_string(base_channels));
        require_config(time_embed_dim >= 2 && time_embed_dim % 2 == 0, "denoiser: time_embed_dim must be even and >= 2");
        require_config(timesteps >= 1, "denoiser: timesteps must be >= 1");
        require_config(depth < 16, "denoiser: depth too large");
        const std::size_t f = std::size_t{1} << (depth - 1);
        require_config(height % f == 0 && width % f == 0,
                       "denoiser: image size " + std::to_string(height) + "x" + std::to_string(width) +
                           " is not divisible by 2^(depth-1) = " + std::to_string(f));
    }

    Shape image_shape(std::size_t batch) const { return {batch, in_channels, height, width}; }

    // Length of the concatenated pooled upblock features.
    std::size_t feature_dim() const {
        std::size_t n = 0;
        for (std::size_t j = 0; j < depth; ++j) n += channels(j);
        return n;
    }
};

template <class T>
struct Denoiser {
    DenoiserConfig config;
    ParamStore<T> params;
};

namespace detail {

template <class T>
void add_conv(ParamStore<T>& p, const std::string& name, std::size_t cout, std::size_t cin, std::size_t k, Rng& rng) {
    p[name + ".weight"] = he_uniform<T>({cout, cin, k, k}, cin * k * k, rng);
    p[name + ".bias"] = Tensor<T>({cout});
}

template <class T>
void add_linear(ParamStore<T>& p, const std::string& name, std::size_t out, std::size_t in, Rng& rng,
                bool bias = true) {
    p[name + ".weight"] = he_uniform<T>({out, in}, in, rng);
    if (bias) p[name + ".bias"] = Tensor<T>({out});
}

template <class T>
void add_block(ParamStore<T>& p, const DenoiserConfig& c, const std::string& name, std::size_t cout, std::size_t cin,
               Rng& rng) {
    add_conv(p, name + ".conv", cout, cin, 3, rng);
    add_linear(p, name + ".temb", cout, c.time_embed_dim, rng);
    if (c.cond_dim > 0) add_linear(p, name + ".cond", cout, c.cond_dim, rng, false);
}

}  // namespace detail

// Parameters of the time MLP, input conv, encoder levels and middle block.
// The control branch is a trainable copy of exactly this subset.
template <class T>
void init_encoder_params(ParamStore<T>& p, const DenoiserConfig& c, Rng& rng) {
    const std::size_t e = c.time_embed_dim;
    detail::add_linear(p, "time.fc1", e, e, rng);
    detail::add_linear(p, "time.fc2", e, e, rng);
    detail::add_conv(p, "in_conv", c.channels(0), c.in_channels, 3, rng);
    for (std::size_t i = 0; i < c.depth; ++i)
        detail::add_block(p, c, "enc" + std::to_string(i), c.channels(i), i == 0 ? c.channels(0) : c.channels(i - 1),
                          rng);
    detail::add_block(p, c, "mid", c.channels(c.depth - 1), c.channels(c.depth - 1), rng);
}

template <class T>
Denoiser<T> init_denoiser(const DenoiserConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(derive_seed(seed, 0xD0));
    Denoiser<T> d{config, {}};
    init_encoder_params(d.params, config, rng);
    for (std::size_t jj = config.depth; jj-- > 0;) {
        const std::size_t prev = jj == config.depth - 1 ? config.channels(config.depth - 1) : config.channels(jj + 1);
        detail::add_block(d.params, config, "dec" + std::to_string(jj), config.channels(jj), prev + config.channels(jj),
                          rng);
    }
    detail::add_conv(d.params, "out_conv", config.in_channels, config.channels(0), 3, rng);
    return d;
}

// Sinusoidal timestep embedding, [N, dim]: sin(t w_k) then cos(t w_k),
// w_k = 10000^(-k / (dim/2)).
template <class T>
Tensor<T> timestep_embedding(const std::vector<double>& t, std::size_t dim) {
    Tensor<T> out({t.size(), dim});
    const std::size_t half = dim / 2;
    for (std::size_t n = 0; n < t.size(); ++n)
        for (std::size_t k = 0; k < half; ++k) {
            const double w = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
            out[n * dim + k] = static_cast<T>(std::sin(t[n] * w));
            out[n * dim + half + k] = static_cast<T>(std::cos(t[n] * w));
        }
    return out;
}

struct EncoderTaps {
    std::vector<Var> skips;  // one per level, finest first
    Var mid;
    Var temb_act;  // SiLU(time MLP output), [N, E]
};

namespace detail {

template <class T>
Var block(Graph<T>& g, const Bound<T>& p, const std::string& name, Var h, Var temb_act, std::optional<Var> cond) {
    Var y = g.conv2d(h, p.at(name + ".conv.weight"), p.at(name + ".conv.bias"));
    Var proj = g.linear(temb_act, p.at(name + ".temb.weight"), p.at(name + ".temb.bias"));
    if (cond) proj = g.add(proj, g.linear(*cond, p.at(name + ".cond.weight")));
    return g.silu(g.add_channel_bias(y, proj));
}

}  // namespace detail

template <class T>
void check_timesteps(const DenoiserConfig& c, const std::vector<std::size_t>& t, std::size_t batch) {
    require(t.size() == batch, "denoise: expected " + std::to_string(batch) + " timesteps, got " + std::to_string(t.size()));
    for (std::size_t s : t)
        require(s < c.timesteps, "denoise: timestep " + std::to_string(s) + " outside [0, " +
                                     std::to_string(c.timesteps) + ")");
}

// Encoder half on the tape. `input_add` ([N, c0]) is added after the input
// convolution; the control branch uses it to inject its control vector.
template <class T>
EncoderTaps encoder_graph(Graph<T>& g, const DenoiserConfig& c, const Bound<T>& p, Var x,
                          const std::vector<std::size_t>& t, std::optional<Var> cond, std::optional<Var> input_add) {
    const auto& xv = g.value(x);
    require(xv.rank() == 4 && xv.shape() == c.image_shape(xv.dim(0)),
            "denoise: input shape " + shape_str(xv.shape()) + " does not match configured " +
                shape_str(c.image_shape(xv.rank() == 4 ? xv.dim(0) : 1)));
    check_timesteps<T>(c, t, xv.dim(0));
    if (cond) {
        require(c.cond_dim > 0, "denoise: model has no conditioning port");
        const auto& cv = g.value(*cond);
        require(cv.rank() == 2 && cv.dim(0) == xv.dim(0) && cv.dim(1) == c.cond_dim,
                "denoise: condition shape " + shape_str(cv.shape()) + " does not match [N, " +
                    std::to_string(c.cond_dim) + "]");
    }
    std::vector<double> tf(t.begin(), t.end());
    Var temb = g.constant(timestep_embedding<T>(tf, c.time_embed_dim));
    temb = g.linear(temb, p.at("time.fc1.weight"), p.at("time.fc1.bias"));
    temb = g.linear(g.silu(temb), p.at("time.fc2.weight"), p.at("time.fc2.bias"));
    Var temb_act = g.silu(temb);

    Var h = g.conv2d(x, p.at("in_conv.weight"), p.at("in_conv.bias"));
    if (input_add) h = g.add_channel_bias(h, *input_add);
    EncoderTaps taps;
    for (std::size_t i = 0; i < c.depth; ++i) {
        h = detail::block(g, p, "enc" + std::to_string(i), h, temb_act, cond);
        taps.skips.push_back(h);
        if (i + 1 < c.depth) h = g.avg_pool2(h);
    }
    taps.mid = detail::block(g, p, "mid", h, temb_act, cond);
    taps.temb_act = temb_act;
    return taps;
}

struct DenoiseVars {
    Var eps;
    std::vector<Var> upblocks;  // pooled [N, ch(j)] per decoder block, deepest first
};

// Residuals added to the skips and to the middle output (ControlNet style).
struct ControlResiduals {
    std::vector<Var> skips;
    Var mid;
};

template <class T>
DenoiseVars denoise_graph(Graph<T>& g, const DenoiserConfig& c, const Bound<T>& p, Var x,
                          const std::vector<std::size_t>& t, std::optional<Var> cond = std::nullopt,
                          const ControlResiduals* residuals = nullptr) {
    EncoderTaps taps = encoder_graph(g, c, p, x, t, cond, std::nullopt);
    Var h = taps.mid;
    if (residuals) {
        require(residuals->skips.size() == c.depth, "denoise: residual count mismatch");
        h = g.add(h, residuals->mid);
        for (std::size_t i = 0; i < c.depth; ++i) taps.skips[i] = g.add(taps.skips[i], residuals->skips[i]);
    }
    DenoiseVars out;
    for (std::size_t jj = c.depth; jj-- > 0;) {
        h = detail::block(g, p, "dec" + std::to_string(jj), g.concat_channels(h, taps.skips[jj]), taps.temb_act, cond);
        out.upblocks.push_back(g.global_avg_pool(h));
        if (jj > 0) h = g.upsample2(h);
    }
    out.eps = g.conv2d(h, p.at("out_conv.weight"), p.at("out_conv.bias"));
    return out;
}

template <class T>
struct DenoiseResult {
    Tensor<T> eps;
    std::vector<Tensor<T>> upblocks;

    // Concatenated pooled upblock features, [N, sum ch(j)].
    Tensor<T> features() const {
        const std::size_t n = upblocks.front().dim(0);
        std::size_t total = 0;
        for (const auto& u : upblocks) total += u.dim(1);
        Tensor<T> f({n, total});
        for (std::size_t r = 0; r < n; ++r) {
            std::size_t off = 0;
            for (const auto& u : upblocks) {
                for (std::size_t k = 0; k < u.dim(1); ++k) f.at(r, off + k) = u.at(r, k);
                off += u.dim(1);
            }
        }
        return f;
    }
};

// Inference entry point. x_t: [N, in, H, W]; cond: [N, cond_dim] or none.
template <class T>
DenoiseResult<T> denoise(const Denoiser<T>& d, const Tensor<T>& x_t, const std::vector<std::size_t>& t,
                         const Tensor<T>* cond = nullptr) {
    Graph<T> g;
    Bound<T> p = bind(g, d.params, false);
    Var x = g.constant(x_t);
    std::optional<Var> cv;
    if (cond) cv = g.constant(*cond);
    DenoiseVars out = denoise_graph(g, d.config, p, x, t, cv);
    DenoiseResult<T> r{g.value(out.eps), {}};
    for (Var u : out.upblocks) r.upblocks.push_back(g.value(u));
    return r;
}

}  // namespace immunodiff::nd
