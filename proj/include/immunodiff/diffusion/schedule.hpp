#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "immunodiff/core/error.hpp"
#include "immunodiff/core/rng.hpp"
#include "immunodiff/nd/denoiser.hpp"
#include "immunodiff/nd/tensor.hpp"

namespace immunodiff::diffusion {

using nd::Tensor;

enum class ScheduleKind { linear };

// beta[t] per-step variance, alpha_step[t] = 1 - beta[t],
// alpha_bar[t] = prod_{s <= t} alpha_step[s]. alpha_bar is the coefficient
// in x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps.
struct NoiseSchedule {
    std::size_t T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_step;
    std::vector<double> alpha_bar;
};

inline constexpr double kBetaStart = 1e-4;
inline constexpr double kBetaEnd = 2e-2;

inline NoiseSchedule make_schedule(std::size_t T, ScheduleKind kind = ScheduleKind::linear) {
    require_config(T >= 1, "schedule: T must be >= 1");
    require_config(kind == ScheduleKind::linear, "schedule: unsupported kind");
    NoiseSchedule s;
    s.T = T;
    double prod = 1.0;
    for (std::size_t t = 0; t < T; ++t) {
        const double b = T == 1 ? kBetaStart
                                : kBetaStart + (kBetaEnd - kBetaStart) * static_cast<double>(t) /
                                                   static_cast<double>(T - 1);
        s.beta.push_back(b);
        s.alpha_step.push_back(1.0 - b);
        prod *= 1.0 - b;
        s.alpha_bar.push_back(prod);
    }
    return s;
}

inline ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    throw ConfigError("unknown schedule kind '" + s + "'");
}

template <class T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& s) {
    require(x0.shape() == eps.shape(), "forward_diffuse: eps shape " + nd::shape_str(eps.shape()) +
                                           " differs from x0 shape " + nd::shape_str(x0.shape()));
    require(t < s.T, "forward_diffuse: timestep " + std::to_string(t) + " outside [0, " + std::to_string(s.T) + ")");
    const double a = std::sqrt(s.alpha_bar[t]);
    const double b = std::sqrt(1.0 - s.alpha_bar[t]);
    Tensor<T> out(x0.shape());
    for (std::size_t i = 0; i < x0.size(); ++i)
        out[i] = static_cast<T>(a * static_cast<double>(x0[i]) + b * static_cast<double>(eps[i]));
    return out;
}

// Per-sample timesteps over a batch ([N, ...] with one t per leading index).
template <class T>
Tensor<T> forward_diffuse_batch(const Tensor<T>& x0, const std::vector<std::size_t>& t, const Tensor<T>& eps,
                                const NoiseSchedule& s) {
    require(x0.shape() == eps.shape(), "forward_diffuse: eps/x0 shape mismatch");
    require(x0.rank() >= 1 && t.size() == x0.dim(0), "forward_diffuse: one timestep per sample required");
    const std::size_t per = x0.size() / x0.dim(0);
    Tensor<T> out(x0.shape());
    for (std::size_t n = 0; n < t.size(); ++n) {
        require(t[n] < s.T, "forward_diffuse: timestep out of range");
        const double a = std::sqrt(s.alpha_bar[t[n]]);
        const double b = std::sqrt(1.0 - s.alpha_bar[t[n]]);
        for (std::size_t i = n * per; i < (n + 1) * per; ++i)
            out[i] = static_cast<T>(a * static_cast<double>(x0[i]) + b * static_cast<double>(eps[i]));
    }
    return out;
}

// Mean squared error over all elements.
template <class T>
double ddpm_loss(const Tensor<T>& eps, const Tensor<T>& eps_pred) {
    require(eps.shape() == eps_pred.shape(), "ddpm_loss: shape mismatch " + nd::shape_str(eps.shape()) + " vs " +
                                                 nd::shape_str(eps_pred.shape()));
    double s = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double d = static_cast<double>(eps[i]) - static_cast<double>(eps_pred[i]);
        s += d * d;
    }
    return s / static_cast<double>(eps.size());
}

template <class T>
Tensor<T> standard_normal(const nd::Shape& shape, Rng& rng) {
    Tensor<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(rng.normal());
    return t;
}

// Predicts eps for a batch at one shared timestep.
template <class T>
using EpsFn = std::function<Tensor<T>(const Tensor<T>& x_t, std::size_t t)>;

// DDPM ancestral sampling:
//   x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(1 - beta_t) + sqrt(beta_t) z,
// with z = 0 at t = 0. Draw order: x_T (row-major) first, then one z tensor
// per step for t = T-1 .. 1.
template <class T>
Tensor<T> ancestral_sample(const EpsFn<T>& eps_fn, const NoiseSchedule& s, const nd::Shape& shape,
                           std::uint64_t rng_seed) {
    Rng rng(rng_seed);
    Tensor<T> x = standard_normal<T>(shape, rng);
    for (std::size_t t = s.T; t-- > 0;) {
        const Tensor<T> eps = eps_fn(x, t);
        require(eps.shape() == x.shape(), "ancestral_sample: predictor returned wrong shape");
        const double coef = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
        const double inv = 1.0 / std::sqrt(1.0 - s.beta[t]);
        const double sigma = std::sqrt(s.beta[t]);
        for (std::size_t i = 0; i < x.size(); ++i) {
            double v = (static_cast<double>(x[i]) - coef * static_cast<double>(eps[i])) * inv;
            if (t > 0) v += sigma * rng.normal();
            x[i] = static_cast<T>(v);
        }
    }
    return x;
}

template <class T>
Tensor<T> ancestral_sample(const nd::Denoiser<T>& d, const NoiseSchedule& s, const nd::Shape& shape,
                           std::uint64_t rng_seed, const Tensor<T>* cond = nullptr) {
    EpsFn<T> fn = [&](const Tensor<T>& x, std::size_t t) {
        return nd::denoise(d, x, std::vector<std::size_t>(x.dim(0), t), cond).eps;
    };
    return ancestral_sample(fn, s, shape, rng_seed);
}

}  // namespace immunodiff::diffusion
