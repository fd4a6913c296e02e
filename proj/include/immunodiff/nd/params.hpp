#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <string>

#include "immunodiff/core/error.hpp"
#include "immunodiff/core/rng.hpp"
#include "immunodiff/nd/graph.hpp"
#include "immunodiff/nd/tensor.hpp"

namespace immunodiff::nd {

// Named parameter collection. std::map keeps iteration order (and therefore
// serialization, hashing and optimizer order) independent of insertion order.
template <class T>
using ParamStore = NamedTensors<T>;

template <class T>
using Bound = std::map<std::string, Var>;

// Creates graph leaves for every tensor in `store`. Trainable leaves are
// registered under `prefix + name` so their gradients come back by name.
template <class T>
Bound<T> bind(Graph<T>& g, const ParamStore<T>& store, bool trainable, const std::string& prefix = "") {
    Bound<T> out;
    for (const auto& [name, t] : store) out[name] = trainable ? g.parameter(prefix + name, t) : g.constant(t);
    return out;
}

template <class T>
std::size_t parameter_count(const ParamStore<T>& store) {
    std::size_t n = 0;
    for (const auto& [name, t] : store) n += t.size();
    return n;
}

template <class T, class U>
ParamStore<U> cast_store(const ParamStore<T>& store) {
    ParamStore<U> out;
    for (const auto& [name, t] : store) out[name] = t.template cast<U>();
    return out;
}

// FNV-1a over names, shapes and raw payload bytes.
template <class T>
std::uint64_t hash_store(const ParamStore<T>& store) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, t] : store) {
        feed(name.data(), name.size());
        for (std::size_t d : t.shape()) feed(&d, sizeof d);
        feed(t.data(), t.size() * sizeof(T));
    }
    return h;
}

// He-uniform: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
template <class T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

struct AdamConfig {
    double lr = 2.5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // L2 added to the gradient
};

template <class T>
struct AdamState {
    ParamStore<T> m;
    ParamStore<T> v;
    std::size_t step = 0;
};

// One bias-corrected Adam update over every tensor in `params`. Tensors
// without an entry in `grads` are left untouched.
template <class T>
void adam_step(ParamStore<T>& params, const NamedTensors<T>& grads, AdamState<T>& state, const AdamConfig& cfg) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor<T>& g = git->second;
        require(g.shape() == p.shape(), "adam: gradient shape mismatch for " + name);
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m = Tensor<T>(p.shape());
        if (v.empty()) v = Tensor<T>(p.shape());
        require(m.shape() == p.shape() && v.shape() == p.shape(), "adam: state shape mismatch for " + name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = static_cast<double>(g[i]) + cfg.weight_decay * static_cast<double>(p[i]);
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double update = cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
            p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
        }
    }
}

// Central differences (f(p + h) - f(p - h)) / 2h for every coordinate of
// every tensor in `params`. Evaluated in double precision.
inline NamedTensors<double> finite_diff_grad(const std::function<double(const ParamStore<double>&)>& loss_fn,
                                             const ParamStore<double>& params, double h) {
    require(h > 0.0, "finite_diff_grad: step must be positive");
    ParamStore<double> probe = params;
    NamedTensors<double> out;
    for (auto& [name, t] : probe) {
        Tensor<double> g(t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double orig = t[i];
            t[i] = orig + h;
            const double fp = loss_fn(probe);
            t[i] = orig - h;
            const double fm = loss_fn(probe);
            t[i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        out[name] = std::move(g);
    }
    return out;
}

// Per-parameter max relative error |a - n| / max(|a|, |n|, floor).
struct GradientReport {
    std::map<std::string, double> max_rel_error;

    double worst() const {
        double w = 0.0;
        for (const auto& [k, v] : max_rel_error) w = std::max(w, v);
        return w;
    }
};

inline GradientReport compare_gradients(const NamedTensors<double>& analytic, const NamedTensors<double>& numeric,
                                        double floor = 1e-6) {
    GradientReport rep;
    for (const auto& [name, n] : numeric) {
        auto it = analytic.find(name);
        require(it != analytic.end(), "analytic gradient missing for " + name);
        const auto& a = it->second;
        require(a.shape() == n.shape(), "gradient shape mismatch for " + name);
        double worst = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double denom = std::max({std::abs(a[i]), std::abs(n[i]), floor});
            worst = std::max(worst, std::abs(a[i] - n[i]) / denom);
        }
        rep.max_rel_error[name] = worst;
    }
    return rep;
}

}  // namespace immunodiff::nd
