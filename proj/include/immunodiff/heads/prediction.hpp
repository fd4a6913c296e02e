#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "immunodiff/cbi/adapter.hpp"
#include "immunodiff/core/error.hpp"
#include "immunodiff/core/rng.hpp"
#include "immunodiff/diffusion/schedule.hpp"
#include "immunodiff/nd/graph.hpp"
#include "immunodiff/nd/params.hpp"

namespace immunodiff::heads {

using nd::Graph;
using nd::Tensor;
using nd::Var;

using Features = std::vector<std::vector<double>>;

// f_hat for one case: the pre image is noised to t_feat with a case-specific
// eps (drawn from noise_seed) and passed through the frozen Stage-2 model
// conditioned on ĉ(pre, rec); the pooled upblock outputs are concatenated.
template <class T>
std::vector<double> extract_features(const cbi::Stage2Model<T>& m, const data::Image& pre,
                                     const data::ClinicalRecord& rec, const diffusion::NoiseSchedule& s,
                                     std::size_t t_feat, std::uint64_t noise_seed) {
    require_config(!m.cd.base.params.empty() && !m.cd.branch.empty() && !m.adapter.params.empty(),
                   "extract_features: model is not trained (no Stage-2 parameters)");
    require(t_feat < s.T, "extract_features: t_feat " + std::to_string(t_feat) + " outside [0, " +
                              std::to_string(s.T) + ")");
    const auto& c = m.cd.base.config;
    cbi::CondInputs<T> in{{cbi::to_model_space<T>(pre)}, {cbi::encode_clinical(rec, m.adapter.norm)}};
    Rng rng(noise_seed);
    const auto eps = diffusion::standard_normal<T>(c.image_shape(1), rng);
    const auto x0 = in.z0[0].reshaped(c.image_shape(1));
    const auto x_t = diffusion::forward_diffuse(x0, t_feat, eps, s);
    const auto r = cbi::stage2_denoise(m, in, {0}, x_t, {t_feat});
    const auto f = r.features();
    return {f.data(), f.data() + f.size()};
}

struct Standardizer {
    std::vector<double> mean, scale;

    static Standardizer fit(const Features& x) {
        require(!x.empty(), "standardizer: no rows");
        const std::size_t k = x.front().size();
        Standardizer s{std::vector<double>(k, 0.0), std::vector<double>(k, 0.0)};
        for (const auto& r : x) {
            require(r.size() == k, "standardizer: ragged features");
            for (std::size_t j = 0; j < k; ++j) s.mean[j] += r[j];
        }
        for (auto& m : s.mean) m /= static_cast<double>(x.size());
        for (const auto& r : x)
            for (std::size_t j = 0; j < k; ++j) s.scale[j] += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
        for (auto& v : s.scale) {
            v = std::sqrt(v / static_cast<double>(x.size()));
            if (!(v > 1e-12)) v = 1.0;
        }
        return s;
    }

    Tensor<double> apply(const Features& x) const {
        Tensor<double> out({x.size(), mean.size()});
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = 0; j < mean.size(); ++j) out.at(i, j) = (x[i][j] - mean[j]) / scale[j];
        return out;
    }
};

// p = sigmoid(w . f + b) on raw (unstandardized) features.
struct ClassifierHead {
    std::vector<double> w;
    double b = 0.0;
};

// risk = beta . f; H(t | f) = H0(t) exp(risk), H0 the Breslow baseline:
// H0(t) = sum over event times u <= t of d_u / sum_{j: t_j >= u} exp(risk_j).
struct SurvivalHead {
    std::vector<double> beta;
    std::vector<double> event_times;     // distinct, increasing
    std::vector<double> baseline_steps;  // hazard increment at each event time
};

struct HeadTrainConfig {
    std::size_t epochs = 400;
    double lr = 0.05;
    double l2 = 1e-2;
};

struct Heads {
    ClassifierHead classifier;
    SurvivalHead survival;
    std::vector<double> class_loss;  // per epoch
    std::vector<double> cox_loss;    // per epoch
};

// Positive-class weight n_neg / n_pos; negatives weigh 1.
inline double positive_class_weight(const std::vector<int>& labels) {
    std::size_t pos = 0;
    for (int l : labels) pos += l ? 1 : 0;
    require_config(pos > 0 && pos < labels.size(), "heads: both classes must be present");
    return static_cast<double>(labels.size() - pos) / static_cast<double>(pos);
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), "width mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline std::vector<double> breslow_increments(const std::vector<double>& risk, const std::vector<double>& times,
                                              const std::vector<int>& events, std::vector<double>& event_times) {
    event_times.clear();
    for (std::size_t i = 0; i < times.size(); ++i)
        if (events[i]) event_times.push_back(times[i]);
    std::sort(event_times.begin(), event_times.end());
    event_times.erase(std::unique(event_times.begin(), event_times.end()), event_times.end());
    std::vector<double> steps;
    for (double u : event_times) {
        double d = 0.0, at_risk = 0.0;
        for (std::size_t j = 0; j < times.size(); ++j) {
            if (times[j] == u && events[j]) d += 1.0;
            if (times[j] >= u) at_risk += std::exp(risk[j]);
        }
        steps.push_back(d / at_risk);
    }
    return steps;
}

inline Heads fit_heads(const Features& x, const std::vector<int>& labels, const std::vector<double>& times,
                       const std::vector<int>& events, const HeadTrainConfig& tc, std::uint64_t seed) {
    require_config(!x.empty() && labels.size() == x.size() && times.size() == x.size() && events.size() == x.size(),
                   "fit_heads: features, labels and outcomes must have equal length");
    const double w_pos = positive_class_weight(labels);
    std::size_t comparable = 0;
    for (std::size_t i = 0; i < x.size() && comparable < 2; ++i)
        for (std::size_t j = 0; j < x.size() && comparable < 2; ++j)
            if (events[i] && times[i] < times[j]) ++comparable;
    require_config(comparable >= 2, "fit_heads: need at least 2 comparable survival pairs");

    const Standardizer st = Standardizer::fit(x);
    const Tensor<double> xs = st.apply(x);
    const std::size_t n = x.size(), k = st.mean.size();
    Rng rng(derive_seed(seed, 0x4E));
    nd::ParamStore<double> p;
    p["cls.w"] = Tensor<double>({1, k});
    for (auto& v : p["cls.w"].values()) v = 0.01 * rng.normal();
    p["cls.b"] = Tensor<double>({1});
    p["cox.beta"] = Tensor<double>({1, k});
    for (auto& v : p["cox.beta"].values()) v = 0.01 * rng.normal();

    std::vector<double> weights(n);
    for (std::size_t i = 0; i < n; ++i) weights[i] = labels[i] ? w_pos : 1.0;
    nd::AdamConfig adam;
    adam.lr = tc.lr;
    nd::AdamState<double> state;
    Heads h;
    for (std::size_t e = 0; e < tc.epochs; ++e) {
        Graph<double> g;
        auto b = nd::bind(g, p, true);
        Var xv = g.constant(xs);
        Var logits = g.linear(xv, b.at("cls.w"), b.at("cls.b"));
        Var cls = g.weighted_bce_logits(logits, labels, weights);
        Var risk = g.linear(xv, b.at("cox.beta"));
        Var cox = g.cox_nll(risk, times, events);
        Var reg = g.scale(g.add(g.sum(g.mul(b.at("cls.w"), b.at("cls.w"))),
                                g.sum(g.mul(b.at("cox.beta"), b.at("cox.beta")))),
                          tc.l2);
        Var loss = g.add(g.add(cls, cox), reg);
        h.class_loss.push_back(g.value(cls).item());
        h.cox_loss.push_back(g.value(cox).item());
        nd::adam_step(p, g.backward(loss), state, adam);
    }

    // Fold the standardization into raw-feature weights.
    h.classifier.w.resize(k);
    h.classifier.b = p["cls.b"][0];
    h.survival.beta.resize(k);
    for (std::size_t j = 0; j < k; ++j) {
        h.classifier.w[j] = p["cls.w"][j] / st.scale[j];
        h.classifier.b -= p["cls.w"][j] * st.mean[j] / st.scale[j];
        h.survival.beta[j] = p["cox.beta"][j] / st.scale[j];
    }
    std::vector<double> risk(n);
    for (std::size_t i = 0; i < n; ++i) risk[i] = dot(h.survival.beta, x[i]);
    h.survival.baseline_steps = breslow_increments(risk, times, events, h.survival.event_times);
    return h;
}

inline double predict_response(const ClassifierHead& h, const std::vector<double>& f) {
    const double z = dot(h.w, f) + h.b;
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline double risk_score(const SurvivalHead& h, const std::vector<double>& f) { return dot(h.beta, f); }

inline std::vector<double> baseline_cumulative_hazard(const SurvivalHead& h, const std::vector<double>& grid) {
    for (std::size_t i = 1; i < grid.size(); ++i)
        require(grid[i] > grid[i - 1], "cumulative_hazard: time grid must be strictly increasing");
    std::vector<double> out;
    double acc = 0.0;
    std::size_t e = 0;
    for (double t : grid) {
        while (e < h.event_times.size() && h.event_times[e] <= t) acc += h.baseline_steps[e++];
        out.push_back(acc);
    }
    return out;
}

inline std::vector<double> cumulative_hazard_at_risk(const SurvivalHead& h, double risk,
                                                     const std::vector<double>& grid) {
    auto out = baseline_cumulative_hazard(h, grid);
    const double m = std::exp(risk);
    for (auto& v : out) v *= m;
    return out;
}

inline std::vector<double> cumulative_hazard(const SurvivalHead& h, const std::vector<double>& f,
                                             const std::vector<double>& grid) {
    return cumulative_hazard_at_risk(h, risk_score(h, f), grid);
}

// Harrell's C. A pair (i, j) is comparable when t_i < t_j and i had an event;
// it is concordant when risk_i > risk_j, and a risk tie counts one half.
// Counted in integers: C = (2 * concordant + ties) / (2 * comparable).
inline double concordance_index(const std::vector<double>& risks, const std::vector<double>& times,
                                const std::vector<int>& events) {
    require(risks.size() == times.size() && times.size() == events.size(), "concordance_index: length mismatch");
    std::uint64_t conc = 0, ties = 0, comp = 0;
    for (std::size_t i = 0; i < risks.size(); ++i) {
        if (!events[i]) continue;
        for (std::size_t j = 0; j < risks.size(); ++j) {
            if (!(times[i] < times[j])) continue;
            ++comp;
            if (risks[i] > risks[j])
                ++conc;
            else if (risks[i] == risks[j])
                ++ties;
        }
    }
    if (comp == 0) throw UndefinedResultError("concordance_index: no comparable pairs");
    return static_cast<double>(2 * conc + ties) / static_cast<double>(2 * comp);
}

}  // namespace immunodiff::heads
