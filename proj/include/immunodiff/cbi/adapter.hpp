#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "immunodiff/control/anatomy_control.hpp"
#include "immunodiff/core/error.hpp"
#include "immunodiff/core/rng.hpp"
#include "immunodiff/data/phantom.hpp"
#include "immunodiff/diffusion/schedule.hpp"
#include "immunodiff/diffusion/trainer.hpp"
#include "immunodiff/nd/graph.hpp"
#include "immunodiff/nd/params.hpp"

namespace immunodiff::cbi {

using nd::Bound;
using nd::Graph;
using nd::ParamStore;
using nd::RopeTable;
using nd::Tensor;
using nd::Var;

// --- clinical encoding -----------------------------------------------------

inline constexpr std::size_t kDemoWidth = 7;   // z(age), sex one-hot (2), race one-hot (4)
inline constexpr std::size_t kBloodWidth = 6;  // z of cea, anc, alc, nlr, aec, amc
inline constexpr std::size_t kPdl1Width = 3;   // one-hot

// Training-split statistics: means, sample standard deviations, and the
// categorical levels that occurred.
struct NormStats {
    double age_mean = 0, age_std = 1;
    std::array<double, 6> blood_mean{};
    std::array<double, 6> blood_std{1, 1, 1, 1, 1, 1};
    std::set<data::Sex> sexes;
    std::set<data::Race> races;
    std::set<data::Pdl1> pdl1s;
};

inline std::array<double, 6> blood_values(const data::ClinicalRecord& r) {
    return {r.cea, r.anc, r.alc, r.nlr, r.aec, r.amc};
}

inline NormStats fit_norm_stats(const std::vector<const data::ClinicalRecord*>& train) {
    require_config(train.size() >= 2, "norm stats need at least 2 training records");
    NormStats s;
    const double n = static_cast<double>(train.size());
    auto mean_std = [&](auto get, double& mean, double& sd) {
        double m = 0;
        for (const auto* r : train) m += get(*r);
        m /= n;
        double v = 0;
        for (const auto* r : train) v += (get(*r) - m) * (get(*r) - m);
        mean = m;
        sd = std::sqrt(v / (n - 1.0));
        if (!(sd > 0)) sd = 1.0;
    };
    mean_std([](const data::ClinicalRecord& r) { return r.age; }, s.age_mean, s.age_std);
    for (std::size_t k = 0; k < 6; ++k)
        mean_std([k](const data::ClinicalRecord& r) { return blood_values(r)[k]; }, s.blood_mean[k], s.blood_std[k]);
    for (const auto* r : train) {
        s.sexes.insert(r->sex);
        s.races.insert(r->race);
        s.pdl1s.insert(r->pdl1);
    }
    return s;
}

// Pre-projection feature vectors for the three clinical tokens.
struct ClinicalRaw {
    std::vector<double> demo;   // kDemoWidth
    std::vector<double> blood;  // kBloodWidth
    std::vector<double> pdl1;   // kPdl1Width
};

inline ClinicalRaw encode_clinical(const data::ClinicalRecord& r, const NormStats& s) {
    if (!s.sexes.contains(r.sex)) throw EncodingError("sex level '" + data::to_string(r.sex) + "' unseen in training");
    if (!s.races.contains(r.race))
        throw EncodingError("race level '" + data::to_string(r.race) + "' unseen in training");
    if (!s.pdl1s.contains(r.pdl1))
        throw EncodingError("pdl1 level '" + data::to_string(r.pdl1) + "' unseen in training");
    ClinicalRaw c;
    c.demo.assign(kDemoWidth, 0.0);
    c.demo[0] = (r.age - s.age_mean) / s.age_std;
    c.demo[1 + static_cast<std::size_t>(r.sex)] = 1.0;
    c.demo[3 + static_cast<std::size_t>(r.race)] = 1.0;
    const auto b = blood_values(r);
    for (std::size_t k = 0; k < 6; ++k) c.blood.push_back((b[k] - s.blood_mean[k]) / s.blood_std[k]);
    c.pdl1.assign(kPdl1Width, 0.0);
    c.pdl1[static_cast<std::size_t>(data::pdl1_ordinal(r.pdl1))] = 1.0;
    return c;
}

// --- adapter -----------------------------------------------------------------

// Parameters (all under "cbi."), D = d_tok:
//   cbi.embed.{demo,blood,pdl1}.{weight,bias}   [D, 7|6|3], [D]
//   cbi.attn.{C,B,I}.{q,k,v}.weight             [D, D]
//   cbi.image.conv.{weight,bias}                [image_channels, 1, 3, 3], [image_channels]
// The image embedding is SiLU(conv3x3(z0)) average-pooled to a grid x grid map
// and flattened, so image_channels * grid^2 must equal D.
struct AdapterConfig {
    std::size_t d_tok = 64;
    double rope_base = 1e5;
    double lambda = 5e-2;
    std::size_t image_channels = 4;
    std::size_t image_grid = 4;
    bool literal_product = false;  // Z_C = Z_B = Z_I = elementwise product of the three attention outputs
    bool image_bypass = false;     // image token left out of the attention keys
    bool rope_on_values = true;    // false: conventional RoPE on Q and K only

    void validate() const {
        require_config(d_tok >= 4 && d_tok % 4 == 0, "cbi: d_tok must be a positive multiple of 4");
        require_config(image_channels * image_grid * image_grid == d_tok,
                       "cbi: image_channels * image_grid^2 must equal d_tok");
        require_config(rope_base > 1.0, "cbi: rope_base must exceed 1");
        require_config(lambda >= 0.0, "cbi: lambda must be >= 0");
    }
};

template <class T>
struct Adapter {
    AdapterConfig config;
    ParamStore<T> params;
    NormStats norm;
};

inline constexpr std::array<const char*, 3> kModalities{"C", "B", "I"};

template <class T>
Adapter<T> init_adapter(const AdapterConfig& c, const NormStats& norm, std::uint64_t seed) {
    c.validate();
    Rng rng(derive_seed(seed, 0xCB));
    Adapter<T> a{c, {}, norm};
    const std::size_t d = c.d_tok;
    const std::array<std::pair<const char*, std::size_t>, 3> embeds{
        {{"demo", kDemoWidth}, {"blood", kBloodWidth}, {"pdl1", kPdl1Width}}};
    for (const auto& [name, w] : embeds) {
        a.params[std::string("cbi.embed.") + name + ".weight"] = nd::he_uniform<T>({d, w}, w, rng);
        a.params[std::string("cbi.embed.") + name + ".bias"] = Tensor<T>({d});
    }
    // Attention maps start Xavier-scaled so initial scores stay O(1).
    const double lim = std::sqrt(3.0 / static_cast<double>(d));
    for (const char* m : kModalities)
        for (const char* k : {"q", "k", "v"}) {
            Tensor<T> w({d, d});
            for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-lim, lim));
            a.params[std::string("cbi.attn.") + m + "." + k + ".weight"] = std::move(w);
        }
    a.params["cbi.image.conv.weight"] = nd::he_uniform<T>({c.image_channels, 1, 3, 3}, 9, rng);
    a.params["cbi.image.conv.bias"] = Tensor<T>({c.image_channels});
    return a;
}

// RoPE on a single vector: first half rotated by k_h * theta_i, second by k_w * theta_i.
template <class T>
std::vector<T> rope_apply(const std::vector<T>& f, double kh, double kw, const RopeTable& p) {
    require(f.size() == p.dim, "rope_apply: expected length " + std::to_string(p.dim) + ", got " +
                                   std::to_string(f.size()));
    std::vector<T> out = f;
    nd::rope_rotate(out.data(), p, kh, kw);
    return out;
}

struct AttentionVars {
    Var out;      // [N, D]
    Var weights;  // [N, n_keys]
};

// Scaled dot-product attention of one query row per sample over per-sample
// keys/values. q: [N, D]; keys[j], values[j]: [N, D]. key_mask (optional)
// has one flag per key, shared by all rows.
template <class T>
AttentionVars attend(Graph<T>& g, Var q, const std::vector<Var>& keys, const std::vector<Var>& values,
                     const std::vector<bool>& key_mask = {}) {
    require(!keys.empty() && keys.size() == values.size(), "attention: keys and values must pair up");
    require(key_mask.empty() || key_mask.size() == keys.size(), "attention: key mask length mismatch");
    const auto& qv = g.value(q);
    require(qv.rank() == 2, "attention: query must be [N, D]");
    const std::size_t n = qv.dim(0), d = qv.dim(1), m = keys.size();
    for (std::size_t j = 0; j < m; ++j)
        require(g.value(keys[j]).shape() == qv.shape() && g.value(values[j]).shape() == qv.shape(),
                "attention: token width mismatch, query " + nd::shape_str(qv.shape()) + " vs key " +
                    nd::shape_str(g.value(keys[j]).shape()));
    Tensor<T> ones_col({d, 1});
    ones_col.fill(T(1));
    Var sum_cols = g.constant(ones_col);
    std::vector<Var> scores;
    for (Var k : keys) scores.push_back(g.matmul(g.mul(q, k), sum_cols));
    Var logits = g.scale(g.concat_cols(scores), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    std::vector<bool> mask;
    if (!key_mask.empty())
        for (std::size_t r = 0; r < n; ++r) mask.insert(mask.end(), key_mask.begin(), key_mask.end());
    Var w = g.softmax_rows(logits, mask);
    Tensor<T> ones_row({1, d});
    ones_row.fill(T(1));
    Var spread = g.constant(ones_row);
    std::optional<Var> out;
    for (std::size_t j = 0; j < m; ++j) {
        Tensor<T> pick({m, 1});
        pick[j] = T(1);
        Var wj = g.matmul(g.matmul(w, g.constant(pick)), spread);  // [N, D], column j of w repeated
        Var term = g.mul(wj, values[j]);
        out = out ? g.add(*out, term) : term;
    }
    return {*out, w};
}

struct ClinicalVars {
    Var zc, zb, zi;  // projected clinical tokens, [N, D]
};

template <class T>
Tensor<T> raw_batch(const std::vector<ClinicalRaw>& raw, const std::vector<std::size_t>& idx,
                    std::vector<double> ClinicalRaw::*field) {
    const std::size_t w = (raw.at(idx.front()).*field).size();
    Tensor<T> out({idx.size(), w});
    for (std::size_t b = 0; b < idx.size(); ++b)
        for (std::size_t k = 0; k < w; ++k) out.at(b, k) = static_cast<T>((raw.at(idx[b]).*field).at(k));
    return out;
}

template <class T>
ClinicalVars embed_clinical_graph(Graph<T>& g, const Bound<T>& p, const std::vector<ClinicalRaw>& raw,
                                  const std::vector<std::size_t>& idx) {
    auto proj = [&](const char* name, std::vector<double> ClinicalRaw::*field) {
        const std::string b = std::string("cbi.embed.") + name;
        return g.linear(g.constant(raw_batch<T>(raw, idx, field)), p.at(b + ".weight"), p.at(b + ".bias"));
    };
    return {proj("demo", &ClinicalRaw::demo), proj("blood", &ClinicalRaw::blood), proj("pdl1", &ClinicalRaw::pdl1)};
}

// z0: [N, 1, H, W] -> [N, D]
template <class T>
Var embed_pretreatment_graph(Graph<T>& g, const AdapterConfig& c, const Bound<T>& p, Var z0) {
    const auto& zv = g.value(z0);
    require(zv.rank() == 4 && zv.dim(1) == 1, "embed_pretreatment: expected [N, 1, H, W], got " +
                                                  nd::shape_str(zv.shape()));
    require(zv.dim(2) % c.image_grid == 0 && zv.dim(3) % c.image_grid == 0,
            "embed_pretreatment: image size not divisible by grid " + std::to_string(c.image_grid));
    Var h = g.silu(g.conv2d(z0, p.at("cbi.image.conv.weight"), p.at("cbi.image.conv.bias")));
    h = g.adaptive_avg_pool(h, c.image_grid);
    return g.reshape(h, {zv.dim(0), c.d_tok});
}

struct BundleVars {
    Var z_img;
    Var zc_hat, zb_hat, zi_hat;
    Var c_hat;
    std::vector<Var> weights;  // attention weights per modality
};

// Tokens (C, B, I, image) sit at k_h = 0, 1, 2, 3 with k_w = 0.
template <class T>
BundleVars condition_graph(Graph<T>& g, const AdapterConfig& c, const Bound<T>& p, const ClinicalVars& cv,
                           Var z_img) {
    const RopeTable table = nd::make_rope_table(c.d_tok, c.rope_base);
    const std::size_t n = g.value(z_img).dim(0);
    std::vector<Var> tokens{cv.zc, cv.zb, cv.zi};
    if (!c.image_bypass) tokens.push_back(z_img);
    auto pos = [n](double k) { return std::vector<double>(n, k); };
    const std::vector<double> zero = pos(0.0);
    BundleVars b;
    b.z_img = z_img;
    std::vector<Var> outs;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string m = std::string("cbi.attn.") + kModalities[i];
        Var q = g.rope_rows(g.linear(tokens[i], p.at(m + ".q.weight")), table, pos(double(i)), zero);
        std::vector<Var> keys, values;
        for (std::size_t j = 0; j < tokens.size(); ++j) {
            keys.push_back(g.rope_rows(g.linear(tokens[j], p.at(m + ".k.weight")), table, pos(double(j)), zero));
            Var v = g.linear(tokens[j], p.at(m + ".v.weight"));
            if (c.rope_on_values) v = g.rope_rows(v, table, pos(double(j)), zero);
            values.push_back(v);
        }
        auto a = attend(g, q, keys, values);
        outs.push_back(a.out);
        b.weights.push_back(a.weights);
    }
    if (c.literal_product) {
        Var prod = g.mul(g.mul(outs[0], outs[1]), outs[2]);
        outs = {prod, prod, prod};
    }
    b.zc_hat = outs[0];
    b.zb_hat = outs[1];
    b.zi_hat = outs[2];
    b.c_hat = g.add(z_img, g.scale(g.add(g.add(outs[0], outs[1]), outs[2]), static_cast<T>(c.lambda)));
    return b;
}

// c_hat = z_img + lambda * (z_C + z_B + z_I), evaluated in double.
inline std::vector<double> fuse_condition(const std::vector<double>& z_img, const std::vector<double>& zc,
                                          const std::vector<double>& zb, const std::vector<double>& zi,
                                          double lambda = 5e-2) {
    require(zc.size() == z_img.size() && zb.size() == z_img.size() && zi.size() == z_img.size(),
            "fuse_condition: widths differ");
    std::vector<double> out(z_img.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = z_img[k] + lambda * (zc[k] + zb[k] + zi[k]);
    return out;
}

template <class T>
struct ConditionBundle {
    std::vector<T> z_img_hat, z_c_hat, z_b_hat, z_i_hat, c_hat;
    double lambda = 5e-2;
};

// Diffusion-space image: [1, H, W] in [-1, 1] from a [0, 1] phantom image.
template <class T>
Tensor<T> to_model_space(const data::Image& img) {
    Tensor<T> out({1, img.dim(0), img.dim(1)});
    for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<T>(2.0 * img[i] - 1.0);
    return out;
}

template <class T>
data::Image from_model_space(const Tensor<T>& x) {
    data::Image out({x.dim(x.rank() - 2), x.dim(x.rank() - 1)});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (static_cast<double>(x[i]) + 1.0) / 2.0;
    return out;
}

// Per-item conditioning inputs: model-space pre image and encoded clinical record.
template <class T>
struct CondInputs {
    std::vector<Tensor<T>> z0;  // each [1, H, W]
    std::vector<ClinicalRaw> raw;
};

template <class T>
BundleVars bundle_graph(Graph<T>& g, const AdapterConfig& c, const Bound<T>& p, const CondInputs<T>& in,
                        const std::vector<std::size_t>& idx) {
    Var z0 = g.constant(diffusion::detail::stack(in.z0, idx));
    return condition_graph(g, c, p, embed_clinical_graph(g, p, in.raw, idx), embed_pretreatment_graph(g, c, p, z0));
}

template <class T>
ConditionBundle<T> make_bundle(const Adapter<T>& a, const data::Image& pre, const data::ClinicalRecord& rec) {
    CondInputs<T> in{{to_model_space<T>(pre)}, {encode_clinical(rec, a.norm)}};
    Graph<T> g;
    auto p = nd::bind(g, a.params, false);
    auto b = bundle_graph(g, a.config, p, in, {0});
    auto vec = [&g](Var v) {
        const auto s = g.value(v).values();
        return std::vector<T>(s.begin(), s.end());
    };
    return {vec(b.z_img), vec(b.zc_hat), vec(b.zb_hat), vec(b.zi_hat), vec(b.c_hat), a.config.lambda};
}

// --- stage 2 -------------------------------------------------------------------

// The Stage-1 controlled model with ĉ driving its control pathway. The
// Stage-1 control_proj (width 2 * proj_dim) is replaced by a fresh one of
// width d_tok.
template <class T>
struct Stage2Model {
    control::ControlledDenoiser<T> cd;
    Adapter<T> adapter;
};

template <class T>
Stage2Model<T> make_stage2(const control::ControlledDenoiser<T>& stage1, const Adapter<T>& adapter,
                           std::uint64_t seed) {
    Stage2Model<T> m{stage1, adapter};
    control::set_control_proj(m.cd, adapter.config.d_tok, seed);
    return m;
}

template <class T>
nd::DenoiseVars stage2_graph(Graph<T>& g, const Stage2Model<T>& m, const Bound<T>& base, const Bound<T>& trainable,
                             const CondInputs<T>& in, const std::vector<std::size_t>& idx, Var x,
                             const std::vector<std::size_t>& t) {
    auto b = bundle_graph(g, m.adapter.config, trainable, in, idx);
    return control::controlled_graph(g, m.cd, base, trainable, x, t, b.c_hat);
}

// Branch and adapter parameters share one optimizer store; adapter names
// carry the "cbi." prefix so the two never collide.
template <class T>
ParamStore<T> joint_trainable(const Stage2Model<T>& m) {
    ParamStore<T> p = m.cd.branch;
    for (const auto& [k, v] : m.adapter.params) {
        require(!p.contains(k), "stage2: parameter name collision " + k);
        p[k] = v;
    }
    return p;
}

template <class T>
void split_trainable(Stage2Model<T>& m, const ParamStore<T>& p) {
    for (const auto& [k, v] : p) {
        if (k.rfind("cbi.", 0) == 0)
            m.adapter.params.at(k) = v;
        else
            m.cd.branch.at(k) = v;
    }
}

// targets[i]: model-space post image z1 of item i; in: its z0 and clinical record.
template <class T>
diffusion::TrainCurve train_stage2(Stage2Model<T>& m, const diffusion::NoiseSchedule& s,
                                   const std::vector<Tensor<T>>& targets, const CondInputs<T>& in,
                                   const diffusion::DiffusionTrainConfig& tc, std::uint64_t seed) {
    require_config(!m.cd.base.params.empty() && !m.cd.branch.empty(),
                   "train_stage2: Stage-1 model missing (train-control checkpoint required)");
    require_config(targets.size() == in.z0.size() && targets.size() == in.raw.size(),
                   "train_stage2: targets and conditioning inputs differ in length");
    require_config(s.T == m.cd.base.config.timesteps, "train_stage2: schedule T differs from denoiser timesteps");
    const Stage2Model<T>* model = &m;
    diffusion::EpsGraphFn<T> fn = [model, &in](Graph<T>& g, const Bound<T>& trainable,
                                               const std::vector<std::size_t>& idx, Var x,
                                               const std::vector<std::size_t>& t) {
        auto base = nd::bind(g, model->cd.base.params, false);
        return stage2_graph(g, *model, base, trainable, in, idx, x, t).eps;
    };
    const std::uint64_t before = nd::hash_store(m.cd.base.params);
    ParamStore<T> p = joint_trainable(m);
    auto curve = diffusion::train_eps(p, targets, s, fn, tc, seed);
    split_trainable(m, p);
    require(nd::hash_store(m.cd.base.params) == before, "train_stage2: locked base parameters changed");
    return curve;
}

// Inference: eps prediction and upblock features for given inputs.
template <class T>
nd::DenoiseResult<T> stage2_denoise(const Stage2Model<T>& m, const CondInputs<T>& in,
                                    const std::vector<std::size_t>& idx, const Tensor<T>& x_t,
                                    const std::vector<std::size_t>& t) {
    Graph<T> g;
    auto base = nd::bind(g, m.cd.base.params, false);
    auto trainable = nd::bind(g, joint_trainable(m), false);
    auto out = stage2_graph(g, m, base, trainable, in, idx, g.constant(x_t), t);
    nd::DenoiseResult<T> r{g.value(out.eps), {}};
    for (Var u : out.upblocks) r.upblocks.push_back(g.value(u));
    return r;
}

// Samples a post-treatment image conditioned on ĉ(z0, rec). Returns [0, 1]-space
// values (not clipped).
template <class T>
data::Image generate_posttreatment(const Stage2Model<T>& m, const data::Image& pre, const data::ClinicalRecord& rec,
                                   const diffusion::NoiseSchedule& s, std::uint64_t seed) {
    const auto& c = m.cd.base.config;
    require(pre.shape() == nd::Shape{c.height, c.width}, "generate_posttreatment: pre image shape " +
                                                             nd::shape_str(pre.shape()) + " does not match model");
    CondInputs<T> in{{to_model_space<T>(pre)}, {encode_clinical(rec, m.adapter.norm)}};
    // ĉ does not depend on x_t, so it is computed once and reused at every step.
    Tensor<T> c_hat;
    {
        Graph<T> g;
        auto p = nd::bind(g, m.adapter.params, false);
        c_hat = g.value(bundle_graph(g, m.adapter.config, p, in, {0}).c_hat);
    }
    diffusion::EpsFn<T> fn = [&](const Tensor<T>& x, std::size_t t) {
        return control::controlled_denoise(m.cd, x, std::vector<std::size_t>(x.dim(0), t), c_hat).eps;
    };
    return from_model_space(diffusion::ancestral_sample(fn, s, c.image_shape(1), seed));
}

}  // namespace immunodiff::cbi
