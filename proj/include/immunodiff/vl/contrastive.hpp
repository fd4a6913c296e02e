#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "immunodiff/core/error.hpp"
#include "immunodiff/core/rng.hpp"
#include "immunodiff/data/phantom.hpp"
#include "immunodiff/nd/graph.hpp"
#include "immunodiff/nd/params.hpp"

namespace immunodiff::vl {

using nd::Bound;
using nd::Graph;
using nd::ParamStore;
using nd::Shape;
using nd::Tensor;
using nd::Var;

// Vessel and lobe mask encoders with projection heads.
//
// Encoder "<m>.enc" (m = v or l): `blocks` conv3x3 + ReLU blocks, average
// pooling between blocks, then a global average pool to h in R^d. Block i
// has 16 * 2^i channels except the last, which has d. With coord_channels
// the mask is stacked with y * mask and x * mask (coordinates in [-1, 1]) so
// the pooled features see where structures sit, not only how much of them
// there is.
//
// Head "<m>.head": z = W2 ReLU(W1 h + b1) + b2, W1 [d, d], W2 [proj_dim, d].
struct VLConfig {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t blocks = 3;
    std::size_t d = 128;
    std::size_t proj_dim = 64;
    double tau = 0.5;
    bool coord_channels = true;
    bool symmetric = false;  // adds the l-anchored direction when true

    std::size_t block_channels(std::size_t i) const { return i + 1 == blocks ? d : std::size_t{16} << i; }
    std::size_t input_channels() const { return coord_channels ? 3 : 1; }

    void validate() const {
        require_config(blocks >= 1, "vl: blocks must be >= 1");
        require_config(d >= 1 && proj_dim >= 1, "vl: d and proj_dim must be positive");
        require_config(tau > 0.0, "vl: tau must be > 0");
        const std::size_t f = std::size_t{1} << (blocks - 1);
        require_config(height % f == 0 && width % f == 0 && height >= f && width >= f,
                       "vl: mask size " + std::to_string(height) + "x" + std::to_string(width) +
                           " not divisible by 2^(blocks-1)");
    }
};

template <class T>
struct VLEncoders {
    VLConfig config;
    ParamStore<T> params;
};

template <class T>
VLEncoders<T> init_vl(const VLConfig& c, std::uint64_t seed) {
    c.validate();
    Rng rng(derive_seed(seed, 0x71));
    VLEncoders<T> e{c, {}};
    for (const char* m : {"v", "l"}) {
        const std::string p = std::string(m);
        std::size_t cin = c.input_channels();
        for (std::size_t i = 0; i < c.blocks; ++i) {
            const std::size_t cout = c.block_channels(i);
            e.params[p + ".enc.conv" + std::to_string(i) + ".weight"] =
                nd::he_uniform<T>({cout, cin, 3, 3}, cin * 9, rng);
            e.params[p + ".enc.conv" + std::to_string(i) + ".bias"] = Tensor<T>({cout});
            cin = cout;
        }
        e.params[p + ".head.w1.weight"] = nd::he_uniform<T>({c.d, c.d}, c.d, rng);
        e.params[p + ".head.w1.bias"] = Tensor<T>({c.d});
        e.params[p + ".head.w2.weight"] = nd::he_uniform<T>({c.proj_dim, c.d}, c.d, rng);
        e.params[p + ".head.w2.bias"] = Tensor<T>({c.proj_dim});
    }
    return e;
}

template <class T>
Tensor<T> coordinate_planes(std::size_t n, std::size_t h, std::size_t w) {
    Tensor<T> out({n, 2, h, w});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                out.at(b, 0, y, x) = static_cast<T>(h > 1 ? 2.0 * y / (h - 1) - 1.0 : 0.0);
                out.at(b, 1, y, x) = static_cast<T>(w > 1 ? 2.0 * x / (w - 1) - 1.0 : 0.0);
            }
    return out;
}

// masks: [N, 1, H, W] -> h: [N, d]
template <class T>
Var encode_graph(Graph<T>& g, const VLConfig& c, const Bound<T>& p, const std::string& m, Var masks) {
    const auto& mv = g.value(masks);
    require(mv.rank() == 4 && mv.dim(1) == 1 && mv.dim(2) == c.height && mv.dim(3) == c.width,
            "encode_mask: mask shape " + nd::shape_str(mv.shape()) + " does not match configured [N, 1, " +
                std::to_string(c.height) + ", " + std::to_string(c.width) + "]");
    Var h = masks;
    if (c.coord_channels) {
        // y * mask, x * mask: pooled, these carry where the structure sits
        auto planes = coordinate_planes<T>(mv.dim(0), c.height, c.width);
        const std::size_t hw = c.height * c.width;
        for (std::size_t n = 0; n < mv.dim(0); ++n)
            for (std::size_t k = 0; k < 2; ++k)
                for (std::size_t i = 0; i < hw; ++i) planes[(n * 2 + k) * hw + i] *= mv[n * hw + i];
        h = g.concat_channels(h, g.constant(planes));
    }
    for (std::size_t i = 0; i < c.blocks; ++i) {
        const std::string name = m + ".enc.conv" + std::to_string(i);
        h = g.relu(g.conv2d(h, p.at(name + ".weight"), p.at(name + ".bias")));
        if (i + 1 < c.blocks) h = g.avg_pool2(h);
    }
    return g.global_avg_pool(h);
}

template <class T>
Var project_graph(Graph<T>& g, const Bound<T>& p, const std::string& m, Var h) {
    Var a = g.relu(g.linear(h, p.at(m + ".head.w1.weight"), p.at(m + ".head.w1.bias")));
    return g.linear(a, p.at(m + ".head.w2.weight"), p.at(m + ".head.w2.bias"));
}

// Contrastive loss with v anchors:
//   (1/N) sum_i -log( exp(cos(v_i, l_i)/tau) / sum_k exp(cos(v_i, l_k)/tau) )
// The denominator runs over all k, the positive included.
template <class T>
Var nt_xent_graph(Graph<T>& g, Var zv, Var zl, double tau, bool symmetric = false) {
    const auto& a = g.value(zv);
    const auto& b = g.value(zl);
    require(a.rank() == 2 && a.shape() == b.shape() && a.dim(0) >= 1,
            "nt_xent: expected two [N, k] embedding sets of equal shape, got " + nd::shape_str(a.shape()) + " and " +
                nd::shape_str(b.shape()));
    require(tau > 0.0, "nt_xent: tau must be > 0");
    const std::size_t n = a.dim(0);
    std::vector<std::size_t> diag(n);
    std::iota(diag.begin(), diag.end(), std::size_t{0});
    Var nv = g.l2_normalize_rows(zv);
    Var nl = g.l2_normalize_rows(zl);
    Var logits = g.scale(g.matmul(nv, g.transpose(nl)), static_cast<T>(1.0 / tau));
    Var loss = g.cross_entropy_rows(logits, diag);
    if (symmetric) loss = g.scale(g.add(loss, g.cross_entropy_rows(g.transpose(logits), diag)), T(0.5));
    return loss;
}

inline double nt_xent_vl(const std::vector<std::vector<double>>& zv, const std::vector<std::vector<double>>& zl,
                         double tau, bool symmetric = false) {
    require(!zv.empty() && zv.size() == zl.size(), "nt_xent_vl: need N >= 1 matching pairs");
    const std::size_t k = zv.front().size();
    Tensor<double> a({zv.size(), k}), b({zl.size(), k});
    for (std::size_t i = 0; i < zv.size(); ++i) {
        require(zv[i].size() == k && zl[i].size() == k, "nt_xent_vl: embedding widths differ");
        for (std::size_t j = 0; j < k; ++j) {
            a.at(i, j) = zv[i][j];
            b.at(i, j) = zl[i][j];
        }
    }
    Graph<double> g;
    return g.value(nt_xent_graph(g, g.constant(a), g.constant(b), tau, symmetric)).item();
}

template <class T>
Tensor<T> masks_tensor(const std::vector<const data::Mask*>& masks) {
    require(!masks.empty(), "masks_tensor: empty mask list");
    const std::size_t h = masks.front()->dim(0), w = masks.front()->dim(1);
    Tensor<T> out({masks.size(), 1, h, w});
    for (std::size_t n = 0; n < masks.size(); ++n) {
        require(masks[n]->shape() == Shape{h, w}, "masks_tensor: mask shapes differ");
        for (std::size_t i = 0; i < h * w; ++i) out[n * h * w + i] = static_cast<T>((*masks[n])[i]);
    }
    return out;
}

// Single-mask inference helpers. `which` is "v" or "l".
template <class T>
std::vector<T> encode_mask(const VLEncoders<T>& e, const std::string& which, const data::Mask& mask) {
    require(mask.rank() == 2, "encode_mask: mask must be [H, W]");
    Graph<T> g;
    auto p = nd::bind(g, e.params, false);
    Var h = encode_graph(g, e.config, p, which, g.constant(masks_tensor<T>({&mask})));
    const auto v = g.value(h).values();
    return {v.begin(), v.end()};
}

template <class T>
std::vector<T> project(const VLEncoders<T>& e, const std::string& which, const std::vector<T>& h) {
    require(h.size() == e.config.d,
            "project: expected h of length " + std::to_string(e.config.d) + ", got " + std::to_string(h.size()));
    Graph<T> g;
    auto p = nd::bind(g, e.params, false);
    Tensor<T> hv({1, h.size()});
    std::copy(h.begin(), h.end(), hv.data());
    const auto v = g.value(project_graph(g, p, which, g.constant(hv))).values();
    return {v.begin(), v.end()};
}

// Projected embeddings for a batch of (vessel, lobe) pairs: [N, proj_dim] each.
template <class T>
std::pair<Var, Var> embed_pairs(Graph<T>& g, const VLEncoders<T>& e, const Bound<T>& p,
                                const std::vector<const data::PhantomCase*>& cases) {
    std::vector<const data::Mask*> vm, lm;
    for (const auto* c : cases) {
        vm.push_back(&c->vessel_mask);
        lm.push_back(&c->lobe_mask);
    }
    Var zv = project_graph(g, p, "v", encode_graph(g, e.config, p, "v", g.constant(masks_tensor<T>(vm))));
    Var zl = project_graph(g, p, "l", encode_graph(g, e.config, p, "l", g.constant(masks_tensor<T>(lm))));
    return {zv, zl};
}

struct VLTrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    nd::AdamConfig adam{};
    bool center_init = true;
    bool cosine_decay = false;  // lr follows a half cosine from adam.lr to 0 over the epochs
};

// Data-dependent bias init: shifts head.w1.bias so the hidden pre-activations
// average zero over `cases`, then head.w2.bias so the projections do. Pooled
// mask features all share one dominant direction at init; without centering
// every pair starts near cosine 1 and the loss sits at log N for a long time.
template <class T>
void center_heads(VLEncoders<T>& e, const std::vector<const data::PhantomCase*>& cases) {
    for (const char* m : {"v", "l"}) {
        const std::string k = std::string(m) + ".head.";
        for (const char* layer : {"w1", "w2"}) {
            Graph<T> g;
            auto p = nd::bind(g, e.params, false);
            std::vector<const data::Mask*> masks;
            for (const auto* c : cases) masks.push_back(std::string(m) == "v" ? &c->vessel_mask : &c->lobe_mask);
            Var h = encode_graph(g, e.config, p, m, g.constant(masks_tensor<T>(masks)));
            if (std::string(layer) == "w2") h = g.relu(g.linear(h, p.at(k + "w1.weight"), p.at(k + "w1.bias")));
            const auto& out = g.value(g.linear(h, p.at(k + layer + ".weight"), p.at(k + layer + ".bias")));
            auto& bias = e.params.at(k + layer + ".bias");
            const std::size_t n = out.dim(0), w = out.dim(1);
            for (std::size_t j = 0; j < w; ++j) {
                double mean = 0.0;
                for (std::size_t i = 0; i < n; ++i) mean += static_cast<double>(out.at(i, j));
                bias[j] -= static_cast<T>(mean / static_cast<double>(n));
            }
        }
    }
}

struct VLTrainResult {
    std::vector<double> epoch_loss;  // mean batch loss per epoch
};

// Minibatch training over shuffled cases. Each epoch the order is reshuffled
// and split into batches of batch_size; a trailing batch of one case (which
// has no negatives) is merged into the previous batch.
template <class T>
VLTrainResult pretrain_vl(VLEncoders<T>& e, const std::vector<const data::PhantomCase*>& cases,
                          const VLTrainConfig& tc, std::uint64_t seed) {
    require_config(cases.size() >= 2, "pretrain_vl: need at least 2 cases for negatives, got " +
                                          std::to_string(cases.size()));
    require_config(tc.batch_size >= 2, "pretrain_vl: batch_size must be >= 2");
    if (tc.center_init) center_heads(e, cases);
    Rng rng(derive_seed(seed, 0x72));
    nd::AdamState<T> state;
    VLTrainResult r;
    std::vector<std::size_t> order(cases.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        shuffle(order, rng);
        std::vector<std::pair<std::size_t, std::size_t>> batches;
        for (std::size_t s = 0; s < order.size(); s += tc.batch_size)
            batches.emplace_back(s, std::min(order.size(), s + tc.batch_size));
        if (batches.size() > 1 && batches.back().second - batches.back().first < 2) {
            batches[batches.size() - 2].second = batches.back().second;
            batches.pop_back();
        }
        nd::AdamConfig adam = tc.adam;
        if (tc.cosine_decay)
            adam.lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(tc.epochs)));
        double total = 0.0;
        for (const auto& [b0, b1] : batches) {
            std::vector<const data::PhantomCase*> batch;
            for (std::size_t i = b0; i < b1; ++i) batch.push_back(cases[order[i]]);
            Graph<T> g;
            auto p = nd::bind(g, e.params, true);
            auto [zv, zl] = embed_pairs(g, e, p, batch);
            Var loss = nt_xent_graph(g, zv, zl, e.config.tau, e.config.symmetric);
            total += static_cast<double>(g.value(loss).item());
            nd::adam_step(e.params, g.backward(loss), state, adam);
        }
        r.epoch_loss.push_back(total / static_cast<double>(batches.size()));
    }
    return r;
}

}  // namespace immunodiff::vl
