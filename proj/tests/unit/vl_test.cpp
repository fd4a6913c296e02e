#include <gtest/gtest.h>

#include <cmath>

#include "common/gradient_cases.hpp"
#include "immunodiff/data/phantom.hpp"
#include "immunodiff/vl/contrastive.hpp"

using namespace immunodiff;
using namespace immunodiff::vl;
using Vecs = std::vector<std::vector<double>>;

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

// Straight from the formula, v anchors, positive kept in the denominator.
double brute_force(const Vecs& zv, const Vecs& zl, double tau) {
    double total = 0;
    for (std::size_t i = 0; i < zv.size(); ++i) {
        double denom = 0;
        for (std::size_t k = 0; k < zl.size(); ++k) denom += std::exp(cosine(zv[i], zl[k]) / tau);
        total += -std::log(std::exp(cosine(zv[i], zl[i]) / tau) / denom);
    }
    return total / static_cast<double>(zv.size());
}

Vecs random_vecs(std::size_t n, std::size_t k, Rng& rng) {
    Vecs out(n, std::vector<double>(k));
    for (auto& v : out)
        for (auto& x : v) x = rng.normal();
    return out;
}

std::vector<data::PhantomCase> small_cases(std::size_t n, std::uint64_t seed) {
    data::PhantomConfig pc;
    pc.height = pc.width = 16;
    return data::generate_dataset(seed, n, pc).cases;
}

VLConfig small_vl() {
    VLConfig c;
    c.height = c.width = 16;
    c.blocks = 2;
    c.d = 32;
    c.proj_dim = 16;
    return c;
}

}  // namespace

TEST(NtXent, SinglePairIsZero) {
    EXPECT_NEAR(nt_xent_vl({{1, 2, 3}}, {{-1, 0, 4}}, 0.5), 0.0, 1e-15);
}

TEST(NtXent, IdenticalEmbeddingsGiveLogN) {
    for (std::size_t n : {2u, 3u, 4u, 7u}) {
        Vecs z(n, std::vector<double>{0.3, -1.2, 0.5});
        for (double tau : {0.1, 0.5, 2.0}) EXPECT_NEAR(nt_xent_vl(z, z, tau), std::log(static_cast<double>(n)), 1e-12);
    }
}

TEST(NtXent, OrthonormalPairs) {
    const double expect = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
    EXPECT_NEAR(nt_xent_vl({{1, 0}, {0, 1}}, {{1, 0}, {0, 1}}, 0.5), expect, 1e-12);
    EXPECT_NEAR(expect, 0.1269, 1e-4);
}

TEST(NtXent, MatchesBruteForceForSmallN) {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(4), k = 2 + rng.below(5);
        const double tau = 0.05 + rng.uniform(0.0, 2.0);
        const auto zv = random_vecs(n, k, rng), zl = random_vecs(n, k, rng);
        ASSERT_NEAR(nt_xent_vl(zv, zl, tau), brute_force(zv, zl, tau), 1e-6);
    }
}

TEST(NtXent, ScaleInvariant) {
    Rng rng(3);
    auto zv = random_vecs(4, 5, rng), zl = random_vecs(4, 5, rng);
    const double base = nt_xent_vl(zv, zl, 0.5);
    for (auto& x : zv[2]) x *= 7.5;
    for (auto& x : zl[0]) x *= 0.01;
    EXPECT_NEAR(nt_xent_vl(zv, zl, 0.5), base, 1e-12);
}

TEST(NtXent, ZeroNormRejected) {
    EXPECT_THROW(nt_xent_vl({{0, 0}, {1, 0}}, {{1, 0}, {0, 1}}, 0.5), ContractError);
}

TEST(Encoder, ZeroMaskZeroBiasGivesZero) {
    auto e = init_vl<double>(small_vl(), 1);
    data::Mask empty({16, 16});
    for (double v : encode_mask(e, "v", empty)) EXPECT_EQ(v, 0.0);
    data::Mask bad({8, 16});
    EXPECT_THROW(encode_mask(e, "v", bad), ContractError);
}

TEST(Encoder, SameMaskSameEmbedding) {
    const auto cs = small_cases(5, 2);
    auto e = init_vl<double>(small_vl(), 1);
    EXPECT_EQ(encode_mask(e, "l", cs[0].lobe_mask), encode_mask(e, "l", cs[0].lobe_mask));
}

// 2x2 mask [[1,0],[0,1]], one 3x3 conv, ReLU, global mean.
// Kernel: center 1, right 2, below -3, below-right 0.5; bias 0.1.
//   (0,0): 1 + 0.5 + 0.1 = 1.6   (0,1): -3 + 0.1 -> 0
//   (1,0): 2 + 0.1 = 2.1         (1,1): 1 + 0.1 = 1.1     mean 1.2
TEST(Encoder, ToyConvByHand) {
    VLConfig c;
    c.height = c.width = 2;
    c.blocks = 1;
    c.d = 1;
    c.proj_dim = 1;
    c.coord_channels = false;
    auto e = init_vl<double>(c, 1);
    e.params["v.enc.conv0.weight"] = nd::Tensor<double>({1, 1, 3, 3}, {0, 0, 0, 0, 1, 2, 0, -3, 0.5});
    e.params["v.enc.conv0.bias"] = nd::Tensor<double>({1}, {0.1});
    data::Mask m({2, 2}, {1, 0, 0, 1});
    const auto h = encode_mask(e, "v", m);
    ASSERT_EQ(h.size(), 1u);
    EXPECT_NEAR(h[0], 1.2, 1e-12);
}

TEST(Head, ZeroInputZeroBias) {
    VLConfig c = small_vl();
    auto e = init_vl<double>(c, 2);
    for (double v : project(e, "l", std::vector<double>(c.d, 0.0))) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(project(e, "l", std::vector<double>(c.d + 1)), ContractError);
}

TEST(Head, IdentityWeightsClipNegatives) {
    VLConfig c = small_vl();
    c.d = c.proj_dim = 3;
    auto e = init_vl<double>(c, 2);
    nd::Tensor<double> eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    e.params["v.head.w1.weight"] = eye;
    e.params["v.head.w2.weight"] = eye;
    EXPECT_EQ(project(e, "v", std::vector<double>{1.5, -2.0, 0.25}), (std::vector<double>{1.5, 0.0, 0.25}));
}

TEST(Head, MatchesMatrixArithmetic) {
    VLConfig c = small_vl();
    c.d = c.proj_dim = 3;
    auto e = init_vl<double>(c, 5);
    Rng rng(8);
    for (const char* k : {"v.head.w1.bias", "v.head.w2.bias"})
        for (auto& x : e.params[k].values()) x = rng.normal();
    const std::vector<double> h{0.4, -1.1, 2.0};
    const auto& w1 = e.params["v.head.w1.weight"];
    const auto& b1 = e.params["v.head.w1.bias"];
    const auto& w2 = e.params["v.head.w2.weight"];
    const auto& b2 = e.params["v.head.w2.bias"];
    std::vector<double> a(3), z(3);
    for (int i = 0; i < 3; ++i) {
        a[i] = b1[i];
        for (int j = 0; j < 3; ++j) a[i] += w1.at(i, j) * h[j];
        a[i] = std::max(0.0, a[i]);
    }
    for (int i = 0; i < 3; ++i) {
        z[i] = b2[i];
        for (int j = 0; j < 3; ++j) z[i] += w2.at(i, j) * a[j];
    }
    const auto got = project(e, "v", h);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(got[i], z[i], 1e-12);
}

TEST(Pretrain, NeedsTwoCases) {
    const auto cs = small_cases(5, 1);
    auto e = init_vl<double>(small_vl(), 1);
    EXPECT_THROW(pretrain_vl(e, {&cs[0]}, VLTrainConfig{}, 1), ConfigError);
}

TEST(Pretrain, LossFallsAndAligns) {
    const auto cs = small_cases(16, 3);
    std::vector<const data::PhantomCase*> ptr;
    for (const auto& c : cs) ptr.push_back(&c);
    VLTrainConfig tc;
    tc.epochs = 40;
    tc.batch_size = 8;
    tc.adam.lr = 1e-3;
    auto e = init_vl<float>(small_vl(), 4);
    const auto r = pretrain_vl(e, ptr, tc, 9);
    ASSERT_EQ(r.epoch_loss.size(), 40u);
    EXPECT_LT(r.epoch_loss[20], r.epoch_loss[0]);

    Vecs zv, zl;
    for (const auto* c : ptr) {
        auto v = project(e, "v", encode_mask(e, "v", c->vessel_mask));
        auto l = project(e, "l", encode_mask(e, "l", c->lobe_mask));
        zv.emplace_back(v.begin(), v.end());
        zl.emplace_back(l.begin(), l.end());
    }
    double matched = 0, mismatched = 0;
    for (std::size_t i = 0; i < zv.size(); ++i)
        for (std::size_t j = 0; j < zl.size(); ++j) (i == j ? matched : mismatched) += cosine(zv[i], zl[j]);
    const double n = static_cast<double>(zv.size());
    EXPECT_GT(matched / n, mismatched / (n * (n - 1)));
}

TEST(Pretrain, SameSeedSameCurve) {
    const auto cs = small_cases(6, 3);
    std::vector<const data::PhantomCase*> ptr;
    for (const auto& c : cs) ptr.push_back(&c);
    VLTrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 4;
    tc.adam.lr = 1e-3;
    auto a = init_vl<float>(small_vl(), 4), b = init_vl<float>(small_vl(), 4);
    EXPECT_EQ(pretrain_vl(a, ptr, tc, 2).epoch_loss, pretrain_vl(b, ptr, tc, 2).epoch_loss);
    EXPECT_EQ(nd::hash_store(a.params), nd::hash_store(b.params));
}

TEST(Pretrain, DuplicatedPatientAtCoincidingEmbeddingsIsLogN) {
    const auto cs = small_cases(5, 6);
    std::vector<const data::PhantomCase*> dup(4, &cs[0]);
    auto e = init_vl<double>(small_vl(), 4);
    nd::Graph<double> g;
    auto p = nd::bind(g, e.params, false);
    auto [zv, zl] = embed_pairs(g, e, p, dup);
    const double loss = g.value(nt_xent_graph(g, zv, zl, 0.5)).item();
    // every v_i sees the same l_k for all k
    EXPECT_NEAR(loss, std::log(4.0), 1e-12);
}
