#include <gtest/gtest.h>

#include <cmath>

#include "common/gradient_cases.hpp"
#include "immunodiff/cbi/adapter.hpp"
#include "immunodiff/pipeline/config.hpp"

using namespace immunodiff;
using namespace immunodiff::cbi;
using nd::Graph;
using nd::Tensor;
using nd::Var;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

std::vector<double> randv(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

Tensor<double> row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor<double>({1, n}, std::move(v));
}

}  // namespace

TEST(Rope, ThetaValues) {
    const auto t = nd::make_rope_table(8);
    ASSERT_EQ(t.theta.size(), 2u);  // l = 8/4 - 1 = 1
    EXPECT_EQ(t.theta[0], 1.0);
    EXPECT_NEAR(t.theta[1], std::pow(1e5, -1.0 / 8.0), 1e-15);
    EXPECT_NEAR(t.theta[1], 0.23714, 1e-5);
    const auto big = nd::make_rope_table(64);
    ASSERT_EQ(big.theta.size(), 16u);
    for (std::size_t i = 0; i < big.theta.size(); ++i) {
        EXPECT_NEAR(big.theta[i], std::pow(1e5, -static_cast<double>(i) / 64.0), 1e-6);
        if (i) EXPECT_LT(big.theta[i], big.theta[i - 1]);
    }
    EXPECT_THROW(nd::make_rope_table(6), ContractError);
}

TEST(Rope, ZeroPositionIsIdentity) {
    Rng rng(1);
    const auto t = nd::make_rope_table(16);
    for (int i = 0; i < 20; ++i) {
        const auto f = randv(16, rng);
        EXPECT_EQ(rope_apply(f, 0.0, 0.0, t), f);
    }
}

TEST(Rope, UnitVectorAtOne) {
    const auto t = nd::make_rope_table(4);
    const auto out = rope_apply(std::vector<double>{1, 0, 0, 0}, 1.0, 0.0, t);
    EXPECT_NEAR(out[0], std::cos(1.0), 1e-15);
    EXPECT_NEAR(out[1], std::sin(1.0), 1e-15);
    EXPECT_NEAR(out[0], 0.5403, 1e-4);
    EXPECT_NEAR(out[1], 0.8415, 1e-4);
    EXPECT_EQ(out[2], 0.0);
    EXPECT_EQ(out[3], 0.0);
    EXPECT_THROW(rope_apply(std::vector<double>(5), 1.0, 0.0, t), ContractError);
}

TEST(Rope, NormPreserved) {
    Rng rng(2);
    const auto t = nd::make_rope_table(64);
    for (int i = 0; i < 100; ++i) {
        const auto f = randv(64, rng);
        const auto out = rope_apply(f, rng.uniform(-50, 50), rng.uniform(-50, 50), t);
        EXPECT_NEAR(norm(out), norm(f), 1e-6 * norm(f));
    }
}

TEST(Rope, InnerProductDependsOnOffsetOnly) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 4 * (1 + rng.below(8));
        const auto t = nd::make_rope_table(d);
        const auto q = randv(d, rng), k = randv(d, rng);
        const double mh = rng.range(-20, 20), nh = rng.range(-20, 20), mw = rng.range(-20, 20), nw = rng.range(-20, 20);
        const double sh = rng.range(-50, 50), sw = rng.range(-50, 50);
        const double a = dot(rope_apply(q, mh, mw, t), rope_apply(k, nh, nw, t));
        const double b = dot(rope_apply(q, mh + sh, mw + sw, t), rope_apply(k, nh + sh, nw + sw, t));
        ASSERT_NEAR(a, b, 1e-9 * (1 + std::abs(a))) << trial;
    }
}

TEST(Attention, TwoTokenToy) {
    Graph<double> g;
    Var q = g.constant(row({1, 0}));
    std::vector<Var> kv{g.constant(row({1, 0})), g.constant(row({0, 1}))};
    auto a = attend(g, q, kv, kv);
    const double w0 = std::exp(1 / std::sqrt(2.0)) / (std::exp(1 / std::sqrt(2.0)) + 1);
    EXPECT_NEAR(g.value(a.weights)[0], w0, 1e-12);
    EXPECT_NEAR(g.value(a.weights)[0], 0.6698, 1e-4);
    EXPECT_NEAR(g.value(a.weights)[1], 0.3302, 1e-4);
    EXPECT_NEAR(g.value(a.out)[0], w0, 1e-12);
    EXPECT_NEAR(g.value(a.out)[1], 1 - w0, 1e-12);
}

TEST(Attention, SingleKeyReturnsItsValue) {
    Rng rng(4);
    Graph<double> g;
    Var q = g.constant(gradcheck::randn({3, 8}, rng));
    std::vector<Var> keys, values;
    for (int j = 0; j < 4; ++j) {
        keys.push_back(g.constant(gradcheck::randn({3, 8}, rng)));
        values.push_back(g.constant(gradcheck::randn({3, 8}, rng)));
    }
    auto a = attend(g, q, keys, values, {false, false, true, false});
    EXPECT_EQ(g.value(a.out), g.value(values[2]));
    auto full = attend(g, q, keys, values);
    const auto& w = g.value(full.weights);
    for (std::size_t i = 0; i < 3; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 4; ++j) {
            EXPECT_GE(w.at(i, j), 0.0);
            s += w.at(i, j);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    EXPECT_THROW(attend(g, q, {g.constant(gradcheck::randn({3, 4}, rng))}, {g.constant(gradcheck::randn({3, 4}, rng))}),
                 ContractError);
}

TEST(Clinical, EncodingIdentities) {
    const auto s = gradcheck::all_levels_norm();
    data::ClinicalRecord r;
    r.age = s.age_mean + 2 * s.age_std;
    r.cea = s.blood_mean[0];
    r.anc = s.blood_mean[1];
    r.alc = s.blood_mean[2];
    r.nlr = s.blood_mean[3];
    r.aec = s.blood_mean[4];
    r.amc = s.blood_mean[5];
    const auto e = encode_clinical(r, s);
    EXPECT_EQ(e.demo[0], 2.0);
    for (double v : e.blood) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(e.demo.size(), kDemoWidth);
    EXPECT_EQ(e.pdl1, (std::vector<double>{1, 0, 0}));
    const auto e2 = encode_clinical(r, s);
    EXPECT_EQ(e.demo, e2.demo);
    EXPECT_EQ(e.blood, e2.blood);
}

TEST(Clinical, UnseenLevelIsEncodingError) {
    auto s = gradcheck::all_levels_norm();
    s.pdl1s.erase(data::Pdl1::AtLeast50);
    data::ClinicalRecord r;
    r.pdl1 = data::Pdl1::AtLeast50;
    EXPECT_THROW(encode_clinical(r, s), EncodingError);
}

TEST(Clinical, NormStatsFromTrainingRecords) {
    Rng rng(5);
    std::vector<data::ClinicalRecord> recs;
    for (int i = 0; i < 10; ++i) recs.push_back(gradcheck::random_record(rng));
    std::vector<const data::ClinicalRecord*> ptr;
    for (const auto& r : recs) ptr.push_back(&r);
    const auto s = fit_norm_stats(ptr);
    double m = 0;
    for (const auto& r : recs) m += r.age;
    EXPECT_NEAR(s.age_mean, m / 10, 1e-12);
    double z = 0;
    for (const auto& r : recs) z += encode_clinical(r, s).blood[3];
    EXPECT_NEAR(z, 0.0, 1e-10);
}

TEST(ImageEmbedding, ZeroImageZeroBias) {
    auto a = init_adapter<double>(gradcheck::tiny_adapter(), gradcheck::all_levels_norm(), 1);
    Graph<double> g;
    auto p = nd::bind(g, a.params, false);
    Var z = embed_pretreatment_graph(g, a.config, p, g.constant(Tensor<double>({2, 1, 8, 8})));
    EXPECT_EQ(g.value(z).shape(), (nd::Shape{2, 8}));
    for (double v : g.value(z).values()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(embed_pretreatment_graph(g, a.config, p, g.constant(Tensor<double>({1, 2, 8, 8}))), ContractError);
}

TEST(Fusion, HandExample) {
    const auto c = fuse_condition({1, 0}, {2, 2}, {2, 2}, {2, 2}, 0.05);
    EXPECT_NEAR(c[0], 1.3, 1e-15);
    EXPECT_NEAR(c[1], 0.3, 1e-15);
    EXPECT_EQ(fuse_condition({1, -4}, {2, 2}, {7, 2}, {2, 9}, 0.0), (std::vector<double>{1, -4}));
    EXPECT_THROW(fuse_condition({1, 0}, {2}, {2, 2}, {2, 2}), ContractError);
}

TEST(Fusion, DefaultLambda) {
    EXPECT_EQ(AdapterConfig{}.lambda, 5e-2);
    EXPECT_EQ(pipeline::RunConfig{}.adapter.lambda, 5e-2);
    EXPECT_EQ(pipeline::config_from_json(nlohmann::json::object()).adapter.lambda, 5e-2);
}

TEST(Fusion, BundleContractOnRandomInputs) {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        auto ac = gradcheck::tiny_adapter();
        ac.lambda = trial == 0 ? 0.0 : rng.uniform(0.0, 1.0);
        auto a = init_adapter<double>(ac, gradcheck::all_levels_norm(), trial);
        gradcheck::jitter(a.params, rng, 0.2);
        data::Image pre({8, 8});
        for (auto& v : pre.values()) v = rng.uniform();
        const auto b = make_bundle(a, pre, gradcheck::random_record(rng));
        ASSERT_EQ(b.c_hat.size(), 8u);
        const auto ref = fuse_condition(b.z_img_hat, b.z_c_hat, b.z_b_hat, b.z_i_hat, ac.lambda);
        for (std::size_t k = 0; k < 8; ++k) ASSERT_NEAR(b.c_hat[k], ref[k], 1e-12);
        if (trial == 0) EXPECT_EQ(b.c_hat, b.z_img_hat);
    }
}

TEST(Fusion, LambdaContinuity) {
    Rng rng(7);
    auto a = init_adapter<double>(gradcheck::tiny_adapter(), gradcheck::all_levels_norm(), 3);
    data::Image pre({8, 8});
    for (auto& v : pre.values()) v = rng.uniform();
    const auto rec = gradcheck::random_record(rng);
    const auto b = make_bundle(a, pre, rec);
    std::vector<double> sum(8);
    for (std::size_t k = 0; k < 8; ++k) sum[k] = b.z_c_hat[k] + b.z_b_hat[k] + b.z_i_hat[k];
    for (double lam : {1e-1, 1e-2, 1e-3, 1e-4}) {
        a.config.lambda = lam;
        const auto bl = make_bundle(a, pre, rec);
        std::vector<double> diff(8);
        for (std::size_t k = 0; k < 8; ++k) diff[k] = bl.c_hat[k] - bl.z_img_hat[k];
        EXPECT_NEAR(norm(diff), lam * norm(sum), 1e-12);
    }
}

TEST(Variants, FlagsChangeTheGraph) {
    Rng rng(8);
    data::Image pre({8, 8});
    for (auto& v : pre.values()) v = rng.uniform();
    const auto rec = gradcheck::random_record(rng);
    auto ac = gradcheck::tiny_adapter();
    ac.literal_product = true;
    const auto lit = make_bundle(init_adapter<double>(ac, gradcheck::all_levels_norm(), 1), pre, rec);
    EXPECT_EQ(lit.z_c_hat, lit.z_b_hat);
    EXPECT_EQ(lit.z_b_hat, lit.z_i_hat);
    const auto std_bundle = make_bundle(init_adapter<double>(gradcheck::tiny_adapter(), gradcheck::all_levels_norm(), 1), pre, rec);
    EXPECT_NE(std_bundle.z_c_hat, std_bundle.z_b_hat);
    ac = gradcheck::tiny_adapter();
    ac.rope_on_values = false;
    EXPECT_NE(make_bundle(init_adapter<double>(ac, gradcheck::all_levels_norm(), 1), pre, rec).z_c_hat, std_bundle.z_c_hat);
    ac = gradcheck::tiny_adapter();
    ac.image_bypass = true;
    const auto by = make_bundle(init_adapter<double>(ac, gradcheck::all_levels_norm(), 1), pre, rec);
    EXPECT_EQ(by.z_img_hat, std_bundle.z_img_hat);
    EXPECT_NE(by.z_c_hat, std_bundle.z_c_hat);
}

TEST(Variants, GradientsMatchWithAllFlagsFlipped) {
    auto ac = gradcheck::tiny_adapter();
    ac.literal_product = true;
    ac.image_bypass = true;
    ac.rope_on_values = false;
    const auto rep = gradcheck::cbi_loss(3, ac);
    EXPECT_LT(rep.worst(), 1e-4);
}

TEST(Stage2, LocksBaseAndGeneratesDeterministically) {
    data::PhantomConfig pc;
    pc.height = pc.width = 16;
    const auto ds = data::generate_dataset(3, 8, pc);
    auto c = gradcheck::tiny_denoiser();
    c.height = c.width = 16;
    c.timesteps = 10;
    const auto base = nd::init_denoiser<float>(c, 1);
    const auto base_hash = nd::hash_store(base.params);
    const auto stage1 = control::make_controlled(base, 4, 2);
    std::vector<const data::ClinicalRecord*> recs;
    for (const auto& cs : ds.cases) recs.push_back(&cs.clinical);
    auto adapter = init_adapter<float>(gradcheck::tiny_adapter(), fit_norm_stats(recs), 3);
    auto m = make_stage2(stage1, adapter, 4);
    CondInputs<float> in;
    std::vector<Tensor<float>> targets;
    for (const auto& cs : ds.cases) {
        in.z0.push_back(to_model_space<float>(cs.pre_image));
        in.raw.push_back(encode_clinical(cs.clinical, m.adapter.norm));
        targets.push_back(to_model_space<float>(cs.post_image));
    }
    diffusion::DiffusionTrainConfig tc;
    tc.steps = 10;
    tc.batch_size = 4;
    tc.adam.lr = 1e-3;
    const auto s = diffusion::make_schedule(c.timesteps);
    const auto adapter_before = nd::hash_store(m.adapter.params);
    const auto curve = train_stage2(m, s, targets, in, tc, 5);
    EXPECT_EQ(curve.step_loss.size(), 10u);
    EXPECT_EQ(nd::hash_store(m.cd.base.params), base_hash);
    EXPECT_NE(nd::hash_store(m.adapter.params), adapter_before);

    const auto& cs = ds.cases[0];
    const auto a = generate_posttreatment(m, cs.pre_image, cs.clinical, s, 11);
    EXPECT_EQ(a.shape(), cs.pre_image.shape());
    EXPECT_EQ(a, generate_posttreatment(m, cs.pre_image, cs.clinical, s, 11));
    EXPECT_TRUE(a.all_finite());
}

TEST(Stage2, MissingStage1IsConfigError) {
    Stage2Model<float> m;
    CondInputs<float> in;
    EXPECT_THROW(train_stage2(m, diffusion::make_schedule(10), {}, in, {}, 1), ConfigError);
}
