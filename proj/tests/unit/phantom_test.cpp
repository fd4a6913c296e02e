#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "immunodiff/data/dataset_io.hpp"
#include "immunodiff/data/phantom.hpp"

using namespace immunodiff;
using namespace immunodiff::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("immunodiff_test_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST(Phantom, SameSeedSameCase) {
    PhantomConfig cfg;
    EXPECT_EQ(generate_case(7, cfg), generate_case(7, cfg));
    EXPECT_FALSE(generate_case(7, cfg) == generate_case(8, cfg));
}

TEST(Phantom, InvalidConfigRejected) {
    PhantomConfig cfg;
    cfg.height = 0;
    EXPECT_THROW(generate_case(1, cfg), ConfigError);
    EXPECT_THROW(generate_dataset(1, 4, PhantomConfig{}), ConfigError);
}

TEST(Phantom, CaseInvariantsHoldOverManySeeds) {
    PhantomConfig cfg;
    for (std::uint64_t s = 0; s < 300; ++s) {
        const auto c = generate_case(s, cfg);
        const auto& r = c.clinical;
        for (double v : {r.age, r.cea, r.anc, r.alc, r.nlr, r.aec, r.amc}) {
            ASSERT_TRUE(std::isfinite(v));
            ASSERT_GT(v, 0.0);
        }
        ASSERT_NEAR(r.nlr, r.anc / r.alc, 1e-9);
        for (const auto* m : {&c.vessel_mask, &c.lobe_mask, &c.tumor_mask_pre, &c.tumor_mask_post})
            ASSERT_EQ(m->shape(), c.pre_image.shape());
        ASSERT_EQ(c.post_image.shape(), c.pre_image.shape());
        ASSERT_TRUE(mask_within(c.tumor_mask_pre, c.lobe_mask)) << "seed " << s;
        ASSERT_TRUE(mask_within(c.vessel_mask, c.lobe_mask)) << "seed " << s;
        ASSERT_EQ(c.responder, responder_rule(r));
        const bool shrank = mask_area(c.tumor_mask_post) < mask_area(c.tumor_mask_pre);
        ASSERT_EQ(c.responder, shrank) << "seed " << s;
        ASSERT_GT(c.survival_time, 0.0);
    }
}

TEST(Phantom, HighPdl1LowNlrResponds) {
    ClinicalRecord r;
    r.pdl1 = Pdl1::AtLeast50;
    r.alc = clinical_dist::alc.median;
    r.anc = r.alc * 0.5;
    r.nlr = r.anc / r.alc;
    // score = 0.9 * 2 - 0.8 * z(nlr) + 0.3 * z(alc); z(nlr) < 0 here
    const double z_nlr = (r.nlr - clinical_dist::nlr.mean()) / clinical_dist::nlr.stddev();
    const double z_alc = (r.alc - clinical_dist::alc.mean()) / clinical_dist::alc.stddev();
    EXPECT_NEAR(response_score(r), 1.8 - 0.8 * z_nlr + 0.3 * z_alc, 1e-12);
    EXPECT_TRUE(responder_rule(r));
}

TEST(Phantom, ResponderCountMatchesFraction) {
    PhantomConfig cfg;
    const auto ds = generate_dataset(1, 74, cfg);
    std::size_t resp = 0;
    for (const auto& c : ds.cases) resp += c.responder;
    EXPECT_TRUE(resp == 19 || resp == 20) << resp;
}

TEST(Phantom, FoldsPartitionCases) {
    PhantomConfig cfg;
    const auto ds = generate_dataset(3, 10, cfg);
    ASSERT_EQ(ds.manifest.splits.size(), 5u);
    std::set<std::string> seen;
    for (const auto& [fold, ids] : ds.manifest.splits) {
        EXPECT_EQ(ids.size(), 2u);
        for (const auto& id : ids) EXPECT_TRUE(seen.insert(id).second) << id << " in two folds";
    }
    std::set<std::string> all;
    for (const auto& c : ds.cases) all.insert(c.case_id);
    EXPECT_EQ(seen, all);
}

TEST(Phantom, DatasetIsPureFunctionOfSeed) {
    PhantomConfig cfg;
    const auto a = generate_dataset(5, 12, cfg);
    const auto b = generate_dataset(5, 12, cfg);
    EXPECT_EQ(a.manifest, b.manifest);
    EXPECT_EQ(a.cases, b.cases);
}

// Logistic regression on (pdl1_ord, nlr, alc), 80/20 split.
TEST(Phantom, ResponderRuleIsLinearlyDecodable) {
    PhantomConfig cfg;
    cfg.height = cfg.width = 16;
    const auto ds = generate_dataset(11, 250, cfg);
    std::vector<std::array<double, 4>> x;
    std::vector<int> y;
    for (const auto& c : ds.cases) {
        x.push_back({1.0, static_cast<double>(pdl1_ordinal(c.clinical.pdl1)), c.clinical.nlr, c.clinical.alc});
        y.push_back(c.responder);
    }
    const std::size_t n_train = x.size() * 4 / 5;
    std::array<double, 4> mean{}, sd{};
    for (std::size_t i = 0; i < n_train; ++i)
        for (int j = 1; j < 4; ++j) mean[j] += x[i][j] / static_cast<double>(n_train);
    for (std::size_t i = 0; i < n_train; ++i)
        for (int j = 1; j < 4; ++j) sd[j] += (x[i][j] - mean[j]) * (x[i][j] - mean[j]) / static_cast<double>(n_train);
    for (auto& r : x)
        for (int j = 1; j < 4; ++j) r[j] = (r[j] - mean[j]) / std::sqrt(sd[j]);
    std::array<double, 4> w{};
    for (int it = 0; it < 5000; ++it) {
        std::array<double, 4> g{};
        for (std::size_t i = 0; i < n_train; ++i) {
            double z = 0;
            for (int j = 0; j < 4; ++j) z += w[j] * x[i][j];
            const double p = 1.0 / (1.0 + std::exp(-z));
            for (int j = 0; j < 4; ++j) g[j] += (p - y[i]) * x[i][j];
        }
        for (int j = 0; j < 4; ++j) w[j] -= 0.5 * g[j] / static_cast<double>(n_train);
    }
    std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
    for (std::size_t i = n_train; i < x.size(); ++i) {
        double z = 0;
        for (int j = 0; j < 4; ++j) z += w[j] * x[i][j];
        const bool pred = z > 0;
        if (y[i]) ++(pred ? tp : fn);
        else ++(pred ? fp : tn);
    }
    ASSERT_GT(tp + fn, 0u);
    ASSERT_GT(tn + fp, 0u);
    const double bal = 0.5 * (static_cast<double>(tp) / (tp + fn) + static_cast<double>(tn) / (tn + fp));
    EXPECT_GE(bal, 0.95);
}

TEST(DatasetIo, RoundTrip) {
    PhantomConfig cfg;
    const auto ds = generate_dataset(2, 8, cfg);
    const auto dir = scratch("roundtrip");
    persist_dataset(ds, dir);
    const auto back = load_dataset(dir);
    EXPECT_EQ(back.manifest, ds.manifest);
    ASSERT_EQ(back.cases.size(), ds.cases.size());
    for (std::size_t i = 0; i < ds.cases.size(); ++i) EXPECT_EQ(back.cases[i], ds.cases[i]) << ds.cases[i].case_id;
    fs::remove_all(dir);
}

TEST(DatasetIo, MissingImageNamesCase) {
    PhantomConfig cfg;
    const auto ds = generate_dataset(2, 6, cfg);
    const auto dir = scratch("missing");
    persist_dataset(ds, dir);
    fs::remove(case_tensor_path(dir, "case_0003", "pre_image"));
    try {
        load_dataset(dir);
        FAIL() << "expected an integrity error";
    } catch (const IntegrityError& e) {
        EXPECT_NE(std::string(e.what()).find("case_0003"), std::string::npos) << e.what();
    }
    fs::remove_all(dir);
}

TEST(DatasetIo, EmptyDirectoryIsIoError) {
    const auto dir = scratch("empty");
    fs::create_directories(dir);
    EXPECT_THROW(load_dataset(dir), IoError);
    fs::remove_all(dir);
}
