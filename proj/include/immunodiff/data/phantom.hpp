#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numbers>
#include <string>
#include <tuple>
#include <vector>

#include "immunodiff/core/error.hpp"
#include "immunodiff/core/rng.hpp"
#include "immunodiff/nd/tensor.hpp"

namespace immunodiff::data {

using Image = nd::Tensor<double>;        // [H, W], intensities in [0, 1]
using Mask = nd::Tensor<std::uint8_t>;   // [H, W], values 0 / 1

enum class Sex { M, F };
enum class Race { White, Black, Asian, Other };
enum class Pdl1 { Below1, From1To49, AtLeast50 };

inline constexpr std::array<Sex, 2> kSexLevels{Sex::M, Sex::F};
inline constexpr std::array<Race, 4> kRaceLevels{Race::White, Race::Black, Race::Asian, Race::Other};
inline constexpr std::array<Pdl1, 3> kPdl1Levels{Pdl1::Below1, Pdl1::From1To49, Pdl1::AtLeast50};

inline std::string to_string(Sex s) { return s == Sex::M ? "M" : "F"; }
inline std::string to_string(Race r) {
    switch (r) {
        case Race::White: return "White";
        case Race::Black: return "Black";
        case Race::Asian: return "Asian";
        case Race::Other: return "Other";
    }
    return "?";
}
inline std::string to_string(Pdl1 p) {
    switch (p) {
        case Pdl1::Below1: return "<1%";
        case Pdl1::From1To49: return "1-49%";
        case Pdl1::AtLeast50: return ">=50%";
    }
    return "?";
}

inline Sex parse_sex(const std::string& s) {
    for (Sex v : kSexLevels)
        if (to_string(v) == s) return v;
    throw EncodingError("unknown sex level '" + s + "'");
}
inline Race parse_race(const std::string& s) {
    for (Race v : kRaceLevels)
        if (to_string(v) == s) return v;
    throw EncodingError("unknown race level '" + s + "'");
}
inline Pdl1 parse_pdl1(const std::string& s) {
    for (Pdl1 v : kPdl1Levels)
        if (to_string(v) == s) return v;
    throw EncodingError("unknown PD-L1 level '" + s + "'");
}

inline int pdl1_ordinal(Pdl1 p) { return static_cast<int>(p); }

// Units: age in years; CEA ng/mL; ANC, ALC, AEC, AMC in 10^3/uL.
struct ClinicalRecord {
    double age = 0;
    Sex sex = Sex::M;
    Race race = Race::White;
    double cea = 0;
    double anc = 0;
    double alc = 0;
    double nlr = 0;  // anc / alc
    double aec = 0;
    double amc = 0;
    Pdl1 pdl1 = Pdl1::Below1;

    friend bool operator==(const ClinicalRecord&, const ClinicalRecord&) = default;
};

struct PhantomCase {
    std::string case_id;
    Image pre_image;
    Image post_image;
    Mask vessel_mask;
    Mask lobe_mask;
    Mask tumor_mask_pre;
    Mask tumor_mask_post;
    ClinicalRecord clinical;
    bool responder = false;
    double survival_time = 0;
    bool event = false;

    friend bool operator==(const PhantomCase&, const PhantomCase&) = default;
};

struct PhantomConfig {
    std::size_t height = 32;
    std::size_t width = 32;
    double responder_fraction = 19.0 / 74.0;
    std::size_t n_folds = 5;
    double noise_sigma = 0.02;

    void validate() const {
        require_config(height >= 16 && width >= 16, "phantom: image size must be at least 16x16, got " +
                                                        std::to_string(height) + "x" + std::to_string(width));
        require_config(responder_fraction > 0.0 && responder_fraction < 1.0,
                       "phantom: responder_fraction must lie in (0, 1)");
        require_config(n_folds >= 2, "phantom: n_folds must be >= 2");
        require_config(noise_sigma >= 0.0, "phantom: noise_sigma must be non-negative");
    }
};

// Log-normal draw parameters: value = median * exp(sigma * N(0, 1)).
struct LogNormal {
    double median;
    double sigma;
    double mean() const { return median * std::exp(0.5 * sigma * sigma); }
    double stddev() const { return mean() * std::sqrt(std::exp(sigma * sigma) - 1.0); }
};

namespace clinical_dist {
inline constexpr LogNormal age{64.0, 0.12};
inline constexpr LogNormal cea{3.0, 0.8};
inline constexpr LogNormal anc{4.5, 0.35};
inline constexpr LogNormal alc{1.5, 0.35};
inline constexpr LogNormal aec{0.15, 0.5};
inline constexpr LogNormal amc{0.5, 0.3};
// anc / alc of independent log-normals is log-normal.
inline const LogNormal nlr{anc.median / alc.median, std::sqrt(anc.sigma * anc.sigma + alc.sigma * alc.sigma)};
inline constexpr double p_female = 0.5;
inline constexpr std::array<double, 4> race_probs{0.6, 0.2, 0.1, 0.1};
inline constexpr std::array<double, 3> pdl1_probs{0.35, 0.35, 0.30};
}  // namespace clinical_dist

// Intensities of the rendered tissue classes (before additive noise).
namespace intensity {
inline constexpr double background = 0.55;
inline constexpr double lobe = 0.15;
inline constexpr double vessel = 0.6;
inline constexpr double tumor = 0.9;
}  // namespace intensity

// Noise-free response score; responder iff sigmoid(score) > 0.5, i.e. score > 0.
//   score = 0.9 * pdl1_ord - 0.8 * z(nlr) + 0.3 * z(alc)
// z() standardizes with the generating distribution's population moments.
inline double response_score(const ClinicalRecord& r) {
    const double z_nlr = (r.nlr - clinical_dist::nlr.mean()) / clinical_dist::nlr.stddev();
    const double z_alc = (r.alc - clinical_dist::alc.mean()) / clinical_dist::alc.stddev();
    return 0.9 * pdl1_ordinal(r.pdl1) - 0.8 * z_nlr + 0.3 * z_alc;
}

inline bool responder_rule(const ClinicalRecord& r) { return 1.0 / (1.0 + std::exp(-response_score(r))) > 0.5; }

inline ClinicalRecord draw_clinical(std::uint64_t stream_seed) {
    Rng rng(stream_seed);
    ClinicalRecord r;
    r.age = rng.lognormal(clinical_dist::age.median, clinical_dist::age.sigma);
    r.sex = rng.bernoulli(clinical_dist::p_female) ? Sex::F : Sex::M;
    {
        double u = rng.uniform(), acc = 0.0;
        r.race = Race::Other;
        for (std::size_t i = 0; i < kRaceLevels.size(); ++i) {
            acc += clinical_dist::race_probs[i];
            if (u < acc) {
                r.race = kRaceLevels[i];
                break;
            }
        }
    }
    r.cea = rng.lognormal(clinical_dist::cea.median, clinical_dist::cea.sigma);
    r.anc = rng.lognormal(clinical_dist::anc.median, clinical_dist::anc.sigma);
    r.alc = rng.lognormal(clinical_dist::alc.median, clinical_dist::alc.sigma);
    r.nlr = r.anc / r.alc;
    r.aec = rng.lognormal(clinical_dist::aec.median, clinical_dist::aec.sigma);
    r.amc = rng.lognormal(clinical_dist::amc.median, clinical_dist::amc.sigma);
    {
        double u = rng.uniform(), acc = 0.0;
        r.pdl1 = Pdl1::AtLeast50;
        for (std::size_t i = 0; i < kPdl1Levels.size(); ++i) {
            acc += clinical_dist::pdl1_probs[i];
            if (u < acc) {
                r.pdl1 = kPdl1Levels[i];
                break;
            }
        }
    }
    return r;
}

inline std::size_t mask_area(const Mask& m) {
    std::size_t a = 0;
    for (auto v : m.values()) a += v ? 1 : 0;
    return a;
}

// a subset of b
inline bool mask_within(const Mask& a, const Mask& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] && !b[i]) return false;
    return true;
}

namespace detail {

struct Ellipse {
    double cy, cx, ry, rx;
    bool contains(double y, double x) const {
        const double dy = (y - cy) / ry, dx = (x - cx) / rx;
        return dy * dy + dx * dx <= 1.0;
    }
};

// Pixels whose centers lie within `radius` of the center of pixel (cy, cx).
inline Mask disk(std::size_t h, std::size_t w, int cy, int cx, double radius) {
    Mask m({h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            if (dy * dy + dx * dx <= radius * radius) m.at(y, x) = 1;
        }
    return m;
}

inline Image render(const Mask& lobe, const Mask& vessel, const Mask& tumor, double noise_sigma, Rng& rng) {
    Image img(lobe.shape());
    for (std::size_t i = 0; i < img.size(); ++i) {
        double v = intensity::background;
        if (lobe[i]) v = intensity::lobe;
        if (vessel[i]) v = intensity::vessel;
        if (tumor[i]) v = intensity::tumor;
        v += noise_sigma * rng.normal();
        img[i] = std::clamp(v, 0.0, 1.0);
    }
    return img;
}

}  // namespace detail

// Generation rule (fixed):
//  * lobe mask: union of two axis-aligned ellipses (left / right lung);
//  * vessel mask: 2-4 random-walk tubes of width 1-2 px starting at the medial
//    side of a lobe, clipped to the lobe mask;
//  * tumor: disk of radius r in [3, min(H, W) / 6] fully inside a lobe;
//  * response from the noise-free clinical rule (responder_rule);
//  * post-treatment tumor: same center, radius 0.5 r (responder) or 1.2 r,
//    clipped to the image;
//  * survival time ~ Exp(exp(risk)), risk = -1.0 (responder) or +0.5;
//    event observed with probability 0.7.
// Independent streams are derived from `seed` for clinical values, anatomy,
// image noise and survival, so every case is a pure function of (seed, config).
inline PhantomCase generate_case(std::uint64_t seed, const PhantomConfig& config, std::string case_id = "case") {
    config.validate();
    const std::size_t H = config.height, W = config.width;
    PhantomCase c;
    c.case_id = std::move(case_id);
    c.clinical = draw_clinical(derive_seed(seed, 1));
    c.responder = responder_rule(c.clinical);

    Rng rng(derive_seed(seed, 2));
    const double Hd = static_cast<double>(H), Wd = static_cast<double>(W);
    const double cy = Hd * (0.5 + rng.uniform(-0.05, 0.05));
    std::array<detail::Ellipse, 2> lobes{
        detail::Ellipse{cy, Wd * (0.30 + rng.uniform(-0.04, 0.04)), Hd * rng.uniform(0.30, 0.40),
                        Wd * rng.uniform(0.17, 0.23)},
        detail::Ellipse{cy, Wd * (0.70 + rng.uniform(-0.04, 0.04)), Hd * rng.uniform(0.30, 0.40),
                        Wd * rng.uniform(0.17, 0.23)}};
    c.lobe_mask = Mask({H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (const auto& e : lobes)
                if (e.contains(y + 0.5, x + 0.5)) c.lobe_mask.at(y, x) = 1;

    c.vessel_mask = Mask({H, W});
    const int n_vessels = rng.range(2, 4);
    for (int v = 0; v < n_vessels; ++v) {
        const auto& e = lobes[rng.below(2)];
        const double lateral = e.cx < Wd / 2 ? -1.0 : 1.0;
        const int width = rng.range(1, 2);
        double py = e.cy + rng.uniform(-0.3, 0.3) * e.ry;
        double px = e.cx - lateral * 0.6 * e.rx;
        double angle = (lateral > 0 ? 0.0 : std::numbers::pi) + rng.uniform(-1.0, 1.0);
        const int steps = static_cast<int>(std::max(H, W));
        for (int s = 0; s < steps; ++s) {
            const int iy = static_cast<int>(std::floor(py)), ix = static_cast<int>(std::floor(px));
            if (iy < 0 || ix < 0 || iy >= static_cast<int>(H) || ix >= static_cast<int>(W)) break;
            for (int dy = 0; dy < width; ++dy)
                for (int dx = 0; dx < width; ++dx) {
                    const int yy = iy + dy, xx = ix + dx;
                    if (yy < static_cast<int>(H) && xx < static_cast<int>(W)) c.vessel_mask.at(yy, xx) = 1;
                }
            angle += 0.35 * rng.normal();
            py += std::sin(angle);
            px += std::cos(angle);
        }
    }
    for (std::size_t i = 0; i < c.vessel_mask.size(); ++i) c.vessel_mask[i] &= c.lobe_mask[i];

    const int r_max = std::max(3, static_cast<int>(std::min(H, W) / 6));
    int radius = rng.range(3, r_max);
    std::vector<std::pair<int, int>> centers;
    for (; radius >= 3 && centers.empty(); --radius) {
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                if (!c.lobe_mask.at(y, x)) continue;
                if (mask_within(detail::disk(H, W, static_cast<int>(y), static_cast<int>(x), radius), c.lobe_mask))
                    centers.emplace_back(static_cast<int>(y), static_cast<int>(x));
            }
        if (!centers.empty()) break;
    }
    int ty, tx;
    if (!centers.empty()) {
        std::tie(ty, tx) = centers[rng.below(centers.size())];
        c.tumor_mask_pre = detail::disk(H, W, ty, tx, radius);
    } else {
        // Lobes too small for a full disk: center in a lobe and clip to it.
        radius = 3;
        const auto& e = lobes[rng.below(2)];
        ty = static_cast<int>(std::floor(e.cy));
        tx = static_cast<int>(std::floor(e.cx));
        c.tumor_mask_pre = detail::disk(H, W, ty, tx, radius);
        for (std::size_t i = 0; i < c.tumor_mask_pre.size(); ++i) c.tumor_mask_pre[i] &= c.lobe_mask[i];
    }
    const double post_radius = (c.responder ? 0.5 : 1.2) * radius;
    c.tumor_mask_post = detail::disk(H, W, ty, tx, post_radius);
    if (c.responder && mask_area(c.tumor_mask_post) >= mask_area(c.tumor_mask_pre)) {
        // Only reachable with clipped pre tumors; keep the center pixel.
        c.tumor_mask_post = detail::disk(H, W, ty, tx, 0.0);
    }

    Rng noise(derive_seed(seed, 3));
    c.pre_image = detail::render(c.lobe_mask, c.vessel_mask, c.tumor_mask_pre, config.noise_sigma, noise);
    c.post_image = detail::render(c.lobe_mask, c.vessel_mask, c.tumor_mask_post, config.noise_sigma, noise);

    Rng surv(derive_seed(seed, 4));
    const double risk = c.responder ? -1.0 : 0.5;
    c.survival_time = surv.exponential(std::exp(risk));
    c.event = surv.bernoulli(0.7);
    return c;
}

struct DatasetManifest {
    std::uint64_t seed = 0;
    std::size_t n_cases = 0;
    double responder_fraction = 0;
    std::map<std::size_t, std::vector<std::string>> splits;
    std::size_t height = 0;
    std::size_t width = 0;

    friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;

    std::size_t fold_of(const std::string& case_id) const {
        for (const auto& [fold, ids] : splits)
            for (const auto& id : ids)
                if (id == case_id) return fold;
        throw IntegrityError("case " + case_id + " is not assigned to any fold");
    }
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<PhantomCase> cases;
};

inline std::string case_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "case_%04zu", index);
    return buf;
}

// n cases with round(n * responder_fraction) responders. Case i gets a target
// label from a seeded shuffle and draws candidate sub-seeds until the clinical
// rule reproduces that label, so labels stay a deterministic function of the
// clinical record. Folds are dealt round-robin, responders first, which keeps
// fold sizes within one of each other and spreads responders across folds.
inline Dataset generate_dataset(std::uint64_t seed, std::size_t n, const PhantomConfig& config) {
    config.validate();
    require_config(n >= 5 && n >= config.n_folds,
                   "dataset: need at least max(5, n_folds) cases, got " + std::to_string(n));
    const auto n_resp = static_cast<std::size_t>(std::llround(static_cast<double>(n) * config.responder_fraction));
    std::vector<bool> target(n, false);
    for (std::size_t i = 0; i < n_resp; ++i) target[i] = true;
    Rng label_rng(derive_seed(seed, 0x5A));
    shuffle(target, label_rng);

    Dataset ds;
    ds.manifest.seed = seed;
    ds.manifest.n_cases = n;
    ds.manifest.responder_fraction = config.responder_fraction;
    ds.manifest.height = config.height;
    ds.manifest.width = config.width;
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t case_stream = derive_seed(seed, 1000 + i);
        std::uint64_t chosen = 0;
        bool found = false;
        for (std::uint64_t attempt = 0; attempt < 100000 && !found; ++attempt) {
            const std::uint64_t s = derive_seed(case_stream, attempt);
            if (responder_rule(draw_clinical(derive_seed(s, 1))) == target[i]) {
                chosen = s;
                found = true;
            }
        }
        if (!found) throw ConfigError("dataset: could not realize the requested responder label for case " +
                                      std::to_string(i));
        ds.cases.push_back(generate_case(chosen, config, case_name(i)));
    }

    std::size_t next = 0;
    for (int pass = 0; pass < 2; ++pass)
        for (std::size_t i = 0; i < n; ++i)
            if (ds.cases[i].responder == (pass == 0)) ds.manifest.splits[next++ % config.n_folds].push_back(ds.cases[i].case_id);
    for (auto& [fold, ids] : ds.manifest.splits) std::sort(ids.begin(), ids.end());
    return ds;
}

}  // namespace immunodiff::data
