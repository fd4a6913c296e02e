#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "immunodiff/core/error.hpp"
#include "immunodiff/nd/tensor.hpp"

namespace immunodiff::metrics {

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t total() const { return tp + fp + tn + fn; }
};

inline ConfusionCounts confusion(const std::vector<int>& predicted, const std::vector<int>& actual) {
    require(predicted.size() == actual.size(), "confusion: length mismatch");
    ConfusionCounts c;
    for (std::size_t i = 0; i < actual.size(); ++i) {
        if (actual[i])
            ++(predicted[i] ? c.tp : c.fn);
        else
            ++(predicted[i] ? c.fp : c.tn);
    }
    return c;
}

// nullopt marks a metric whose denominator is zero.
struct ClassificationMetrics {
    std::optional<double> balanced_accuracy, f1, precision, recall;
};

inline ClassificationMetrics classification_metrics(const ConfusionCounts& c) {
    require(c.total() > 0, "classification_metrics: all counts are zero");
    auto ratio = [](std::size_t a, std::size_t b) -> std::optional<double> {
        if (b == 0) return std::nullopt;
        return static_cast<double>(a) / static_cast<double>(b);
    };
    ClassificationMetrics m;
    m.recall = ratio(c.tp, c.tp + c.fn);
    m.precision = ratio(c.tp, c.tp + c.fp);
    const auto specificity = ratio(c.tn, c.tn + c.fp);
    if (m.recall && specificity) m.balanced_accuracy = (*m.recall + *specificity) / 2.0;
    if (m.recall && m.precision && *m.recall + *m.precision > 0.0)
        m.f1 = 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall);
    else if (m.recall && m.precision)
        m.f1 = 0.0;  // tp = 0 with both denominators positive
    return m;
}

enum class MmdEstimator { unbiased, biased };

struct MmdResult {
    double value = 0.0;  // clamped at 0
    double raw = 0.0;    // unclamped estimate
    double sigma = 0.0;  // RBF bandwidth used
};

inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), "mmd: vectors of different length");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

// Median of pairwise Euclidean distances over the pooled sample (distinct
// pairs); 1 when that median is 0.
inline double median_bandwidth(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
    std::vector<const std::vector<double>*> pool;
    for (const auto& v : a) pool.push_back(&v);
    for (const auto& v : b) pool.push_back(&v);
    std::vector<double> d;
    for (std::size_t i = 0; i < pool.size(); ++i)
        for (std::size_t j = i + 1; j < pool.size(); ++j) d.push_back(std::sqrt(squared_distance(*pool[i], *pool[j])));
    if (d.empty()) return 1.0;
    std::sort(d.begin(), d.end());
    const std::size_t m = d.size() / 2;
    const double med = d.size() % 2 ? d[m] : 0.5 * (d[m - 1] + d[m]);
    return med > 0.0 ? med : 1.0;
}

// MMD^2 with k(x, y) = exp(-|x - y|^2 / (2 sigma^2)).
inline MmdResult mmd(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                     std::optional<double> bandwidth = std::nullopt, MmdEstimator est = MmdEstimator::unbiased) {
    require(!a.empty() && !b.empty(), "mmd: both samples must be non-empty");
    if (bandwidth) require(*bandwidth > 0.0, "mmd: bandwidth must be positive");
    const double sigma = bandwidth ? *bandwidth : median_bandwidth(a, b);
    auto k = [sigma](const std::vector<double>& x, const std::vector<double>& y) {
        return std::exp(-squared_distance(x, y) / (2.0 * sigma * sigma));
    };
    auto within = [&](const std::vector<std::vector<double>>& s) {
        double sum = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i)
            for (std::size_t j = 0; j < s.size(); ++j)
                if (i != j || est == MmdEstimator::biased) sum += k(s[i], s[j]);
        const double n = static_cast<double>(s.size());
        if (est == MmdEstimator::biased) return sum / (n * n);
        require(s.size() >= 2, "mmd: unbiased estimator needs at least 2 points per sample");
        return sum / (n * (n - 1.0));
    };
    double cross = 0.0;
    for (const auto& x : a)
        for (const auto& y : b) cross += k(x, y);
    cross /= static_cast<double>(a.size() * b.size());
    MmdResult r;
    r.sigma = sigma;
    r.raw = within(a) + within(b) - 2.0 * cross;
    r.value = std::max(0.0, r.raw);
    return r;
}

// Mean local SSIM over every window position fully inside the image, with a
// normalized Gaussian window (sigma 1.5). Local means and (co)variances are
// Gaussian-weighted; variances use deviations from the local mean.
inline double ssim(const nd::Tensor<double>& a, const nd::Tensor<double>& b, std::size_t window = 7,
                   double dynamic_range = 1.0, double sigma = 1.5) {
    require(a.shape() == b.shape(), "ssim: shape mismatch " + nd::shape_str(a.shape()) + " vs " +
                                        nd::shape_str(b.shape()));
    require(a.rank() == 2, "ssim expects [H, W] images");
    const std::size_t h = a.dim(0), w = a.dim(1);
    require(window % 2 == 1 && window <= std::min(h, w), "ssim: window must be odd and fit the image");
    require(dynamic_range > 0.0, "ssim: dynamic range must be positive");
    const double c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
    const double c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
    std::vector<double> g(window * window);
    const double r = static_cast<double>(window / 2);
    double gs = 0.0;
    for (std::size_t y = 0; y < window; ++y)
        for (std::size_t x = 0; x < window; ++x) {
            const double dy = static_cast<double>(y) - r, dx = static_cast<double>(x) - r;
            g[y * window + x] = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            gs += g[y * window + x];
        }
    for (auto& v : g) v /= gs;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t y0 = 0; y0 + window <= h; ++y0)
        for (std::size_t x0 = 0; x0 + window <= w; ++x0) {
            double ma = 0.0, mb = 0.0;
            for (std::size_t y = 0; y < window; ++y)
                for (std::size_t x = 0; x < window; ++x) {
                    const double wt = g[y * window + x];
                    ma += wt * a.at(y0 + y, x0 + x);
                    mb += wt * b.at(y0 + y, x0 + x);
                }
            double va = 0.0, vb = 0.0, cab = 0.0;
            for (std::size_t y = 0; y < window; ++y)
                for (std::size_t x = 0; x < window; ++x) {
                    const double wt = g[y * window + x];
                    const double da = a.at(y0 + y, x0 + x) - ma, db = b.at(y0 + y, x0 + x) - mb;
                    va += wt * (da * da);
                    vb += wt * (db * db);
                    cab += wt * (da * db);
                }
            total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return total / static_cast<double>(count);
}

// Mean and sample (n - 1) standard deviation; std is 0 for a single value.
struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
    require(!v.empty(), "mean_std: no values");
    MeanStd m;
    for (double x : v) m.mean += x;
    m.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double s = 0.0;
        for (double x : v) s += (x - m.mean) * (x - m.mean);
        m.std = std::sqrt(s / static_cast<double>(v.size() - 1));
    }
    return m;
}

}  // namespace immunodiff::metrics
