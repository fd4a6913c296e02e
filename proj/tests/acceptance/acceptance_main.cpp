#include <CLI11.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "common/gradient_cases.hpp"
#include "immunodiff/pipeline/stages.hpp"

using namespace immunodiff;
namespace fs = std::filesystem;
using nd::Tensor;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& what) {
        if (!ok) pass = false;
        notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
    }
};

std::string num(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// --- 1: gradients ---------------------------------------------------------------

Outcome gradient_oracle() {
    Outcome o;
    const auto t0 = Clock::now();
    for (const auto& [name, fn] : gradcheck::all_cases())
        for (std::uint64_t seed : {1u, 2u}) {
            const double worst = fn(seed).worst();
            o.check(worst < 1e-4, name + " seed " + std::to_string(seed) + ": max rel err " + num(worst));
        }
    const double secs = seconds_since(t0);
    o.check(secs < 120.0, "runtime " + num(secs) + " s");
    return o;
}

// --- 2: contrastive loss ----------------------------------------------------------

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

double nt_xent_direct(const std::vector<std::vector<double>>& zv, const std::vector<std::vector<double>>& zl, double tau) {
    double total = 0;
    for (std::size_t i = 0; i < zv.size(); ++i) {
        double denom = 0;
        for (std::size_t k = 0; k < zl.size(); ++k) denom += std::exp(cosine(zv[i], zl[k]) / tau);
        total -= std::log(std::exp(cosine(zv[i], zl[i]) / tau) / denom);
    }
    return total / static_cast<double>(zv.size());
}

Outcome contrastive_brute_force() {
    Outcome o;
    Rng rng(2);
    double worst = 0;
    for (int trial = 0; trial < 400; ++trial) {
        const std::size_t n = 1 + trial % 4, k = 2 + rng.below(7);
        std::vector<std::vector<double>> zv(n, std::vector<double>(k)), zl = zv;
        for (auto* s : {&zv, &zl})
            for (auto& v : *s)
                for (auto& x : v) x = rng.normal();
        const double tau = rng.uniform(0.1, 2.0);
        worst = std::max(worst, std::abs(vl::nt_xent_vl(zv, zl, tau) - nt_xent_direct(zv, zl, tau)));
    }
    o.check(worst < 1e-6, "400 random batches N<=4: max abs diff " + num(worst));
    const double single = vl::nt_xent_vl({{0.3, -1.0, 2.0}}, {{1.0, 1.0, 0.0}}, 0.5);
    o.check(single == 0.0, "N=1 gives " + num(single));
    for (std::size_t n : {2u, 3u, 4u}) {
        const std::vector<std::vector<double>> same(n, std::vector<double>{0.6, -0.8, 0.1});
        const double v = vl::nt_xent_vl(same, same, 0.5);
        o.check(std::abs(v - std::log(static_cast<double>(n))) < 1e-6, "all identical N=" + std::to_string(n) + ": " + num(v));
    }
    return o;
}

// --- 3: RoPE ----------------------------------------------------------------------

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

Outcome rope_suite() {
    Outcome o;
    Rng rng(3);
    const auto t8 = nd::make_rope_table(8);
    o.check(t8.theta.size() == 2 && std::abs(t8.theta[1] - 0.23714) < 1e-5,
            "|D|=8 theta_1 = " + num(t8.theta.size() > 1 ? t8.theta[1] : -1));
    double theta_err = 0;
    for (std::size_t d : {8u, 16u, 64u}) {
        const auto t = nd::make_rope_table(d);
        if (t.theta.size() != d / 4) theta_err = 1;
        for (std::size_t i = 0; i < t.theta.size(); ++i)
            theta_err = std::max(theta_err, std::abs(t.theta[i] - std::pow(1e5, -static_cast<double>(i) / d)));
    }
    o.check(theta_err < 1e-6, "theta table vs b^(-i/|D|): max err " + num(theta_err));

    const auto t = nd::make_rope_table(64);
    bool identity = true;
    double norm_err = 0, rel_err = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> q(64), k(64);
        for (auto& v : q) v = rng.normal();
        for (auto& v : k) v = rng.normal();
        identity = identity && cbi::rope_apply(q, 0.0, 0.0, t) == q;
        const auto r = cbi::rope_apply(q, rng.uniform(-50, 50), rng.uniform(-50, 50), t);
        norm_err = std::max(norm_err, std::abs(std::sqrt(dot(r, r)) - std::sqrt(dot(q, q))));
        const double mh = rng.uniform(-10, 10), mw = rng.uniform(-10, 10), nh = rng.uniform(-10, 10),
                     nw = rng.uniform(-10, 10), sh = rng.uniform(-10, 10), sw = rng.uniform(-10, 10);
        const double a = dot(cbi::rope_apply(q, mh, mw, t), cbi::rope_apply(k, nh, nw, t));
        const double b = dot(cbi::rope_apply(q, mh + sh, mw + sw, t), cbi::rope_apply(k, nh + sh, nw + sw, t));
        rel_err = std::max(rel_err, std::abs(a - b));
    }
    o.check(identity, "zero position is the identity (exact, 100 vectors)");
    o.check(norm_err < 1e-6, "norm preserved: max err " + num(norm_err));
    o.check(rel_err < 1e-6, "relative position, 100 trials: max err " + num(rel_err));
    return o;
}

// --- 4: zero-init identity and locked parameters --------------------------------------

Outcome zero_init_identity(const fs::path& run, const std::string& vl_after_pretrain) {
    Outcome o;
    Rng rng(4);
    std::size_t exact = 0;
    for (int trial = 0; trial < 50; ++trial) {
        nd::DenoiserConfig c;
        c.height = c.width = 16;
        c.depth = 2 + trial % 2;
        c.base_channels = 4;
        c.time_embed_dim = 8;
        c.cond_dim = 0;
        c.timesteps = 20;
        const auto base = nd::init_denoiser<float>(c, trial);
        const auto cd = control::make_controlled(base, 6, trial + 100);
        const auto x = gradcheck::randn(c.image_shape(1), rng).cast<float>();
        const auto ctrl = gradcheck::randn({1, 6}, rng, 3.0).cast<float>();
        const std::vector<std::size_t> t{rng.below(c.timesteps)};
        exact += control::controlled_denoise(cd, x, t, ctrl).eps == nd::denoise(base, x, t).eps;
    }
    o.check(exact == 50, std::to_string(exact) + "/50 random inputs bit-identical to the locked base");

    if (run.empty()) {
        o.check(false, "no pipeline run to inspect");
        return o;
    }
    const auto ckpt = [&](const char* s) { return read_tensor_file(run / "checkpoints" / (std::string(s) + ".ckpt")); };
    const auto ddpm = pipeline::read_group<float>(ckpt("ddpm"), "base");
    const auto h = nd::hash_store(ddpm);
    o.check(nd::hash_store(pipeline::read_group<float>(ckpt("control"), "base")) == h &&
                pipeline::read_group<float>(ckpt("control"), "base") == ddpm,
            "base parameters after Stage 1 match train-ddpm byte for byte");
    o.check(pipeline::read_group<float>(ckpt("cbi"), "base") == ddpm,
            "base parameters after Stage 2 match train-ddpm byte for byte");
    o.check(!vl_after_pretrain.empty() && read_file(run / "checkpoints" / "vl.ckpt") == vl_after_pretrain,
            "VL encoders unchanged by Stage 1 and Stage 2");
    return o;
}

// --- 5: fusion --------------------------------------------------------------------

Outcome fusion_contract() {
    Outcome o;
    Rng rng(5);
    double worst = 0;
    bool lambda_zero_exact = true;
    for (int trial = 0; trial < 50; ++trial) {
        auto ac = gradcheck::tiny_adapter();
        ac.lambda = trial % 5 == 0 ? 0.0 : rng.uniform(0.0, 1.0);
        auto a = cbi::init_adapter<double>(ac, gradcheck::all_levels_norm(), trial);
        gradcheck::jitter(a.params, rng, 0.2);
        data::Image pre({8, 8});
        for (auto& v : pre.values()) v = rng.uniform();
        const auto b = cbi::make_bundle(a, pre, gradcheck::random_record(rng));
        for (std::size_t k = 0; k < b.c_hat.size(); ++k)
            worst = std::max(worst, std::abs(b.c_hat[k] - (b.z_img_hat[k] + ac.lambda * (b.z_c_hat[k] + b.z_b_hat[k] +
                                                                                          b.z_i_hat[k]))));
        if (ac.lambda == 0.0) lambda_zero_exact = lambda_zero_exact && b.c_hat == b.z_img_hat;
    }
    o.check(worst < 1e-12, "c_hat = z_img + lambda * sum z_i on 50 bundles: max err " + num(worst));
    o.check(lambda_zero_exact, "lambda = 0 gives image-only conditioning exactly");
    const double d = pipeline::config_from_json(nlohmann::json::object()).adapter.lambda;
    o.check(d == 5e-2 && cbi::AdapterConfig{}.lambda == 5e-2, "default lambda " + num(d));
    return o;
}

// --- 6: forward process -----------------------------------------------------------

Outcome forward_statistics() {
    Outcome o;
    const auto s = diffusion::make_schedule(100);
    Rng rng(6);
    const Tensor<double> x0({1, 1, 1, 3}, {1.5, -2.0, 2.5});
    const std::size_t draws = 10000;
    for (std::size_t t : {10u, 50u, 90u}) {
        std::vector<double> sum(3), sq(3);
        for (std::size_t k = 0; k < draws; ++k) {
            const auto x = diffusion::forward_diffuse(x0, t, gradcheck::randn(x0.shape(), rng), s);
            for (std::size_t i = 0; i < 3; ++i) {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        double mean_err = 0, var_err = 0;
        for (std::size_t i = 0; i < 3; ++i) {
            const double m = sum[i] / draws, v = sq[i] / draws - m * m;
            const double m_ref = std::sqrt(s.alpha_bar[t]) * x0[i], v_ref = 1 - s.alpha_bar[t];
            mean_err = std::max(mean_err, std::abs(m - m_ref) / std::abs(m_ref));
            var_err = std::max(var_err, std::abs(v - v_ref) / v_ref);
        }
        o.check(mean_err < 0.05 && var_err < 0.05,
                "t=" + std::to_string(t) + ": rel mean err " + num(mean_err) + ", rel var err " + num(var_err));
    }
    return o;
}

// --- 7: c-index -------------------------------------------------------------------

std::optional<double> c_index_pairs(const std::vector<double>& r, const std::vector<double>& t, const std::vector<int>& e) {
    double num_ = 0, den = 0;
    for (std::size_t i = 0; i < r.size(); ++i)
        for (std::size_t j = 0; j < r.size(); ++j) {
            if (!(t[i] < t[j]) || !e[i]) continue;
            den += 1;
            if (r[i] > r[j]) num_ += 1;
            else if (r[i] == r[j]) num_ += 0.5;
        }
    if (den == 0) return std::nullopt;
    return num_ / den;
}

Outcome c_index_oracle() {
    Outcome o;
    Rng rng(7);
    int checked = 0, mismatched = 0;
    while (checked < 200) {
        const std::size_t n = 2 + rng.below(49);
        std::vector<double> r(n), t(n);
        std::vector<int> e(n);
        for (std::size_t i = 0; i < n; ++i) {
            r[i] = static_cast<double>(rng.range(-5, 5));
            t[i] = static_cast<double>(rng.range(1, 20));
            e[i] = rng.bernoulli(0.6);
        }
        const auto ref = c_index_pairs(r, t, e);
        if (!ref) continue;
        mismatched += heads::concordance_index(r, t, e) != *ref;
        ++checked;
    }
    o.check(mismatched == 0, std::to_string(200 - mismatched) + "/200 censored datasets equal the pair oracle exactly");
    const double hand = heads::concordance_index({2, 2, 1}, {1, 2, 3}, {1, 1, 0});
    o.check(std::abs(hand - 2.5 / 3.0) < 1e-15, "hand example " + num(hand));
    return o;
}

// --- 8: metric identities ---------------------------------------------------------

Outcome metric_identities() {
    Outcome o;
    Rng rng(8);
    Tensor<double> a({16, 16});
    for (auto& v : a.values()) v = rng.uniform();
    o.check(metrics::ssim(a, a) == 1.0, "SSIM(a,a) = " + num(metrics::ssim(a, a)));
    std::vector<std::vector<double>> s(20, std::vector<double>(5));
    for (auto& v : s)
        for (auto& x : v) x = rng.normal();
    const double m = metrics::mmd(s, s, std::nullopt, metrics::MmdEstimator::biased).value;
    o.check(std::abs(m) < 1e-9, "biased MMD(A,A) = " + num(m));
    metrics::ConfusionCounts c;
    c.tp = 3;
    c.fp = 1;
    c.tn = 4;
    c.fn = 2;
    const auto cm = metrics::classification_metrics(c);
    o.check(std::abs(*cm.precision - 0.75) < 1e-12 && std::abs(*cm.recall - 0.6) < 1e-12 &&
                std::abs(*cm.balanced_accuracy - 0.7) < 1e-12,
            "confusion example: precision " + num(*cm.precision) + ", recall " + num(*cm.recall) + ", bal acc " +
                num(*cm.balanced_accuracy));
    return o;
}

// --- 9 and 10: end to end ---------------------------------------------------------

struct Run {
    bool ok = true;
    double seconds = 0;
    std::string vl_after_pretrain;  // vl.ckpt bytes right after pretrain-vl
    std::vector<std::string> notes;
};

int shell(const std::string& cmd) {
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

Run run_pipeline(const std::string& cli, const std::string& config, const fs::path& dir) {
    Run r;
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto t0 = Clock::now();
    for (const char* cmd :
         {"gen-data", "pretrain-vl", "train-ddpm", "train-control", "train-cbi", "predict", "evaluate"}) {
        const auto ts = Clock::now();
        const fs::path log = dir.string() + "." + cmd + ".log";
        const int code = shell(cli + " " + cmd + " --config " + config + " --out " + dir.string() + " > " + log.string() + " 2>&1");
        r.notes.push_back(std::string(cmd) + ": exit " + std::to_string(code) + " in " + num(seconds_since(ts)) + " s");
        if (std::string(cmd) == "pretrain-vl" && code == 0) r.vl_after_pretrain = read_file(dir / "checkpoints" / "vl.ckpt");
        if (code != 0) {
            r.ok = false;
            r.notes.push_back("see " + log.string());
            break;
        }
    }
    r.seconds = seconds_since(t0);
    return r;
}

double report_num(const pipeline::Report& rep, const std::string& key) {
    const std::string* v = rep.find(key);
    if (!v || *v == "undefined") return std::numeric_limits<double>::quiet_NaN();
    return std::stod(*v);
}

Outcome end_to_end(const Run& run, const fs::path& dir) {
    Outcome o;
    for (const auto& n : run.notes) o.notes.push_back("     " + n);
    o.check(run.ok, "all stages exit 0");
    o.check(run.seconds < 900.0, "wall time " + num(run.seconds) + " s (limit 900 s)");
    if (!run.ok) return o;
    const auto rep = pipeline::read_report(dir / "report.txt");
    for (const char* stage : {"vl", "ddpm", "control", "cbi", "heads_class", "heads_cox"}) {
        const std::string k = std::string("stage.") + stage;
        const double drop = report_num(rep, k + ".loss_drop");
        o.check(drop >= 0.30, std::string(stage) + " loss " + num(report_num(rep, k + ".loss_initial")) + " -> " +
                                  num(report_num(rep, k + ".loss_final")) + " (drop " + num(100 * drop) + "%, need 30%)");
    }
    const double ba = report_num(rep, "holdout.balanced_accuracy");
    const double ci = report_num(rep, "holdout.c_index");
    o.check(ba >= 0.80, "held-out balanced accuracy " + num(ba) + " (need 0.80)");
    o.check(ci >= 0.70, "held-out c-index " + num(ci) + " (need 0.70)");
    const double resp = report_num(rep, "generation.tumor_change.responders");
    const double non = report_num(rep, "generation.tumor_change.nonresponders");
    o.check(resp < non, "generated tumor intensity change: responders " + num(resp) + " vs non-responders " + num(non));
    return o;
}

std::vector<fs::path> tree(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir));
    std::sort(out.begin(), out.end());
    return out;
}

Outcome determinism(const Run& a, const fs::path& da, const Run& b, const fs::path& db) {
    Outcome o;
    o.check(a.ok && b.ok, "both runs completed");
    if (!a.ok || !b.ok) return o;
    const auto ta = tree(da), tb = tree(db);
    o.check(ta == tb, "same file set (" + std::to_string(ta.size()) + " files)");
    std::size_t same = 0, ckpts = 0;
    for (const auto& p : ta) {
        if (!fs::exists(db / p)) continue;
        const bool eq = read_file(da / p) == read_file(db / p);
        same += eq;
        if (p.extension() == ".ckpt" || p == "report.txt") {
            ++ckpts;
            o.check(eq, p.string() + " byte-identical");
        }
    }
    o.check(ckpts == 6, std::to_string(ckpts) + " checkpoints + report compared");
    o.check(same == ta.size(), std::to_string(same) + "/" + std::to_string(ta.size()) + " files byte-identical");
    return o;
}

void print(int id, const std::string& title, const Outcome& o) {
    for (const auto& n : o.notes) std::printf("    %s\n", n.c_str());
    std::printf("%s %d %s\n", o.pass ? "PASS" : "FAIL", id, title.c_str());
    std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string cli, config, work = "acceptance_work";
    bool skip_pipeline = false;
    app.add_option("--cli", cli, "path to immunodiff_cli")->required();
    app.add_option("--config", config, "pipeline config for the end-to-end runs")->required();
    app.add_option("--work-dir", work, "scratch directory");
    app.add_flag("--skip-pipeline", skip_pipeline, "only the in-process criteria (9 and 10 fail)");
    CLI11_PARSE(app, argc, argv);

    const fs::path root = fs::absolute(work);
    fs::create_directories(root);
    bool all = true;
    auto report = [&](int id, const std::string& title, const Outcome& o) {
        print(id, title, o);
        all = all && o.pass;
    };

    report(1, "gradient oracle", gradient_oracle());
    report(2, "contrastive loss brute force", contrastive_brute_force());
    report(3, "RoPE suite", rope_suite());

    Run ra, rb;
    const fs::path da = root / "run_a", db = root / "run_b";
    if (!skip_pipeline) {
        ra = run_pipeline(cli, config, da);
        rb = run_pipeline(cli, config, db);
    } else {
        ra.ok = rb.ok = false;
        ra.notes.push_back("skipped");
    }

    report(4, "zero-init identity and locked parameters", zero_init_identity(ra.ok ? da : fs::path{}, ra.vl_after_pretrain));
    report(5, "fusion contract", fusion_contract());
    report(6, "forward-process statistics", forward_statistics());
    report(7, "c-index oracle", c_index_oracle());
    report(8, "metric identities", metric_identities());
    report(9, "end-to-end smoke", end_to_end(ra, da));
    report(10, "determinism", determinism(ra, da, rb, db));
    return all ? 0 : 1;
}
