#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "immunodiff/cbi/adapter.hpp"
#include "immunodiff/control/anatomy_control.hpp"
#include "immunodiff/core/error.hpp"
#include "immunodiff/core/rng.hpp"
#include "immunodiff/core/tensor_io.hpp"
#include "immunodiff/data/dataset_io.hpp"
#include "immunodiff/data/phantom.hpp"
#include "immunodiff/diffusion/schedule.hpp"
#include "immunodiff/diffusion/trainer.hpp"
#include "immunodiff/heads/prediction.hpp"
#include "immunodiff/metrics/metrics.hpp"
#include "immunodiff/nd/denoiser.hpp"
#include "immunodiff/pipeline/checkpoint.hpp"
#include "immunodiff/pipeline/config.hpp"
#include "immunodiff/pipeline/report.hpp"
#include "immunodiff/vl/contrastive.hpp"

namespace immunodiff::pipeline {

namespace fs = std::filesystem;

// Stream tags for derive_seed(config.seed, tag).
enum : std::uint64_t {
    kSeedVl = 0x5100,
    kSeedDdpm = 0x5200,
    kSeedControl = 0x5300,
    kSeedCbi = 0x5400,
    kSeedHeads = 0x5500,
    kSeedFeatures = 0x5600,
    kSeedGenerate = 0x5700,
};

struct RunContext {
    RunConfig config;
    fs::path out;

    fs::path dataset_dir() const { return out / config.dataset_dir; }
    fs::path checkpoint(const std::string& stage) const { return out / config.checkpoint_dir / (stage + ".ckpt"); }
    fs::path predictions() const { return out / config.checkpoint_dir / "predictions.tsv"; }
    fs::path generated_dir() const { return out / "generated"; }
    fs::path report() const { return out / config.report_path; }
    std::uint64_t seed(std::uint64_t tag) const { return derive_seed(config.seed, tag); }
};

// Loaded dataset split into the diffusion training pool (every fold except
// the held-out one) and the rest.
struct Split {
    data::Dataset ds;
    std::vector<const data::PhantomCase*> train;
    std::vector<std::size_t> fold_of;  // per case index
};

inline void require_file(const fs::path& p, const std::string& stage) {
    if (!fs::exists(p)) throw DependencyError("missing " + p.string() + ": run '" + stage + "' first");
}

inline TensorFile read_checkpoint(const RunContext& ctx, const std::string& stage, const std::string& producer) {
    const fs::path p = ctx.checkpoint(stage);
    require_file(p, producer);
    TensorFile f = read_tensor_file(p);
    if (meta_required(f, "stage", p.string()) != stage)
        throw IntegrityError(p.string() + ": stage tag is not '" + stage + "'");
    return f;
}

inline void write_checkpoint(const RunContext& ctx, const std::string& stage, const TensorFile& f) {
    write_tensor_file(ctx.checkpoint(stage), f);
}

inline Split load_split(const RunContext& ctx) {
    const fs::path dir = ctx.dataset_dir();
    if (!fs::exists(dir / "manifest")) throw DependencyError("dataset missing at " + dir.string() + ": run 'gen-data' first");
    Split s{data::load_dataset(dir), {}, {}};
    const auto& m = s.ds.manifest;
    const auto& c = ctx.config;
    if (m.n_cases != c.n_cases || m.height != c.height || m.width != c.width || m.splits.size() != c.n_folds)
        throw IntegrityError("dataset at " + dir.string() + " does not match the config (re-run 'gen-data')");
    std::map<std::string, std::size_t> fold_by_id;
    for (const auto& [fold, ids] : m.splits)
        for (const auto& id : ids) fold_by_id[id] = fold;
    for (const auto& cs : s.ds.cases) {
        const std::size_t f = fold_by_id.at(cs.case_id);
        s.fold_of.push_back(f);
        if (f != c.holdout_fold) s.train.push_back(&cs);
    }
    return s;
}

inline std::string fmt(double v) { return format_double(v); }

// --- gen-data --------------------------------------------------------------

inline data::Dataset run_gen_data(const RunContext& ctx) {
    auto ds = data::generate_dataset(ctx.config.seed, ctx.config.n_cases, ctx.config.phantom());
    data::persist_dataset(ds, ctx.dataset_dir(), provenance(ctx.config, "gen-data"));
    return ds;
}

// --- pretrain-vl -----------------------------------------------------------

struct StageLoss {
    double initial = 0.0;
    double final = 0.0;
    double drop() const { return initial > 0.0 ? 1.0 - final / initial : 0.0; }
};

inline void put_loss(Meta& m, const StageLoss& l) {
    m.emplace_back("loss_initial", fmt(l.initial));
    m.emplace_back("loss_final", fmt(l.final));
}

inline StageLoss get_loss(const TensorFile& f, const std::string& what) {
    return {parse_double(meta_required(f, "loss_initial", what), what),
            parse_double(meta_required(f, "loss_final", what), what)};
}

// Contrastive loss on a fixed probe batch (first probe_size training cases).
// Fixed probe: the contrastive loss over the first training cases, before and
// after training. Independent of batch size so the two numbers compare.
inline constexpr std::size_t kVlProbeSize = 16;

template <class T>
double vl_probe(const vl::VLEncoders<T>& e, const std::vector<const data::PhantomCase*>& cases, std::size_t n) {
    std::vector<const data::PhantomCase*> probe(cases.begin(), cases.begin() + std::min(n, cases.size()));
    nd::Graph<T> g;
    auto p = nd::bind(g, e.params, false);
    auto [zv, zl] = vl::embed_pairs(g, e, p, probe);
    return static_cast<double>(g.value(vl::nt_xent_graph(g, zv, zl, e.config.tau, e.config.symmetric)).item());
}

inline StageLoss run_pretrain_vl(const RunContext& ctx) {
    const auto split = load_split(ctx);
    const auto& c = ctx.config;
    auto enc = vl::init_vl<float>(c.vl_config(), ctx.seed(kSeedVl));
    vl::VLTrainConfig tc;
    tc.epochs = c.vl_epochs;
    tc.batch_size = c.vl_batch_size;
    tc.adam.lr = c.vl_lr;
    StageLoss loss;
    loss.initial = vl_probe(enc, split.train, kVlProbeSize);
    const auto curve = vl::pretrain_vl(enc, split.train, tc, ctx.seed(kSeedVl) + 1);
    loss.final = vl_probe(enc, split.train, kVlProbeSize);
    TensorFile f;
    f.meta = provenance(c, "vl");
    f.meta.emplace_back("epochs", std::to_string(c.vl_epochs));
    put_loss(f.meta, loss);
    if (!curve.epoch_loss.empty()) {
        f.meta.emplace_back("epoch_loss_first", fmt(curve.epoch_loss.front()));
        f.meta.emplace_back("epoch_loss_last", fmt(curve.epoch_loss.back()));
    }
    f.meta.emplace_back("config", canonical(c));
    add_group(f, "vl", enc.params);
    write_checkpoint(ctx, "vl", f);
    return loss;
}

inline vl::VLEncoders<float> load_vl(const RunContext& ctx) {
    const auto f = read_checkpoint(ctx, "vl", "pretrain-vl");
    vl::VLEncoders<float> e{ctx.config.vl_config(), read_group<float>(f, "vl")};
    check_group(e.params, vl::init_vl<float>(e.config, 0).params, ctx.checkpoint("vl").string());
    return e;
}

// --- train-ddpm ------------------------------------------------------------

// Diffusion training pool: pre and post images of every training case, in
// model space. Item 2i is case i's pre image, 2i + 1 its post image.
inline std::vector<nd::Tensor<float>> image_pool(const std::vector<const data::PhantomCase*>& cases) {
    std::vector<nd::Tensor<float>> out;
    for (const auto* c : cases) {
        out.push_back(cbi::to_model_space<float>(c->pre_image));
        out.push_back(cbi::to_model_space<float>(c->post_image));
    }
    return out;
}

inline StageLoss curve_loss(const diffusion::TrainCurve& c) { return {c.probe_initial, c.probe_final}; }

inline StageLoss run_train_ddpm(const RunContext& ctx) {
    const auto split = load_split(ctx);
    const auto& c = ctx.config;
    auto d = nd::init_denoiser<float>(c.denoiser(), ctx.seed(kSeedDdpm));
    const auto s = diffusion::make_schedule(c.T, diffusion::parse_schedule_kind(c.schedule_kind));
    const auto curve = diffusion::train_ddpm(d, image_pool(split.train), s, RunConfig::train_config(c.ddpm),
                                             ctx.seed(kSeedDdpm) + 1);
    TensorFile f;
    f.meta = provenance(c, "ddpm");
    f.meta.emplace_back("steps", std::to_string(c.ddpm.steps));
    put_loss(f.meta, curve_loss(curve));
    f.meta.emplace_back("config", canonical(c));
    add_group(f, "base", d.params);
    write_checkpoint(ctx, "ddpm", f);
    return curve_loss(curve);
}

inline nd::Denoiser<float> load_base(const RunContext& ctx, const TensorFile& f, const std::string& what) {
    nd::Denoiser<float> d{ctx.config.denoiser(), read_group<float>(f, "base")};
    check_group(d.params, nd::init_denoiser<float>(d.config, 0).params, what);
    return d;
}

// --- train-control -----------------------------------------------------------

inline std::vector<std::vector<float>> anatomy_controls(const vl::VLEncoders<float>& e,
                                                        const std::vector<const data::PhantomCase*>& cases) {
    std::vector<std::vector<float>> out;
    for (const auto* c : cases) {
        auto ca = control::make_anatomy_control(e, c->vessel_mask, c->lobe_mask);
        out.push_back(ca);  // pre image
        out.push_back(ca);  // post image shares the anatomy
    }
    return out;
}

inline StageLoss run_train_control(const RunContext& ctx) {
    const auto& c = ctx.config;
    const auto ddpm = read_checkpoint(ctx, "ddpm", "train-ddpm");
    const auto enc = load_vl(ctx);
    const auto split = load_split(ctx);
    const auto base = load_base(ctx, ddpm, ctx.checkpoint("ddpm").string());
    const std::uint64_t vl_hash = nd::hash_store(enc.params);
    auto cd = control::make_controlled(base, 2 * c.vl.proj_dim, ctx.seed(kSeedControl));
    const auto s = diffusion::make_schedule(c.T, diffusion::parse_schedule_kind(c.schedule_kind));
    const auto curve = control::train_stage1(cd, s, image_pool(split.train), anatomy_controls(enc, split.train),
                                             RunConfig::train_config(c.control), ctx.seed(kSeedControl) + 1);
    require(nd::hash_store(enc.params) == vl_hash, "train-control: VL parameters changed");
    TensorFile f;
    f.meta = provenance(c, "control");
    f.meta.emplace_back("steps", std::to_string(c.control.steps));
    f.meta.emplace_back("ctrl_dim", std::to_string(cd.ctrl_dim));
    f.meta.emplace_back("base_hash", std::to_string(nd::hash_store(cd.base.params)));
    put_loss(f.meta, curve_loss(curve));
    f.meta.emplace_back("config", canonical(c));
    add_group(f, "base", cd.base.params);
    add_group(f, "branch", cd.branch);
    write_checkpoint(ctx, "control", f);
    return curve_loss(curve);
}

inline control::ControlledDenoiser<float> load_controlled(const RunContext& ctx, const TensorFile& f,
                                                          const std::string& what, std::size_t ctrl_dim) {
    control::ControlledDenoiser<float> cd{load_base(ctx, f, what), read_group<float>(f, "branch"), ctrl_dim};
    check_group(cd.branch, control::make_controlled(cd.base, ctrl_dim, 0).branch, what);
    return cd;
}

// --- train-cbi -----------------------------------------------------------------

inline void add_norm(TensorFile& f, const cbi::NormStats& n) {
    nd::Tensor<double> t({2, 7});
    t.at(0, 0) = n.age_mean;
    t.at(1, 0) = n.age_std;
    for (std::size_t k = 0; k < 6; ++k) {
        t.at(0, k + 1) = n.blood_mean[k];
        t.at(1, k + 1) = n.blood_std[k];
    }
    f.records.emplace_back("norm/moments", t);
    auto levels = [&f](const std::string& name, const std::vector<double>& v) {
        nd::Tensor<double> l({v.size()});
        std::copy(v.begin(), v.end(), l.data());
        f.records.emplace_back("norm/" + name, l);
    };
    std::vector<double> sx, rc, pd;
    for (auto v : n.sexes) sx.push_back(static_cast<double>(v));
    for (auto v : n.races) rc.push_back(static_cast<double>(v));
    for (auto v : n.pdl1s) pd.push_back(static_cast<double>(v));
    levels("sex_levels", sx);
    levels("race_levels", rc);
    levels("pdl1_levels", pd);
}

inline cbi::NormStats read_norm(const TensorFile& f) {
    cbi::NormStats n;
    const auto t = f.get<double>("norm/moments");
    if (t.shape() != nd::Shape{2, 7}) throw IntegrityError("norm/moments has shape " + nd::shape_str(t.shape()));
    n.age_mean = t.at(0, 0);
    n.age_std = t.at(1, 0);
    for (std::size_t k = 0; k < 6; ++k) {
        n.blood_mean[k] = t.at(0, k + 1);
        n.blood_std[k] = t.at(1, k + 1);
    }
    const auto sx = f.get<double>("norm/sex_levels"), rc = f.get<double>("norm/race_levels"),
               pd = f.get<double>("norm/pdl1_levels");
    for (double v : sx.values()) n.sexes.insert(static_cast<data::Sex>(v));
    for (double v : rc.values()) n.races.insert(static_cast<data::Race>(v));
    for (double v : pd.values()) n.pdl1s.insert(static_cast<data::Pdl1>(v));
    return n;
}

inline StageLoss run_train_cbi(const RunContext& ctx) {
    const auto& c = ctx.config;
    const auto ctl = read_checkpoint(ctx, "control", "train-control");
    const auto split = load_split(ctx);
    const std::string what = ctx.checkpoint("control").string();
    const auto stage1 =
        load_controlled(ctx, ctl, what, static_cast<std::size_t>(parse_int(meta_required(ctl, "ctrl_dim", what), what)));
    std::vector<const data::ClinicalRecord*> recs;
    for (const auto* cs : split.train) recs.push_back(&cs->clinical);
    const auto norm = cbi::fit_norm_stats(recs);
    auto adapter = cbi::init_adapter<float>(c.adapter, norm, ctx.seed(kSeedCbi));
    auto model = cbi::make_stage2(stage1, adapter, ctx.seed(kSeedCbi) + 1);
    std::vector<nd::Tensor<float>> targets;
    cbi::CondInputs<float> in;
    for (const auto* cs : split.train) {
        targets.push_back(cbi::to_model_space<float>(cs->post_image));
        in.z0.push_back(cbi::to_model_space<float>(cs->pre_image));
        in.raw.push_back(cbi::encode_clinical(cs->clinical, norm));
    }
    const auto s = diffusion::make_schedule(c.T, diffusion::parse_schedule_kind(c.schedule_kind));
    const auto curve =
        cbi::train_stage2(model, s, targets, in, RunConfig::train_config(c.cbi), ctx.seed(kSeedCbi) + 2);
    TensorFile f;
    f.meta = provenance(c, "cbi");
    f.meta.emplace_back("steps", std::to_string(c.cbi.steps));
    f.meta.emplace_back("base_hash", std::to_string(nd::hash_store(model.cd.base.params)));
    put_loss(f.meta, curve_loss(curve));
    f.meta.emplace_back("config", canonical(c));
    add_group(f, "base", model.cd.base.params);
    add_group(f, "branch", model.cd.branch);
    add_group(f, "adapter", model.adapter.params);
    add_norm(f, norm);
    write_checkpoint(ctx, "cbi", f);
    return curve_loss(curve);
}

inline cbi::Stage2Model<float> load_stage2(const RunContext& ctx) {
    const auto f = read_checkpoint(ctx, "cbi", "train-cbi");
    const std::string what = ctx.checkpoint("cbi").string();
    cbi::Stage2Model<float> m{load_controlled(ctx, f, what, ctx.config.adapter.d_tok),
                              {ctx.config.adapter, read_group<float>(f, "adapter"), read_norm(f)}};
    check_group(m.adapter.params, cbi::init_adapter<float>(ctx.config.adapter, m.adapter.norm, 0).params, what);
    return m;
}

// --- predict ---------------------------------------------------------------------

struct Prediction {
    std::string case_id;
    std::size_t fold = 0;
    int label = 0;
    double prob = 0.0;
    double risk = 0.0;
    double time = 0.0;
    int event = 0;
};

struct PredictResult {
    std::vector<Prediction> predictions;
    std::map<std::size_t, StageLoss> class_loss, cox_loss;  // per fold
};

inline std::string encode_predictions(const std::vector<Prediction>& ps) {
    std::string out = "# case_id\tfold\tlabel\tprob\trisk\ttime\tevent\n";
    for (const auto& p : ps)
        out += p.case_id + "\t" + std::to_string(p.fold) + "\t" + std::to_string(p.label) + "\t" + fmt(p.prob) +
               "\t" + fmt(p.risk) + "\t" + fmt(p.time) + "\t" + std::to_string(p.event) + "\n";
    return out;
}

inline std::vector<Prediction> read_predictions(const fs::path& path) {
    std::istringstream is(read_file(path));
    std::vector<Prediction> out;
    std::string line;
    const std::string what = path.string();
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto f = data::detail::split(line, '\t');
        if (f.size() != 7) throw IoError("corrupt file " + what + ": expected 7 fields");
        out.push_back({f[0], static_cast<std::size_t>(parse_int(f[1], what)), static_cast<int>(parse_int(f[2], what)),
                       parse_double(f[3], what), parse_double(f[4], what), parse_double(f[5], what),
                       static_cast<int>(parse_int(f[6], what))});
    }
    return out;
}

inline PredictResult run_predict(const RunContext& ctx) {
    const auto& c = ctx.config;
    const auto model = load_stage2(ctx);
    const auto split = load_split(ctx);
    const auto s = diffusion::make_schedule(c.T, diffusion::parse_schedule_kind(c.schedule_kind));
    const std::uint64_t model_hash = nd::hash_store(model.cd.base.params) ^ nd::hash_store(model.cd.branch) ^
                                     nd::hash_store(model.adapter.params);
    const auto& cases = split.ds.cases;
    heads::Features feats;
    for (std::size_t i = 0; i < cases.size(); ++i)
        feats.push_back(heads::extract_features(model, cases[i].pre_image, cases[i].clinical, s,
                                                c.feature_timestep(), derive_seed(ctx.seed(kSeedFeatures), i)));
    require(model_hash == (nd::hash_store(model.cd.base.params) ^ nd::hash_store(model.cd.branch) ^
                           nd::hash_store(model.adapter.params)),
            "predict: model parameters changed during feature extraction");

    PredictResult r;
    TensorFile f;
    f.meta = provenance(c, "heads");
    f.meta.emplace_back("t_feat", std::to_string(c.feature_timestep()));
    f.meta.emplace_back("feature_dim", std::to_string(feats.front().size()));
    for (std::size_t fold = 0; fold < c.n_folds; ++fold) {
        heads::Features x;
        std::vector<int> y, ev;
        std::vector<double> t;
        for (std::size_t i = 0; i < cases.size(); ++i)
            if (split.fold_of[i] != fold) {
                x.push_back(feats[i]);
                y.push_back(cases[i].responder ? 1 : 0);
                t.push_back(cases[i].survival_time);
                ev.push_back(cases[i].event ? 1 : 0);
            }
        const auto h = heads::fit_heads(x, y, t, ev, c.head_config(), derive_seed(ctx.seed(kSeedHeads), fold));
        r.class_loss[fold] = {h.class_loss.front(), h.class_loss.back()};
        r.cox_loss[fold] = {h.cox_loss.front(), h.cox_loss.back()};
        const std::string k = "fold" + std::to_string(fold) + "/";
        auto vec = [](const std::vector<double>& v) {
            nd::Tensor<double> out({v.size()});
            std::copy(v.begin(), v.end(), out.data());
            return out;
        };
        f.records.emplace_back(k + "cls.w", vec(h.classifier.w));
        f.records.emplace_back(k + "cls.b", vec({h.classifier.b}));
        f.records.emplace_back(k + "cox.beta", vec(h.survival.beta));
        f.records.emplace_back(k + "cox.event_times", vec(h.survival.event_times));
        f.records.emplace_back(k + "cox.baseline_steps", vec(h.survival.baseline_steps));
        f.meta.emplace_back(k + "class_loss_initial", fmt(r.class_loss[fold].initial));
        f.meta.emplace_back(k + "class_loss_final", fmt(r.class_loss[fold].final));
        f.meta.emplace_back(k + "cox_loss_initial", fmt(r.cox_loss[fold].initial));
        f.meta.emplace_back(k + "cox_loss_final", fmt(r.cox_loss[fold].final));
        for (std::size_t i = 0; i < cases.size(); ++i)
            if (split.fold_of[i] == fold)
                r.predictions.push_back({cases[i].case_id, fold, cases[i].responder ? 1 : 0,
                                         heads::predict_response(h.classifier, feats[i]),
                                         heads::risk_score(h.survival, feats[i]), cases[i].survival_time,
                                         cases[i].event ? 1 : 0});
    }
    f.meta.emplace_back("config", canonical(c));
    write_checkpoint(ctx, "heads", f);
    write_atomic(ctx.predictions(), encode_predictions(r.predictions));
    return r;
}

// --- generate ----------------------------------------------------------------

struct Generated {
    const data::PhantomCase* source = nullptr;
    data::Image image;
};

// Held-out fold first, then the remaining folds in order, truncated to n_generate.
inline std::vector<std::size_t> generation_order(const Split& split, const RunConfig& c) {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < split.ds.cases.size(); ++i)
        if (split.fold_of[i] == c.holdout_fold) order.push_back(i);
    for (std::size_t i = 0; i < split.ds.cases.size(); ++i)
        if (split.fold_of[i] != c.holdout_fold) order.push_back(i);
    order.resize(std::min(order.size(), c.n_generate));
    return order;
}

inline std::vector<Generated> run_generate(const RunContext& ctx, const Split& split) {
    const auto& c = ctx.config;
    const auto model = load_stage2(ctx);
    const auto s = diffusion::make_schedule(c.T, diffusion::parse_schedule_kind(c.schedule_kind));
    std::vector<Generated> out;
    auto meta = provenance(c, "generate");
    std::vector<std::string> comments;
    for (const auto& [k, v] : meta) comments.push_back(k + "=" + v);
    for (std::size_t i : generation_order(split, c)) {
        const auto& cs = split.ds.cases[i];
        auto img = cbi::generate_posttreatment(model, cs.pre_image, cs.clinical, s, derive_seed(ctx.seed(kSeedGenerate), i));
        TensorFile f;
        f.meta = meta;
        f.meta.emplace_back("case_id", cs.case_id);
        f.records.emplace_back("post_image", img);
        write_tensor_file(ctx.generated_dir() / (cs.case_id + ".post.tensor"), f);
        auto cm = comments;
        cm.push_back("case_id=" + cs.case_id);
        write_atomic(ctx.generated_dir() / (cs.case_id + ".post.pgm"), encode_pgm(img, cm));
        out.push_back({&cs, std::move(img)});
    }
    return out;
}

// --- evaluate ----------------------------------------------------------------------

// Mean of (generated - pre) over the pre-treatment tumor pixels.
inline double tumor_change(const data::PhantomCase& c, const data::Image& generated) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < generated.size(); ++i)
        if (c.tumor_mask_pre[i]) {
            s += generated[i] - c.pre_image[i];
            ++n;
        }
    return n ? s / static_cast<double>(n) : 0.0;
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : "undefined"; }

inline Report run_evaluate(const RunContext& ctx) {
    const auto& c = ctx.config;
    require_file(ctx.predictions(), "predict");
    const auto heads_ckpt = read_checkpoint(ctx, "heads", "predict");
    const auto preds = read_predictions(ctx.predictions());
    const auto split = load_split(ctx);

    Report rep;
    rep.add("format", "immunodiff-report 1");
    rep.add("seed", std::to_string(c.seed));
    rep.add("config_hash", config_hash(c));
    rep.add("n_folds", std::to_string(c.n_folds));
    rep.add("holdout_fold", std::to_string(c.holdout_fold));

    std::map<std::string, std::vector<double>> per_metric;
    const std::vector<std::string> names{"balanced_accuracy", "f1", "precision", "recall", "c_index"};
    for (std::size_t fold = 0; fold < c.n_folds; ++fold) {
        std::vector<int> pred, lab, ev;
        std::vector<double> risk, times;
        for (const auto& p : preds)
            if (p.fold == fold) {
                pred.push_back(p.prob >= 0.5 ? 1 : 0);
                lab.push_back(p.label);
                risk.push_back(p.risk);
                times.push_back(p.time);
                ev.push_back(p.event);
            }
        if (lab.empty()) throw IntegrityError("predictions hold no cases for fold " + std::to_string(fold));
        const auto counts = metrics::confusion(pred, lab);
        const auto m = metrics::classification_metrics(counts);
        std::optional<double> ci;
        try {
            ci = heads::concordance_index(risk, times, ev);
        } catch (const UndefinedResultError&) {
        }
        const std::string k = "fold." + std::to_string(fold) + ".";
        rep.add(k + "n_cases", std::to_string(lab.size()));
        rep.add(k + "confusion", "tp=" + std::to_string(counts.tp) + ",fp=" + std::to_string(counts.fp) +
                                     ",tn=" + std::to_string(counts.tn) + ",fn=" + std::to_string(counts.fn));
        const std::map<std::string, std::optional<double>> vals{{"balanced_accuracy", m.balanced_accuracy},
                                                                 {"f1", m.f1},
                                                                 {"precision", m.precision},
                                                                 {"recall", m.recall},
                                                                 {"c_index", ci}};
        for (const auto& n : names) {
            rep.add(k + n, fmt_opt(vals.at(n)));
            if (vals.at(n)) per_metric[n].push_back(*vals.at(n));
        }
    }
    const std::string hk = "fold." + std::to_string(c.holdout_fold) + ".";
    for (const auto& n : names) rep.add("holdout." + n, *rep.find(hk + n));
    for (const auto& n : names) {
        const auto& v = per_metric[n];
        if (v.empty()) {
            rep.add(n + ".mean", "undefined");
            rep.add(n + ".std", "undefined");
        } else {
            const auto ms = metrics::mean_std(v);
            rep.add(n + ".mean", fmt(ms.mean));
            rep.add(n + ".std", fmt(ms.std));
        }
        rep.add(n + ".n_defined_folds", std::to_string(v.size()));
    }

    // Training losses recorded by each stage.
    const std::vector<std::pair<std::string, std::string>> stages{
        {"vl", "pretrain-vl"}, {"ddpm", "train-ddpm"}, {"control", "train-control"}, {"cbi", "train-cbi"}};
    for (const auto& [stage, producer] : stages) {
        const auto f = read_checkpoint(ctx, stage, producer);
        const auto l = get_loss(f, ctx.checkpoint(stage).string());
        rep.add("stage." + stage + ".loss_initial", fmt(l.initial));
        rep.add("stage." + stage + ".loss_final", fmt(l.final));
        rep.add("stage." + stage + ".loss_drop", fmt(l.drop()));
    }
    {
        const std::string k = "fold" + std::to_string(c.holdout_fold) + "/";
        const std::string what = ctx.checkpoint("heads").string();
        for (const char* head : {"class", "cox"}) {
            const StageLoss l{parse_double(meta_required(heads_ckpt, k + head + "_loss_initial", what), what),
                              parse_double(meta_required(heads_ckpt, k + head + "_loss_final", what), what)};
            const std::string p = std::string("stage.heads_") + head;
            rep.add(p + ".loss_initial", fmt(l.initial));
            rep.add(p + ".loss_final", fmt(l.final));
            rep.add(p + ".loss_drop", fmt(l.drop()));
        }
    }

    // Generated post-treatment images against the real ones.
    const auto gen = run_generate(ctx, split);
    std::vector<std::vector<double>> a, b;
    double ssim_sum = 0.0;
    double resp_sum = 0.0, non_sum = 0.0;
    std::size_t n_resp = 0, n_non = 0;
    for (const auto& g : gen) {
        a.emplace_back(g.image.data(), g.image.data() + g.image.size());
        b.emplace_back(g.source->post_image.data(), g.source->post_image.data() + g.source->post_image.size());
        ssim_sum += metrics::ssim(g.image, g.source->post_image, c.ssim_window);
        const double d = tumor_change(*g.source, g.image);
        if (g.source->responder) {
            resp_sum += d;
            ++n_resp;
        } else {
            non_sum += d;
            ++n_non;
        }
    }
    rep.add("generation.n_cases", std::to_string(gen.size()));
    std::string ids;
    for (const auto& g : gen) ids += (ids.empty() ? "" : ",") + g.source->case_id;
    rep.add("generation.case_ids", ids);
    if (gen.size() >= 2) {
        const auto m = metrics::mmd(a, b, c.mmd_bandwidth);
        rep.add("generation.mmd", fmt(m.value));
        rep.add("generation.mmd_raw", fmt(m.raw));
        rep.add("generation.mmd_sigma", fmt(m.sigma));
    } else {
        rep.add("generation.mmd", "undefined");
    }
    rep.add("generation.mmd_space", "pixel");
    rep.add("generation.ssim", gen.empty() ? "undefined" : fmt(ssim_sum / static_cast<double>(gen.size())));
    rep.add("generation.tumor_change.responders", n_resp ? fmt(resp_sum / static_cast<double>(n_resp)) : "undefined");
    rep.add("generation.tumor_change.nonresponders", n_non ? fmt(non_sum / static_cast<double>(n_non)) : "undefined");
    rep.add("generation.n_responders", std::to_string(n_resp));
    rep.add("generation.n_nonresponders", std::to_string(n_non));
    rep.add("config", canonical(c));
    write_report(rep, ctx.report());
    return rep;
}

}  // namespace immunodiff::pipeline
