#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "immunodiff/core/error.hpp"
#include "immunodiff/core/tensor_io.hpp"
#include "immunodiff/data/phantom.hpp"

namespace immunodiff::data {

// Dataset directory layout:
//   manifest                      key=value text (seed, sizes, folds, provenance)
//   records                       tab-separated, one line per case after a '#' header
//   tensors/<case_id>.<field>.tensor   one tensor file per image / mask
//   pgm/<case_id>.{pre,post}.pgm  8-bit previews (not read back)
inline constexpr std::array<const char*, 6> kCaseTensorFields{"pre_image",   "post_image",     "vessel_mask",
                                                               "lobe_mask",   "tumor_mask_pre", "tumor_mask_post"};

inline constexpr const char* kManifestMagic = "immunodiff-dataset 1";

inline std::filesystem::path case_tensor_path(const std::filesystem::path& dir, const std::string& id,
                                              const std::string& field) {
    return dir / "tensors" / (id + "." + field + ".tensor");
}

namespace detail {

inline nd::Tensor<double> mask_to_tensor(const Mask& m) { return m.cast<double>(); }

inline Mask tensor_to_mask(const nd::Tensor<double>& t, const std::string& what) {
    Mask m(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] != 0.0 && t[i] != 1.0) throw IntegrityError(what + " is not a binary mask");
        m[i] = t[i] != 0.0 ? 1 : 0;
    }
    return m;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

}  // namespace detail

inline std::string encode_manifest(const DatasetManifest& m,
                                   const std::vector<std::pair<std::string, std::string>>& provenance) {
    std::string out = std::string("format=") + kManifestMagic + "\n";
    for (const auto& [k, v] : provenance) out += k + "=" + v + "\n";
    out += "seed=" + std::to_string(m.seed) + "\n";
    out += "n_cases=" + std::to_string(m.n_cases) + "\n";
    out += "responder_fraction=" + format_double(m.responder_fraction) + "\n";
    out += "image_size=" + std::to_string(m.height) + "x" + std::to_string(m.width) + "\n";
    out += "n_folds=" + std::to_string(m.splits.size()) + "\n";
    for (const auto& [fold, ids] : m.splits) {
        out += "fold." + std::to_string(fold) + "=";
        for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + ids[i];
        out += "\n";
    }
    return out;
}

inline std::string records_header() {
    return "# case_id\tage\tsex\trace\tcea\tanc\talc\tnlr\taec\tamc\tpdl1\tresponder\tsurvival_time\tevent\n";
}

inline std::string encode_record(const PhantomCase& c) {
    const auto& r = c.clinical;
    std::string line = c.case_id;
    for (const std::string& f :
         {format_double(r.age), to_string(r.sex), to_string(r.race), format_double(r.cea), format_double(r.anc),
          format_double(r.alc), format_double(r.nlr), format_double(r.aec), format_double(r.amc), to_string(r.pdl1),
          std::string(c.responder ? "1" : "0"), format_double(c.survival_time), std::string(c.event ? "1" : "0")})
        line += "\t" + f;
    return line + "\n";
}

inline void persist_dataset(const Dataset& ds, const std::filesystem::path& dir,
                            const std::vector<std::pair<std::string, std::string>>& provenance = {}) {
    require(ds.cases.size() == ds.manifest.n_cases, "persist_dataset: manifest count differs from case list");
    std::string records = records_header();
    for (const auto& c : ds.cases) {
        records += encode_record(c);
        const std::vector<std::pair<const char*, nd::Tensor<double>>> fields{
            {"pre_image", c.pre_image},
            {"post_image", c.post_image},
            {"vessel_mask", detail::mask_to_tensor(c.vessel_mask)},
            {"lobe_mask", detail::mask_to_tensor(c.lobe_mask)},
            {"tumor_mask_pre", detail::mask_to_tensor(c.tumor_mask_pre)},
            {"tumor_mask_post", detail::mask_to_tensor(c.tumor_mask_post)}};
        for (const auto& [field, t] : fields) {
            TensorFile f;
            f.meta = provenance;
            f.meta.emplace_back("case_id", c.case_id);
            f.records.emplace_back(field, t);
            write_tensor_file(case_tensor_path(dir, c.case_id, field), f);
        }
        std::vector<std::string> comments{"case_id=" + c.case_id};
        for (const auto& [k, v] : provenance) comments.push_back(k + "=" + v);
        write_atomic(dir / "pgm" / (c.case_id + ".pre.pgm"), encode_pgm(c.pre_image, comments));
        write_atomic(dir / "pgm" / (c.case_id + ".post.pgm"), encode_pgm(c.post_image, comments));
    }
    write_atomic(dir / "records", records);
    // Manifest last: its presence marks a complete dataset directory.
    write_atomic(dir / "manifest", encode_manifest(ds.manifest, provenance));
}

inline std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw IoError("corrupt file " + path.string() + ": bad line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const fs::path manifest_path = dir / "manifest";
    if (!fs::exists(manifest_path)) throw IoError("dataset manifest missing: " + manifest_path.string());
    const auto kv = read_key_values(manifest_path);
    auto need = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw IoError("corrupt file " + manifest_path.string() + ": missing key '" + key + "'");
        return it->second;
    };
    if (need("format") != kManifestMagic) throw IoError("corrupt file " + manifest_path.string() + ": bad format tag");

    Dataset ds;
    auto& m = ds.manifest;
    const std::string mp = manifest_path.string();
    m.seed = static_cast<std::uint64_t>(std::stoull(need("seed")));
    m.n_cases = static_cast<std::size_t>(parse_int(need("n_cases"), mp));
    m.responder_fraction = parse_double(need("responder_fraction"), mp);
    {
        const std::string& s = need("image_size");
        const std::size_t x = s.find('x');
        if (x == std::string::npos) throw IoError("corrupt file " + mp + ": bad image_size");
        m.height = static_cast<std::size_t>(parse_int(s.substr(0, x), mp));
        m.width = static_cast<std::size_t>(parse_int(s.substr(x + 1), mp));
    }
    const auto n_folds = static_cast<std::size_t>(parse_int(need("n_folds"), mp));
    for (std::size_t f = 0; f < n_folds; ++f) {
        const std::string& ids = need("fold." + std::to_string(f));
        m.splits[f] = ids.empty() ? std::vector<std::string>{} : detail::split(ids, ',');
    }

    const fs::path records_path = dir / "records";
    if (!fs::exists(records_path)) throw IoError("dataset records missing: " + records_path.string());
    std::istringstream rs(read_file(records_path));
    std::string line;
    while (std::getline(rs, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto f = detail::split(line, '\t');
        if (f.size() != 14) throw IoError("corrupt file " + records_path.string() + ": expected 14 fields, got " +
                                          std::to_string(f.size()));
        const std::string rp = records_path.string();
        PhantomCase c;
        c.case_id = f[0];
        auto& r = c.clinical;
        r.age = parse_double(f[1], rp);
        r.sex = parse_sex(f[2]);
        r.race = parse_race(f[3]);
        r.cea = parse_double(f[4], rp);
        r.anc = parse_double(f[5], rp);
        r.alc = parse_double(f[6], rp);
        r.nlr = parse_double(f[7], rp);
        r.aec = parse_double(f[8], rp);
        r.amc = parse_double(f[9], rp);
        r.pdl1 = parse_pdl1(f[10]);
        c.responder = f[11] == "1";
        c.survival_time = parse_double(f[12], rp);
        c.event = f[13] == "1";
        ds.cases.push_back(std::move(c));
    }
    if (ds.cases.size() != m.n_cases)
        throw IntegrityError("dataset " + dir.string() + ": manifest lists " + std::to_string(m.n_cases) +
                             " cases but records hold " + std::to_string(ds.cases.size()));

    std::set<std::string> ids;
    for (const auto& c : ds.cases) ids.insert(c.case_id);
    std::set<std::string> in_folds;
    for (const auto& [fold, fids] : m.splits)
        for (const auto& id : fids) {
            if (!ids.contains(id)) throw IntegrityError("fold " + std::to_string(fold) + " names unknown case " + id);
            if (!in_folds.insert(id).second) throw IntegrityError("case " + id + " appears in more than one fold");
        }
    if (in_folds.size() != ids.size()) throw IntegrityError("folds do not cover every case");

    std::vector<std::string> missing;
    for (const auto& c : ds.cases)
        for (const char* field : kCaseTensorFields)
            if (!fs::exists(case_tensor_path(dir, c.case_id, field))) missing.push_back(c.case_id + "." + field);
    if (!missing.empty()) {
        std::string msg = "dataset " + dir.string() + ": missing tensor files for";
        for (const auto& s : missing) msg += " " + s;
        throw IntegrityError(msg);
    }

    for (auto& c : ds.cases) {
        auto load = [&](const char* field) {
            const auto path = case_tensor_path(dir, c.case_id, field);
            auto t = read_tensor_file(path).get<double>(field);
            if (t.shape() != nd::Shape{m.height, m.width})
                throw IntegrityError(path.string() + " has shape " + nd::shape_str(t.shape()));
            return t;
        };
        c.pre_image = load("pre_image");
        c.post_image = load("post_image");
        c.vessel_mask = detail::tensor_to_mask(load("vessel_mask"), c.case_id + ".vessel_mask");
        c.lobe_mask = detail::tensor_to_mask(load("lobe_mask"), c.case_id + ".lobe_mask");
        c.tumor_mask_pre = detail::tensor_to_mask(load("tumor_mask_pre"), c.case_id + ".tumor_mask_pre");
        c.tumor_mask_post = detail::tensor_to_mask(load("tumor_mask_post"), c.case_id + ".tumor_mask_post");
    }
    return ds;
}

}  // namespace immunodiff::data
