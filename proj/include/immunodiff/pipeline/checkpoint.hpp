#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "immunodiff/core/error.hpp"
#include "immunodiff/core/tensor_io.hpp"
#include "immunodiff/nd/params.hpp"
#include "immunodiff/pipeline/config.hpp"

namespace immunodiff::pipeline {

// Checkpoints are tensor files (see tensor_io.hpp). Parameter groups are
// stored as records named "<group>/<param>"; the header carries the stage
// name, seed, config hash, the canonical config, and stage statistics.
using Meta = std::vector<std::pair<std::string, std::string>>;

inline Meta provenance(const RunConfig& c, const std::string& stage) {
    return {{"stage", stage}, {"seed", std::to_string(c.seed)}, {"config_hash", config_hash(c)}};
}

template <class T>
void add_group(TensorFile& f, const std::string& group, const nd::ParamStore<T>& p) {
    for (const auto& [name, t] : p) f.records.emplace_back(group + "/" + name, t);
}

template <class T>
nd::ParamStore<T> read_group(const TensorFile& f, const std::string& group) {
    nd::ParamStore<T> out;
    const std::string prefix = group + "/";
    for (const auto& [name, any] : f.records)
        if (name.rfind(prefix, 0) == 0)
            out[name.substr(prefix.size())] = std::visit([](const auto& t) { return t.template cast<T>(); }, any);
    return out;
}

// Same names and shapes as `expected`, else an integrity error naming the file.
template <class T>
void check_group(const nd::ParamStore<T>& got, const nd::ParamStore<T>& expected, const std::string& what) {
    for (const auto& [name, t] : expected) {
        auto it = got.find(name);
        if (it == got.end()) throw IntegrityError(what + ": parameter '" + name + "' missing");
        if (it->second.shape() != t.shape())
            throw IntegrityError(what + ": parameter '" + name + "' has shape " + nd::shape_str(it->second.shape()) +
                                 ", config expects " + nd::shape_str(t.shape()));
    }
    for (const auto& [name, t] : got)
        if (!expected.contains(name)) throw IntegrityError(what + ": unexpected parameter '" + name + "'");
}

inline std::string meta_required(const TensorFile& f, const std::string& key, const std::string& what) {
    const std::string* v = f.find_meta(key);
    if (!v) throw IntegrityError(what + ": metadata key '" + key + "' missing");
    return *v;
}

}  // namespace immunodiff::pipeline
