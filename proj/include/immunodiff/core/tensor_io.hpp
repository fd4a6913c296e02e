#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <utility>
#include <variant>
#include <vector>

#include "immunodiff/core/error.hpp"
#include "immunodiff/nd/tensor.hpp"

namespace immunodiff {

static_assert(std::endian::native == std::endian::little, "tensor files are written in native little-endian order");

// On-disk layout of a tensor file (checkpoints and dataset tensors):
//
//   immunodiff-tensors 1\n
//   key=value\n            (zero or more metadata lines, in order)
//   end\n
//   u64 record_count
//   record_count x { u32 name_len, name (UTF-8), u8 dtype (0 = f32, 1 = f64),
//                    u32 rank, rank x u64 extent, payload (little-endian, row-major) }
using AnyTensor = std::variant<nd::Tensor<float>, nd::Tensor<double>>;

struct TensorFile {
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<std::pair<std::string, AnyTensor>> records;

    const std::string* find_meta(const std::string& key) const {
        for (const auto& [k, v] : meta)
            if (k == key) return &v;
        return nullptr;
    }

    std::string meta_or(const std::string& key, const std::string& fallback) const {
        const std::string* v = find_meta(key);
        return v ? *v : fallback;
    }

    const AnyTensor* find(const std::string& name) const {
        for (const auto& [n, t] : records)
            if (n == name) return &t;
        return nullptr;
    }

    template <class T>
    nd::Tensor<T> get(const std::string& name) const {
        const AnyTensor* t = find(name);
        if (!t) throw IntegrityError("tensor record '" + name + "' not found");
        return std::visit([](const auto& v) { return v.template cast<T>(); }, *t);
    }
};

inline constexpr const char* kTensorMagic = "immunodiff-tensors 1";

// Shortest decimal representation that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& what) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw IoError("cannot parse number '" + s + "' in " + what);
    return v;
}

inline long long parse_int(const std::string& s, const std::string& what) {
    long long v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw IoError("cannot parse integer '" + s + "' in " + what);
    return v;
}

// Writes `bytes` to `path` via a temporary sibling and rename, so the final
// path either holds the previous content or the complete new content.
inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace detail {

template <class V>
void put(std::string& out, V v) {
    char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    out.append(buf, sizeof(V));
}

class Reader {
public:
    Reader(const std::string& data, std::size_t pos, std::string file) : d_(data), pos_(pos), file_(std::move(file)) {}

    template <class V>
    V get() {
        need(sizeof(V));
        V v;
        std::memcpy(&v, d_.data() + pos_, sizeof(V));
        pos_ += sizeof(V);
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = d_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void raw(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, d_.data() + pos_, n);
        pos_ += n;
    }

    bool done() const { return pos_ == d_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > d_.size()) throw IoError("truncated tensor file " + file_);
    }

    const std::string& d_;
    std::size_t pos_;
    std::string file_;
};

}  // namespace detail

inline std::string encode_tensor_file(const TensorFile& f) {
    std::string out = std::string(kTensorMagic) + "\n";
    for (const auto& [k, v] : f.meta) {
        require(k.find('=') == std::string::npos && k.find('\n') == std::string::npos && v.find('\n') == std::string::npos,
                "tensor file metadata must be single-line key=value, got key '" + k + "'");
        out += k + "=" + v + "\n";
    }
    out += "end\n";
    detail::put<std::uint64_t>(out, f.records.size());
    for (const auto& [name, any] : f.records) {
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        std::visit(
            [&out](const auto& t) {
                using T = typename std::decay_t<decltype(t)>::value_type;
                detail::put<std::uint8_t>(out, std::is_same_v<T, float> ? 0 : 1);
                detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
                for (std::size_t d : t.shape()) detail::put<std::uint64_t>(out, d);
                out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(T));
            },
            any);
    }
    return out;
}

inline TensorFile decode_tensor_file(const std::string& data, const std::string& file) {
    TensorFile f;
    std::size_t pos = 0;
    auto next_line = [&]() -> std::string {
        const std::size_t nl = data.find('\n', pos);
        if (nl == std::string::npos) throw IoError("corrupt tensor file " + file + ": unterminated header");
        std::string line = data.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    if (data.rfind(kTensorMagic, 0) != 0) throw IoError("corrupt tensor file " + file + ": bad magic");
    next_line();
    for (;;) {
        std::string line = next_line();
        if (line == "end") break;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw IoError("corrupt tensor file " + file + ": bad header line '" + line + "'");
        f.meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    detail::Reader r(data, pos, file);
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = r.get<std::uint32_t>();
        std::string name = r.bytes(len);
        const auto dtype = r.get<std::uint8_t>();
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw IoError("corrupt tensor file " + file + ": rank " + std::to_string(rank));
        nd::Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
        if (dtype == 0) {
            nd::Tensor<float> t(shape);
            r.raw(t.data(), t.size() * sizeof(float));
            f.records.emplace_back(std::move(name), std::move(t));
        } else if (dtype == 1) {
            nd::Tensor<double> t(shape);
            r.raw(t.data(), t.size() * sizeof(double));
            f.records.emplace_back(std::move(name), std::move(t));
        } else {
            throw IoError("corrupt tensor file " + file + ": unknown dtype tag " + std::to_string(dtype));
        }
    }
    if (!r.done()) throw IoError("corrupt tensor file " + file + ": trailing bytes");
    return f;
}

inline void write_tensor_file(const std::filesystem::path& path, const TensorFile& f) {
    write_atomic(path, encode_tensor_file(f));
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
    return decode_tensor_file(read_file(path), path.string());
}

// 8-bit binary PGM with provenance comments; values clipped to [0, 1].
inline std::string encode_pgm(const nd::Tensor<double>& img, const std::vector<std::string>& comments) {
    require(img.rank() == 2, "encode_pgm expects an [H, W] image");
    std::string out = "P5\n";
    for (const auto& c : comments) out += "# " + c + "\n";
    out += std::to_string(img.dim(1)) + " " + std::to_string(img.dim(0)) + "\n255\n";
    for (double v : img.values()) {
        const double c = std::clamp(v, 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
    }
    return out;
}

}  // namespace immunodiff
