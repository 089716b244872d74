#pragma once
// Checkpoint container (little-endian):
//   char[8]  magic "MQCKPT01"
//   u32      format version (1)
//   u64      model config hash
//   u32      tensor count
//   per tensor: u32 name length, name bytes, u32 rows, u32 cols,
//               rows*cols f64 values in row-major order

#include "maxquery/core.hpp"
#include "maxquery/nn.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

namespace maxquery::checkpoint {

inline constexpr char kMagic[8] = {'M', 'Q', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <class T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    require(static_cast<bool>(in), ErrorCategory::Io, "truncated checkpoint");
    return v;
}

}  // namespace detail

inline void save(const std::filesystem::path& path, const nn::ParamList& params, std::uint64_t model_hash) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCategory::Io, "cannot write checkpoint " + path.string());
    out.write(kMagic, 8);
    detail::put<std::uint32_t>(out, kVersion);
    detail::put<std::uint64_t>(out, model_hash);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const nn::Param* p : params) {
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
        out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.rows()));
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.cols()));
        for (Eigen::Index r = 0; r < p->value.rows(); ++r)
            for (Eigen::Index c = 0; c < p->value.cols(); ++c) detail::put<double>(out, p->value(r, c));
    }
    require(static_cast<bool>(out), ErrorCategory::Io, "checkpoint write failed " + path.string());
}

struct Contents {
    std::uint64_t model_hash = 0;
    std::map<std::string, Matrix> tensors;
};

inline Contents read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCategory::Io, "cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    require(in && std::memcmp(magic, kMagic, 8) == 0, ErrorCategory::Io, "not a checkpoint: " + path.string());
    const auto version = detail::get<std::uint32_t>(in);
    require(version == kVersion, ErrorCategory::Io, "unsupported checkpoint version " + std::to_string(version));
    Contents c;
    c.model_hash = detail::get<std::uint64_t>(in);
    const auto count = detail::get<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name(detail::get<std::uint32_t>(in), '\0');
        in.read(name.data(), static_cast<std::streamsize>(name.size()));
        const auto rows = detail::get<std::uint32_t>(in);
        const auto cols = detail::get<std::uint32_t>(in);
        Matrix m(rows, cols);
        for (std::uint32_t r = 0; r < rows; ++r)
            for (std::uint32_t col = 0; col < cols; ++col) m(r, col) = detail::get<double>(in);
        c.tensors.emplace(std::move(name), std::move(m));
    }
    return c;
}

/// Loads values into `params` by name; every parameter must be present with a
/// matching shape.
inline void load(const std::filesystem::path& path, const nn::ParamList& params, std::uint64_t expected_model_hash) {
    const auto c = read(path);
    require(c.model_hash == expected_model_hash, ErrorCategory::Config,
            "checkpoint " + path.string() + " was written for a different model configuration");
    for (nn::Param* p : params) {
        const auto it = c.tensors.find(p->name);
        require(it != c.tensors.end(), ErrorCategory::Io, "checkpoint lacks tensor " + p->name);
        require(it->second.rows() == p->value.rows() && it->second.cols() == p->value.cols(), ErrorCategory::Shape,
                "checkpoint tensor " + p->name + " has the wrong shape");
        p->value = it->second;
    }
}

}  // namespace maxquery::checkpoint
