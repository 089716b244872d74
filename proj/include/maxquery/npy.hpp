#pragma once
// Minimal reader/writer for the NumPy .npy v1.0 container: magic, a
// little-endian header length, an ASCII dict header
// {'descr': ..., 'fortran_order': False, 'shape': (...), } and a
// row-major little-endian payload. Supported dtypes: <f8, <i4, |u1.

#include "maxquery/core.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace maxquery::npy {

enum class DType { Float64, Int32, UInt8 };

inline constexpr const char* descr(DType t) {
    switch (t) {
        case DType::Float64: return "<f8";
        case DType::Int32: return "<i4";
        case DType::UInt8: return "|u1";
    }
    return "";
}

inline constexpr std::size_t item_size(DType t) {
    switch (t) {
        case DType::Float64: return 8;
        case DType::Int32: return 4;
        case DType::UInt8: return 1;
    }
    return 0;
}

struct Array {
    DType dtype = DType::Float64;
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> bytes;

    std::size_t size() const {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        return n;
    }

    template <class T>
    std::vector<T> as() const {
        std::vector<T> out(size());
        switch (dtype) {
            case DType::Float64: copy_as<double>(out); break;
            case DType::Int32: copy_as<std::int32_t>(out); break;
            case DType::UInt8: copy_as<std::uint8_t>(out); break;
        }
        return out;
    }

private:
    template <class Src, class T>
    void copy_as(std::vector<T>& out) const {
        for (std::size_t i = 0; i < out.size(); ++i) {
            Src v;
            std::memcpy(&v, bytes.data() + i * sizeof(Src), sizeof(Src));
            out[i] = static_cast<T>(v);
        }
    }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "npy writer assumes a little-endian host");

inline std::string header_for(DType t, const std::vector<std::size_t>& shape) {
    std::ostringstream dict;
    dict << "{'descr': '" << descr(t) << "', 'fortran_order': False, 'shape': (";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        dict << shape[i];
        if (shape.size() == 1 || i + 1 < shape.size()) dict << ",";
        if (i + 1 < shape.size()) dict << " ";
    }
    dict << "), }";
    std::string h = dict.str();
    // magic(6) + version(2) + len(2) + header + '\n' padded to a multiple of 64
    const std::size_t total = 10 + h.size() + 1;
    h.append((64 - total % 64) % 64, ' ');
    h.push_back('\n');
    return h;
}

inline void write_raw(const std::filesystem::path& path, DType t, const std::vector<std::size_t>& shape,
                      const void* data, std::size_t count) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCategory::Io, "cannot open for writing: " + path.string());
    const std::string header = header_for(t, shape);
    const char magic[] = {'\x93', 'N', 'U', 'M', 'P', 'Y', 1, 0};
    out.write(magic, 8);
    const auto len = static_cast<std::uint16_t>(header.size());
    const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
    out.write(len_bytes, 2);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(count * item_size(t)));
    require(static_cast<bool>(out), ErrorCategory::Io, "write failed: " + path.string());
}

inline std::string dict_value(const std::string& header, const std::string& key) {
    const auto k = header.find("'" + key + "'");
    require(k != std::string::npos, ErrorCategory::Io, "npy header missing key " + key);
    auto colon = header.find(':', k);
    auto start = header.find_first_not_of(' ', colon + 1);
    if (header[start] == '(') return header.substr(start + 1, header.find(')', start) - start - 1);
    if (header[start] == '\'') return header.substr(start + 1, header.find('\'', start + 1) - start - 1);
    return header.substr(start, header.find_first_of(",}", start) - start);
}

}  // namespace detail

inline void write(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
                  std::span<const double> data) {
    detail::write_raw(path, DType::Float64, shape, data.data(), data.size());
}
inline void write(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
                  std::span<const std::int32_t> data) {
    detail::write_raw(path, DType::Int32, shape, data.data(), data.size());
}
inline void write(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
                  std::span<const std::uint8_t> data) {
    detail::write_raw(path, DType::UInt8, shape, data.data(), data.size());
}

inline Array read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCategory::Io, "cannot open: " + path.string());
    char magic[8];
    in.read(magic, 8);
    require(in && std::memcmp(magic, "\x93NUMPY", 6) == 0 && magic[6] == 1, ErrorCategory::Io,
            "not an npy v1 file: " + path.string());
    unsigned char len_bytes[2];
    in.read(reinterpret_cast<char*>(len_bytes), 2);
    const std::size_t len = len_bytes[0] | (static_cast<std::size_t>(len_bytes[1]) << 8);
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));

    Array a;
    const auto d = detail::dict_value(header, "descr");
    if (d == "<f8") a.dtype = DType::Float64;
    else if (d == "<i4") a.dtype = DType::Int32;
    else if (d == "|u1") a.dtype = DType::UInt8;
    else fail(ErrorCategory::Io, "unsupported npy dtype " + d);
    require(detail::dict_value(header, "fortran_order") == "False", ErrorCategory::Io,
            "fortran-order npy not supported");
    std::istringstream dims(detail::dict_value(header, "shape"));
    std::string tok;
    while (std::getline(dims, tok, ',')) {
        if (tok.find_first_not_of(' ') == std::string::npos) continue;
        a.shape.push_back(static_cast<std::size_t>(std::stoull(tok)));
    }
    a.bytes.resize(a.size() * item_size(a.dtype));
    in.read(reinterpret_cast<char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
    require(static_cast<bool>(in), ErrorCategory::Io, "truncated npy payload: " + path.string());
    return a;
}

}  // namespace maxquery::npy
