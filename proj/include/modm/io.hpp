#pragma once

// Container format shared by every binary artifact:
//   bytes 0..5   magic "MODM1\n"
//   bytes 6..13  header length H as little-endian uint64
//   next H bytes UTF-8 JSON header
//   remainder    little-endian float64 pairs (re, im), count given by header["payload_count"]

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "modm/errors.hpp"

namespace modm {

inline constexpr const char* kLibraryVersion = "1.0.0";
inline constexpr int kFormatVersion = 1;

using json = nlohmann::json;

struct Record {
    json header;
    std::vector<std::complex<double>> payload;
};

namespace detail {

inline constexpr char kMagic[6] = {'M', 'O', 'D', 'M', '1', '\n'};

template <typename T>
void put_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError("truncated file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

}  // namespace detail

/// FNV-1a 64-bit hash, rendered as 16 hex digits.
inline std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

inline void write_record(const std::filesystem::path& path, const std::string& kind, json header,
                         const std::vector<std::complex<double>>& payload, const json& provenance = json::object()) {
    header["kind"] = kind;
    header["format_version"] = kFormatVersion;
    header["library_version"] = kLibraryVersion;
    header["payload_count"] = payload.size();
    if (!provenance.is_null() && !provenance.empty()) header["provenance"] = provenance;
    const std::string text = header.dump();
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write(detail::kMagic, sizeof(detail::kMagic));
    detail::put_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& z : payload) {
        detail::put_le<double>(os, z.real());
        detail::put_le<double>(os, z.imag());
    }
    if (!os) throw IoError("write failed: " + path.string());
}

/// Reads the JSON header only, leaving the stream positioned at the payload.
inline json read_record_header(std::istream& is, const std::string& where) {
    char magic[6];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, detail::kMagic, sizeof(magic)) != 0) throw IoError("not a MODM1 file: " + where);
    const auto len = detail::get_le<std::uint64_t>(is);
    if (len > (1ULL << 32)) throw IoError("corrupt header length: " + where);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw IoError("truncated header: " + where);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw IoError("malformed header in " + where + ": " + e.what());
    }
}

inline Record read_record(const std::filesystem::path& path, const std::string& expected_kind = "") {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    Record rec;
    rec.header = read_record_header(is, path.string());
    if (!expected_kind.empty() && rec.header.value("kind", "") != expected_kind)
        throw IoError(path.string() + ": expected kind '" + expected_kind + "', found '" +
                      rec.header.value("kind", "") + "'");
    const auto count = rec.header.at("payload_count").get<std::size_t>();
    rec.payload.resize(count);
    for (auto& z : rec.payload) {
        const double re = detail::get_le<double>(is);
        const double im = detail::get_le<double>(is);
        z = {re, im};
    }
    return rec;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << text;
    if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace modm
