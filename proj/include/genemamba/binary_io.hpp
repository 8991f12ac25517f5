#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "genemamba/error.hpp"

// Little-endian primitive IO used by every binary file format in the project.
namespace genemamba::binio {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char bytes[sizeof(T)];
        std::memcpy(bytes, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
        std::memcpy(&v, bytes, sizeof(T));
    }
    return v;
}

template <typename T>
void write(std::ostream& os, T v) {
    v = to_little(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("unexpected end of binary stream");
    return to_little(v);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::uint32_t max_len = 1u << 20) {
    const auto n = read<std::uint32_t>(is);
    if (n > max_len) throw DataError("string length " + std::to_string(n) + " exceeds limit");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw DataError("unexpected end of binary stream");
    return s;
}

// FNV-1a, used for vocabulary fingerprints.
inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 1469598103934665603ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace genemamba::binio
