#pragma once

// Little-endian scalar helpers shared by the WAV, feature-dump and checkpoint
// readers and writers.

#include "penet/errors.h"

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

namespace penet::detail {

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

template <class T>
void write_le(std::ostream& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_le(std::istream& in, const char* what = "value") {
    static_assert(std::is_trivially_copyable_v<T>);
    T value{};
    if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
        throw IoError(std::string("unexpected end of file while reading ") + what);
    }
    return value;
}

inline std::string read_bytes(std::istream& in, std::size_t n, const char* what = "bytes") {
    std::string s(n, '\0');
    if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n))) {
        throw IoError(std::string("unexpected end of file while reading ") + what);
    }
    return s;
}

} // namespace penet::detail
