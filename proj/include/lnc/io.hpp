#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "lnc/common.hpp"

namespace lnc {

// Little-endian binary helpers shared by every serialized artifact. Each
// artifact starts with a 4-byte magic such as "LCQ1".

class BinaryWriter {
public:
    explicit BinaryWriter(std::ostream& os) : os_(os) {}

    void magic(std::string_view m) {
        detail::require(m.size() == 4, "magic must be 4 bytes");
        os_.write(m.data(), 4);
    }

    template <typename T>
        requires std::is_arithmetic_v<T>
    void pod(T v) {
        os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }

    void i32(std::int64_t v) {
        detail::require(v >= INT32_MIN && v <= INT32_MAX, "value does not fit a 32-bit header: ", v);
        pod(static_cast<std::int32_t>(v));
    }

    template <typename T>
        requires std::is_arithmetic_v<T>
    void array(std::span<const T> values) {
        pod(static_cast<std::uint64_t>(values.size()));
        os_.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(T)));
    }

    void bytes(std::string_view blob) {
        pod(static_cast<std::uint64_t>(blob.size()));
        os_.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }

    void check() {
        detail::require(static_cast<bool>(os_), "write failed");
    }

private:
    std::ostream& os_;
};

class BinaryReader {
public:
    explicit BinaryReader(std::istream& is) : is_(is) {}

    void expect_magic(std::string_view m) {
        char buf[4] = {};
        is_.read(buf, 4);
        if (is_.gcount() != 4) {
            throw FormatError("truncated file: missing magic");
        }
        if (std::string_view(buf, 4) != m) {
            throw FormatError("bad magic: expected '" + std::string(m) + "', got '" +
                              std::string(buf, 4) + "'");
        }
    }

    template <typename T>
        requires std::is_arithmetic_v<T>
    T pod() {
        T v{};
        raw(&v, sizeof(T));
        return v;
    }

    std::int32_t i32() { return pod<std::int32_t>(); }

    template <typename T>
        requires std::is_arithmetic_v<T>
    std::vector<T> array(std::uint64_t max_elements = (1ULL << 36)) {
        const auto n = pod<std::uint64_t>();
        if (n > max_elements) {
            throw FormatError("corrupt array length");
        }
        std::vector<T> out(n);
        raw(out.data(), n * sizeof(T));
        return out;
    }

    std::string bytes() {
        const auto n = pod<std::uint64_t>();
        if (n > (1ULL << 40)) {
            throw FormatError("corrupt section length");
        }
        std::string out(n, '\0');
        raw(out.data(), n);
        return out;
    }

private:
    void raw(void* dst, std::size_t n) {
        is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) {
            throw FormatError("truncated file");
        }
    }

    std::istream& is_;
};

inline std::ofstream open_output(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    detail::require(static_cast<bool>(os), "cannot open for writing: ", path);
    return os;
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    detail::require(static_cast<bool>(is), "cannot open: ", path);
    return is;
}

/// Serialize through `save(std::ostream&)` into an in-memory blob, used for
/// length-prefixed sections of composite files.
template <typename T>
std::string to_blob(const T& obj) {
    std::ostringstream os(std::ios::binary);
    obj.save(os);
    return std::move(os).str();
}

} // namespace lnc
