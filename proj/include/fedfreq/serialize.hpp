// ParamTree wire format. Layout:
//
//   magic "FFPT" | version u8 | leaf count u32 |
//   per leaf: key length u16, key bytes, ndim u8, dims u32[ndim] |
//   payload: little-endian f64 values, leaf by leaf in header order
//
// Leaves are written in key-sorted order, so serialization is deterministic
// and round-trips bit-exactly.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "fedfreq/param_tree.hpp"
#include "fedfreq/rng.hpp"

namespace fedfreq {

static_assert(std::endian::native == std::endian::little,
              "ParamTree serialization assumes a little-endian host");

namespace detail {

inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(uint8_t(v & 0xff));
    out.push_back(uint8_t(v >> 8));
}

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xff));
}

struct Reader {
    std::span<const uint8_t> buf;
    size_t pos = 0;

    void need(size_t n, const std::string& what) const {
        if (pos + n > buf.size())
            throw ParseError("truncated ParamTree payload at offset " + std::to_string(pos) +
                             ": expected " + what);
    }
    uint8_t u8(const std::string& what) {
        need(1, what);
        return buf[pos++];
    }
    uint16_t u16(const std::string& what) {
        need(2, what);
        uint16_t v = uint16_t(buf[pos]) | uint16_t(buf[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    uint32_t u32(const std::string& what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(buf[pos + size_t(i)]) << (8 * i);
        pos += 4;
        return v;
    }
};

}  // namespace detail

inline constexpr char kParamTreeMagic[4] = {'F', 'F', 'P', 'T'};
inline constexpr uint8_t kParamTreeVersion = 1;

inline std::vector<uint8_t> serialize(const ParamTree& params) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kParamTreeMagic, kParamTreeMagic + 4);
    out.push_back(kParamTreeVersion);
    detail::put_u32(out, uint32_t(params.size()));
    int64_t total = 0;
    for (const auto& [key, tensor] : params) {
        if (key.size() > 0xffff) throw Error("parameter key too long to serialize");
        detail::put_u16(out, uint16_t(key.size()));
        out.insert(out.end(), key.begin(), key.end());
        out.push_back(uint8_t(tensor.ndim()));
        for (int d : tensor.shape()) detail::put_u32(out, uint32_t(d));
        total += tensor.size();
    }
    out.reserve(out.size() + size_t(total) * 8);
    for (const auto& [key, tensor] : params) {
        const auto vals = tensor.data();
        const size_t bytes = vals.size() * sizeof(double);
        const size_t at = out.size();
        out.resize(at + bytes);
        std::memcpy(out.data() + at, vals.data(), bytes);
    }
    return out;
}

inline ParamTree deserialize(std::span<const uint8_t> bytes) {
    detail::Reader r{bytes};
    r.need(4, "magic bytes");
    if (std::memcmp(bytes.data(), kParamTreeMagic, 4) != 0)
        throw ParseError("bad magic at offset 0: not a ParamTree file");
    r.pos = 4;
    const uint8_t version = r.u8("version byte");
    if (version != kParamTreeVersion)
        throw ParseError("unsupported ParamTree version " + std::to_string(version) +
                         " at offset 4");
    const uint32_t n_leaves = r.u32("leaf count");

    struct Entry {
        std::string key;
        std::vector<int> shape;
    };
    std::vector<Entry> entries;
    entries.reserve(n_leaves);
    for (uint32_t i = 0; i < n_leaves; ++i) {
        const uint16_t klen = r.u16("key length of leaf " + std::to_string(i));
        r.need(klen, "key bytes of leaf " + std::to_string(i));
        std::string key(reinterpret_cast<const char*>(bytes.data() + r.pos), klen);
        r.pos += klen;
        const uint8_t ndim = r.u8("ndim of '" + key + "'");
        std::vector<int> shape;
        shape.reserve(ndim);
        for (uint8_t d = 0; d < ndim; ++d) {
            const uint32_t dim = r.u32("dimension of '" + key + "'");
            if (dim == 0 || dim > 0x7fffffff)
                throw ParseError("invalid dimension " + std::to_string(dim) + " for '" + key +
                                 "' at offset " + std::to_string(r.pos - 4));
            shape.push_back(int(dim));
        }
        entries.push_back({std::move(key), std::move(shape)});
    }

    ParamTree tree;
    for (const Entry& e : entries) {
        const int64_t n = shape_numel(e.shape);
        const size_t bytes_needed = size_t(n) * sizeof(double);
        if (r.pos + bytes_needed > bytes.size())
            throw ParseError("truncated payload at offset " + std::to_string(r.pos) +
                             ": missing values for leaf '" + e.key + "'");
        std::vector<double> values(static_cast<size_t>(n));
        std::memcpy(values.data(), bytes.data() + r.pos, bytes_needed);
        r.pos += bytes_needed;
        if (!tree.emplace(e.key, Tensor::of(e.shape, std::move(values))).second)
            throw ParseError("duplicate leaf '" + e.key + "'");
    }
    if (r.pos != bytes.size())
        throw ParseError("trailing bytes after payload at offset " + std::to_string(r.pos));
    return tree;
}

inline uint64_t hash_bytes(std::span<const uint8_t> bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[size_t(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

inline std::string param_tree_hash(const ParamTree& params) {
    const auto bytes = serialize(params);
    return hex64(hash_bytes(bytes));
}

inline void save_param_tree(const ParamTree& params, const std::string& path) {
    const auto bytes = serialize(params);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

inline ParamTree load_param_tree(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace fedfreq
