#ifndef SESA_SERIALIZE_HPP
#define SESA_SERIALIZE_HPP

// Named-tensor container used by checkpoints and external feature ingestion.
// Layout: magic "SESA", format version u32 LE, then per-tensor records of
// (name length u32, name bytes, rank u32, extents u64 LE, raw f64 LE values).

#include "sesa/common.hpp"
#include "sesa/tensor.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace sesa {

constexpr uint32_t kContainerVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& buf, T v) {
    for (size_t i = 0; i < sizeof(T); i++) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& buf, size_t& off, uint64_t base_off) {
    if (off + sizeof(T) > buf.size()) throw Corrupt("truncated record", base_off + off);
    T v = 0;
    for (size_t i = 0; i < sizeof(T); i++)
        v |= static_cast<T>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    off += sizeof(T);
    return v;
}

}  // namespace detail

inline std::string serialize_tensors(const std::map<std::string, Tensor>& tensors) {
    std::string buf = "SESA";
    detail::put_le<uint32_t>(buf, kContainerVersion);
    for (const auto& [name, t] : tensors) {
        detail::put_le<uint32_t>(buf, static_cast<uint32_t>(name.size()));
        buf += name;
        detail::put_le<uint32_t>(buf, static_cast<uint32_t>(t.rank()));
        for (int64_t e : t.shape()) detail::put_le<uint64_t>(buf, static_cast<uint64_t>(e));
        for (double v : t.data()) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            detail::put_le<uint64_t>(buf, bits);
        }
    }
    return buf;
}

inline std::map<std::string, Tensor> deserialize_tensors(const std::string& buf) {
    if (buf.size() < 4 || buf.compare(0, 4, "SESA") != 0)
        throw BadMagic("expected SESA header");
    size_t off = 4;
    uint32_t version = detail::get_le<uint32_t>(buf, off, 0);
    if (version != kContainerVersion)
        throw VersionMismatch("container version " + std::to_string(version) + ", expected " +
                              std::to_string(kContainerVersion));
    std::map<std::string, Tensor> out;
    while (off < buf.size()) {
        uint32_t nlen = detail::get_le<uint32_t>(buf, off, 0);
        if (off + nlen > buf.size()) throw Corrupt("truncated name", off);
        std::string name = buf.substr(off, nlen);
        off += nlen;
        uint32_t rank = detail::get_le<uint32_t>(buf, off, 0);
        Shape shape(rank);
        for (uint32_t i = 0; i < rank; i++)
            shape[i] = static_cast<int64_t>(detail::get_le<uint64_t>(buf, off, 0));
        int64_t n = shape_numel(shape);
        if (n < 0 || off + static_cast<size_t>(n) * 8 > buf.size())
            throw Corrupt("truncated tensor data for '" + name + "'", off);
        std::vector<double> data(static_cast<size_t>(n));
        for (auto& v : data) {
            uint64_t bits = detail::get_le<uint64_t>(buf, off, 0);
            std::memcpy(&v, &bits, 8);
        }
        out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

inline void save_tensors(const std::string& path, const std::map<std::string, Tensor>& tensors) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    std::string buf = serialize_tensors(tensors);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed for '" + path + "'");
}

inline std::map<std::string, Tensor> load_tensors(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_tensors(buf);
}

}  // namespace sesa

#endif  // SESA_SERIALIZE_HPP
