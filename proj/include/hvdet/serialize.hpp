#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hvdet/nn.hpp"
#include "hvdet/tensor.hpp"

namespace hvdet {

inline constexpr char kCheckpointMagic[4] = {'H', 'V', 'D', 'K'};
inline constexpr char kDatasetMagic[4] = {'H', 'V', 'D', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDatasetVersion = 1;

namespace io {

// Fixed little-endian scalar I/O, independent of host byte order.

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(os, bits);
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("read_u32: truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("read_u64: truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double read_f64(std::istream& is) {
    const std::uint64_t bits = read_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline float read_f32(std::istream& is) {
    const std::uint32_t bits = read_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline std::string read_string(std::istream& is) {
    const std::uint64_t n = read_u64(is);
    std::string s(n, '\0');
    if (n && !is.read(s.data(), static_cast<std::streamsize>(n)))
        throw std::runtime_error("read_string: truncated");
    return s;
}

} // namespace io

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    std::string config_json;  // canonical (sorted-key) JSON
    std::vector<std::pair<std::string, Tensor>> params;  // in registration order
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write(kCheckpointMagic, 4);
    io::write_u32(os, kCheckpointVersion);
    io::write_string(os, ck.config_json);
    io::write_u64(os, ck.params.size());
    for (const auto& [name, t] : ck.params) {
        io::write_string(os, name);
        io::write_u64(os, t.rank());
        for (std::size_t a = 0; a < t.rank(); ++a) io::write_u64(os, t.size(a));
        for (std::size_t i = 0; i < t.numel(); ++i) io::write_f64(os, t[i]);
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed: " + path);
}

inline Checkpoint save_checkpoint(const std::string& path, const std::string& config_json,
                                  const ParamStore& ps) {
    Checkpoint ck;
    ck.config_json = config_json;
    for (const auto& e : ps.entries()) ck.params.emplace_back(e.name, e.var->value);
    save_checkpoint(path, ck);
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    const std::uint32_t version = io::read_u32(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("load_checkpoint: unsupported version " +
                                 std::to_string(version));
    Checkpoint ck;
    ck.config_json = io::read_string(is);
    const std::uint64_t count = io::read_u64(is);
    for (std::uint64_t p = 0; p < count; ++p) {
        const std::string name = io::read_string(is);
        const std::uint64_t rank = io::read_u64(is);
        std::vector<std::size_t> shape(rank);
        for (auto& s : shape) s = io::read_u64(is);
        Tensor t(shape);
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = io::read_f64(is);
        ck.params.emplace_back(name, std::move(t));
    }
    return ck;
}

/// Copy checkpoint tensors into a live parameter store. Refuses on any
/// name/shape difference, reporting the first mismatch.
inline void apply_checkpoint(const Checkpoint& ck, ParamStore& ps) {
    const auto& entries = ps.entries();
    if (ck.params.size() != entries.size())
        throw std::runtime_error("apply_checkpoint: parameter count " +
                                 std::to_string(ck.params.size()) + " != expected " +
                                 std::to_string(entries.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& [name, t] = ck.params[i];
        if (name != entries[i].name)
            throw std::runtime_error("apply_checkpoint: parameter '" + name +
                                     "' where '" + entries[i].name + "' was expected");
        if (!t.same_shape(entries[i].var->value))
            throw std::runtime_error("apply_checkpoint: '" + name + "' has extents " +
                                     t.shape_str() + " but the model expects " +
                                     entries[i].var->value.shape_str());
        entries[i].var->value = t;
    }
}

} // namespace hvdet
