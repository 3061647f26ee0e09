#pragma once

// Checkpoint archive: magic "TSCK" | u32 version | u64 manifest length |
// manifest (resolved config as key=value text) | u32 entry count | entries.
// Entry: u16 name length | name | u8 rank | u32 dims... | f64 data...
// Little-endian throughout; parameter doubles are stored raw, so a save/load
// round trip is bit-exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "transop/error.hpp"
#include "transop/model.hpp"

namespace transop {

namespace detail {

template <typename T>
void ck_write(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T ck_read(std::ifstream& in, const std::string& path, size_t& offset, const char* what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (in.gcount() != static_cast<std::streamsize>(sizeof v))
        throw FormatError(path + ": truncated " + what + " at byte offset " + std::to_string(offset));
    offset += sizeof v;
    return v;
}

inline void ck_write_entry(std::ofstream& out, const std::string& name, const Shape& shape,
                           const double* data, size_t n) {
    ck_write(out, static_cast<uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    ck_write(out, static_cast<uint8_t>(shape.size()));
    for (int d : shape) ck_write(out, static_cast<uint32_t>(d));
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

} // namespace detail

inline void save_checkpoint(const std::string& path, Model& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write("TSCK", 4);
    detail::ck_write(out, static_cast<uint32_t>(1));
    std::string manifest = m.cfg.to_kv().serialize();
    detail::ck_write(out, static_cast<uint64_t>(manifest.size()));
    out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));

    uint32_t count = 0;
    m.visit_params([&](const std::string&, Tensor&) { ++count; });
    if (!m.clin_mean.empty()) count += 2;
    detail::ck_write(out, count);
    m.visit_params([&](const std::string& name, Tensor& t) {
        detail::ck_write_entry(out, name, t.shape, t.data(), t.size());
    });
    if (!m.clin_mean.empty()) {
        Shape s{static_cast<int>(m.clin_mean.size())};
        detail::ck_write_entry(out, "buffers.clin_mean", s, m.clin_mean.data(), m.clin_mean.size());
        detail::ck_write_entry(out, "buffers.clin_std", s, m.clin_std.data(), m.clin_std.size());
    }
    if (!out) throw IoError("write failed: " + path);
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    size_t offset = 0;
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "TSCK", 4) != 0)
        throw FormatError(path + ": bad magic at byte offset 0 (expected TSCK)");
    offset = 4;
    uint32_t version = detail::ck_read<uint32_t>(in, path, offset, "version");
    if (version != 1)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    uint64_t mlen = detail::ck_read<uint64_t>(in, path, offset, "manifest length");
    if (mlen > (1ull << 20)) throw FormatError(path + ": implausible manifest length");
    std::string manifest(mlen, '\0');
    in.read(manifest.data(), static_cast<std::streamsize>(mlen));
    if (in.gcount() != static_cast<std::streamsize>(mlen))
        throw FormatError(path + ": truncated manifest at byte offset " + std::to_string(offset));
    offset += mlen;

    TranSOPConfig cfg = TranSOPConfig::from_kv(KeyVal::parse(manifest));
    Rng rng(0);
    Model m = build_model(cfg, rng);

    uint32_t count = detail::ck_read<uint32_t>(in, path, offset, "entry count");
    std::vector<std::pair<std::string, std::vector<double>>> entries;
    std::vector<Shape> shapes;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t nlen = detail::ck_read<uint16_t>(in, path, offset, "name length");
        std::string name(nlen, '\0');
        in.read(name.data(), nlen);
        if (in.gcount() != nlen)
            throw FormatError(path + ": truncated name at byte offset " + std::to_string(offset));
        offset += nlen;
        uint8_t rank = detail::ck_read<uint8_t>(in, path, offset, "rank");
        Shape shape;
        size_t n = 1;
        for (uint8_t r = 0; r < rank; ++r) {
            uint32_t d = detail::ck_read<uint32_t>(in, path, offset, "dim");
            shape.push_back(static_cast<int>(d));
            n *= d;
        }
        if (n > (1ull << 28)) throw FormatError(path + ": implausible tensor size for " + name);
        std::vector<double> data(n);
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (in.gcount() != static_cast<std::streamsize>(n * sizeof(double)))
            throw FormatError(path + ": truncated data for " + name + " at byte offset " +
                              std::to_string(offset));
        offset += n * sizeof(double);
        entries.emplace_back(std::move(name), std::move(data));
        shapes.push_back(std::move(shape));
    }
    char extra;
    in.read(&extra, 1);
    if (in.gcount() != 0)
        throw FormatError(path + ": trailing bytes after entries at byte offset " + std::to_string(offset));

    size_t at = 0;
    auto next_entry = [&](const std::string& name) -> std::pair<std::vector<double>&, Shape&> {
        if (at >= entries.size())
            throw ConfigError(path + ": checkpoint is missing parameter '" + name + "'");
        if (entries[at].first != name)
            throw ConfigError(path + ": expected parameter '" + name + "', found '" +
                              entries[at].first + "'");
        auto& e = entries[at];
        auto& s = shapes[at];
        ++at;
        return {e.second, s};
    };
    m.visit_params([&](const std::string& name, Tensor& t) {
        auto [data, shape] = next_entry(name);
        if (shape != t.shape)
            throw ConfigError(path + ": parameter '" + name + "' has shape " + shape_str(shape) +
                              ", model expects " + shape_str(t.shape));
        *t.store = std::move(data);
    });
    if (at < entries.size() && entries[at].first == "buffers.clin_mean") {
        m.clin_mean = std::move(entries[at].second);
        ++at;
        auto [stdev, shape] = next_entry("buffers.clin_std");
        m.clin_std = std::move(stdev);
        if (m.clin_std.size() != m.clin_mean.size())
            throw ConfigError(path + ": clinical buffer size mismatch");
    }
    if (at != entries.size())
        throw ConfigError(path + ": unexpected extra parameter '" + entries[at].first + "'");
    return m;
}

} // namespace transop
