#pragma once

// 3D scalar volume with voxel spacing, plus the SVL1 file format:
//   magic "SVL1" | u32 D,W,H | f32 sd,sw,sh | D*W*H f32 voxels
// little-endian, d-major row-major voxel order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "transop/error.hpp"

namespace transop {

static_assert(std::endian::native == std::endian::little, "SVL1 I/O assumes a little-endian host");

struct Volume {
    int d = 0, w = 0, h = 0;
    double sd = 1.0, sw = 1.0, sh = 1.0; // mm per voxel
    std::vector<double> voxels;          // d-major: ((dd*w)+ww)*h + hh

    Volume() = default;
    Volume(int d_, int w_, int h_, double sd_ = 1.0, double sw_ = 1.0, double sh_ = 1.0)
        : d(d_), w(w_), h(h_), sd(sd_), sw(sw_), sh(sh_) {
        if (d < 1 || w < 1 || h < 1) throw DimensionError("Volume: dims must be positive");
        if (sd <= 0 || sw <= 0 || sh <= 0) throw ConfigError("Volume: spacing must be positive");
        voxels.assign(static_cast<size_t>(d) * w * h, 0.0);
    }

    size_t size() const { return voxels.size(); }

    size_t idx(int dd, int ww, int hh) const {
        return (static_cast<size_t>(dd) * w + ww) * h + hh;
    }

    double& at(int dd, int ww, int hh) { return voxels[idx(dd, ww, hh)]; }
    double at(int dd, int ww, int hh) const { return voxels[idx(dd, ww, hh)]; }
};

namespace detail {

inline void svl_fail(const std::string& path, size_t offset, const std::string& what) {
    throw FormatError(path + ": " + what + " at byte offset " + std::to_string(offset));
}

template <typename T>
T svl_read(std::ifstream& in, const std::string& path, size_t& offset, const char* what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (in.gcount() != static_cast<std::streamsize>(sizeof v))
        svl_fail(path, offset, std::string("truncated ") + what);
    offset += sizeof v;
    return v;
}

} // namespace detail

inline void write_svl(const std::string& path, const Volume& v) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write volume file: " + path);
    out.write("SVL1", 4);
    uint32_t dims[3] = {static_cast<uint32_t>(v.d), static_cast<uint32_t>(v.w),
                        static_cast<uint32_t>(v.h)};
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    float sp[3] = {static_cast<float>(v.sd), static_cast<float>(v.sw), static_cast<float>(v.sh)};
    out.write(reinterpret_cast<const char*>(sp), sizeof sp);
    std::vector<float> buf(v.voxels.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(v.voxels[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) throw IoError("write failed: " + path);
}

inline Volume read_svl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open volume file: " + path);
    size_t offset = 0;
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "SVL1", 4) != 0)
        detail::svl_fail(path, 0, "bad magic (expected SVL1)");
    offset = 4;
    uint32_t D = detail::svl_read<uint32_t>(in, path, offset, "dim D");
    uint32_t W = detail::svl_read<uint32_t>(in, path, offset, "dim W");
    uint32_t H = detail::svl_read<uint32_t>(in, path, offset, "dim H");
    if (D == 0 || W == 0 || H == 0) detail::svl_fail(path, 4, "zero dimension");
    uint64_t count = static_cast<uint64_t>(D) * W * H;
    if (count > (1ull << 28)) detail::svl_fail(path, 4, "dimension overflow");
    float sd = detail::svl_read<float>(in, path, offset, "spacing sd");
    float sw = detail::svl_read<float>(in, path, offset, "spacing sw");
    float sh = detail::svl_read<float>(in, path, offset, "spacing sh");
    if (!(sd > 0) || !(sw > 0) || !(sh > 0)) detail::svl_fail(path, 16, "non-positive spacing");
    Volume v(static_cast<int>(D), static_cast<int>(W), static_cast<int>(H), sd, sw, sh);
    std::vector<float> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(count * sizeof(float)))
        detail::svl_fail(path, offset + static_cast<size_t>(in.gcount()),
                         "payload shorter than declared " + std::to_string(count) + " voxels");
    offset += count * sizeof(float);
    char extra;
    in.read(&extra, 1);
    if (in.gcount() != 0) detail::svl_fail(path, offset, "trailing bytes after payload");
    for (size_t i = 0; i < count; ++i) v.voxels[i] = static_cast<double>(buf[i]);
    return v;
}

} // namespace transop
