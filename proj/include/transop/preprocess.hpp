#pragma once

// Volume preprocessing chain: trilinear resampling to a target voxel spacing,
// HU clipping, threshold+largest-component skull stripping with a 3^3 opening,
// centered crop/pad, per-volume z-scoring, and train-time augmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "transop/error.hpp"
#include "transop/rng.hpp"
#include "transop/volume.hpp"

namespace transop {

// Trilinear resample onto a grid with the given spacing (mm/voxel).
// New dim_i = round(dim_i * spacing_i / target_i); voxel centers are aligned
// (output center i maps to input coordinate (i+0.5)*ratio - 0.5, clamped).
inline Volume resample(const Volume& v, double td = 3.0, double tw = 1.0, double th = 1.0) {
    if (td <= 0 || tw <= 0 || th <= 0) throw ConfigError("resample: target spacing must be positive");
    int nd = std::max(1, static_cast<int>(std::lround(v.d * v.sd / td)));
    int nw = std::max(1, static_cast<int>(std::lround(v.w * v.sw / tw)));
    int nh = std::max(1, static_cast<int>(std::lround(v.h * v.sh / th)));
    Volume out(nd, nw, nh, td, tw, th);
    double rd = td / v.sd, rw = tw / v.sw, rh = th / v.sh;
    auto clampi = [](int x, int hi) { return x < 0 ? 0 : (x > hi ? hi : x); };
    for (int dd = 0; dd < nd; ++dd) {
        double fd = (dd + 0.5) * rd - 0.5;
        int d0 = clampi(static_cast<int>(std::floor(fd)), v.d - 1);
        int d1 = clampi(d0 + 1, v.d - 1);
        double ad = std::clamp(fd - d0, 0.0, 1.0);
        for (int ww = 0; ww < nw; ++ww) {
            double fw = (ww + 0.5) * rw - 0.5;
            int w0 = clampi(static_cast<int>(std::floor(fw)), v.w - 1);
            int w1 = clampi(w0 + 1, v.w - 1);
            double aw = std::clamp(fw - w0, 0.0, 1.0);
            for (int hh = 0; hh < nh; ++hh) {
                double fh = (hh + 0.5) * rh - 0.5;
                int h0 = clampi(static_cast<int>(std::floor(fh)), v.h - 1);
                int h1 = clampi(h0 + 1, v.h - 1);
                double ah = std::clamp(fh - h0, 0.0, 1.0);
                double c00 = v.at(d0, w0, h0) * (1 - ah) + v.at(d0, w0, h1) * ah;
                double c01 = v.at(d0, w1, h0) * (1 - ah) + v.at(d0, w1, h1) * ah;
                double c10 = v.at(d1, w0, h0) * (1 - ah) + v.at(d1, w0, h1) * ah;
                double c11 = v.at(d1, w1, h0) * (1 - ah) + v.at(d1, w1, h1) * ah;
                double c0 = c00 * (1 - aw) + c01 * aw;
                double c1 = c10 * (1 - aw) + c11 * aw;
                out.at(dd, ww, hh) = c0 * (1 - ad) + c1 * ad;
            }
        }
    }
    return out;
}

inline Volume clip_hu(const Volume& v, double lo = 0.0, double hi = 80.0) {
    if (lo >= hi) throw ConfigError("clip_hu: lo must be below hi");
    Volume out = v;
    for (double& x : out.voxels) x = std::min(std::max(x, lo), hi);
    return out;
}

namespace detail {

// 6-connected labeling; returns the largest component of `mask` (ties keep the
// first component in scan order).
inline std::vector<uint8_t> largest_component(const Volume& v, const std::vector<uint8_t>& mask) {
    std::vector<int32_t> label(mask.size(), -1);
    std::vector<size_t> queue;
    int32_t next = 0;
    size_t best_count = 0;
    int32_t best_label = -1;
    for (size_t seed = 0; seed < mask.size(); ++seed) {
        if (!mask[seed] || label[seed] >= 0) continue;
        int32_t cur = next++;
        size_t count = 0;
        queue.clear();
        queue.push_back(seed);
        label[seed] = cur;
        while (!queue.empty()) {
            size_t at = queue.back();
            queue.pop_back();
            ++count;
            int hh = static_cast<int>(at % v.h);
            int ww = static_cast<int>((at / v.h) % v.w);
            int dd = static_cast<int>(at / (static_cast<size_t>(v.h) * v.w));
            const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
            for (const auto& o : off) {
                int nd = dd + o[0], nw = ww + o[1], nh = hh + o[2];
                if (nd < 0 || nd >= v.d || nw < 0 || nw >= v.w || nh < 0 || nh >= v.h) continue;
                size_t ni = v.idx(nd, nw, nh);
                if (mask[ni] && label[ni] < 0) {
                    label[ni] = cur;
                    queue.push_back(ni);
                }
            }
        }
        if (count > best_count) {
            best_count = count;
            best_label = cur;
        }
    }
    std::vector<uint8_t> out(mask.size(), 0);
    if (best_label >= 0)
        for (size_t i = 0; i < mask.size(); ++i) out[i] = label[i] == best_label ? 1 : 0;
    return out;
}

// Erosion with a 3^3 structuring element; out-of-bounds neighbors count as
// inside so a full mask stays full.
inline std::vector<uint8_t> erode3(const Volume& v, const std::vector<uint8_t>& mask) {
    std::vector<uint8_t> out(mask.size(), 0);
    for (int dd = 0; dd < v.d; ++dd)
        for (int ww = 0; ww < v.w; ++ww)
            for (int hh = 0; hh < v.h; ++hh) {
                bool all = mask[v.idx(dd, ww, hh)] != 0;
                for (int od = -1; od <= 1 && all; ++od)
                    for (int ow = -1; ow <= 1 && all; ++ow)
                        for (int oh = -1; oh <= 1 && all; ++oh) {
                            int nd = dd + od, nw = ww + ow, nh = hh + oh;
                            if (nd < 0 || nd >= v.d || nw < 0 || nw >= v.w || nh < 0 || nh >= v.h)
                                continue;
                            if (!mask[v.idx(nd, nw, nh)]) all = false;
                        }
                out[v.idx(dd, ww, hh)] = all ? 1 : 0;
            }
    return out;
}

inline std::vector<uint8_t> dilate3(const Volume& v, const std::vector<uint8_t>& mask) {
    std::vector<uint8_t> out(mask.size(), 0);
    for (int dd = 0; dd < v.d; ++dd)
        for (int ww = 0; ww < v.w; ++ww)
            for (int hh = 0; hh < v.h; ++hh) {
                bool any = false;
                for (int od = -1; od <= 1 && !any; ++od)
                    for (int ow = -1; ow <= 1 && !any; ++ow)
                        for (int oh = -1; oh <= 1 && !any; ++oh) {
                            int nd = dd + od, nw = ww + ow, nh = hh + oh;
                            if (nd < 0 || nd >= v.d || nw < 0 || nw >= v.w || nh < 0 || nh >= v.h)
                                continue;
                            if (mask[v.idx(nd, nw, nh)]) any = true;
                        }
                out[v.idx(dd, ww, hh)] = any ? 1 : 0;
            }
    return out;
}

} // namespace detail

// Brain mask of a clipped volume: voxels strictly inside (lo,hi), largest
// 6-connected component, then one opening (erode + dilate) with a 3^3 element.
inline std::vector<uint8_t> strip_skull_mask(const Volume& v, double lo = 0.0, double hi = 80.0) {
    std::vector<uint8_t> mask(v.size(), 0);
    size_t count = 0;
    for (size_t i = 0; i < v.size(); ++i)
        if (v.voxels[i] > lo && v.voxels[i] < hi) {
            mask[i] = 1;
            ++count;
        }
    if (count == 0) throw DegenerateInputError("strip_skull: no voxels strictly inside clip range");
    mask = detail::largest_component(v, mask);
    mask = detail::dilate3(v, detail::erode3(v, mask));
    size_t kept = 0;
    for (uint8_t m : mask) kept += m;
    if (kept == 0) throw DegenerateInputError("strip_skull: mask vanished after opening");
    return mask;
}

inline Volume strip_skull(const Volume& v, double lo = 0.0, double hi = 80.0) {
    std::vector<uint8_t> mask = strip_skull_mask(v, lo, hi);
    Volume out = v;
    for (size_t i = 0; i < out.size(); ++i)
        if (!mask[i]) out.voxels[i] = lo;
    return out;
}

// Centered crop per axis; smaller axes are zero-padded symmetrically. Odd
// leftovers fall on the high side (content favors the low index).
inline Volume center_crop_pad(const Volume& v, int td = 32, int tw = 192, int th = 128) {
    if (td < 1 || tw < 1 || th < 1) throw ConfigError("center_crop_pad: target dims must be positive");
    Volume out(td, tw, th, v.sd, v.sw, v.sh);
    // src = dst + off, where off favors the low index on odd splits
    int od = v.d >= td ? (v.d - td) / 2 : -((td - v.d) / 2);
    int ow = v.w >= tw ? (v.w - tw) / 2 : -((tw - v.w) / 2);
    int oh = v.h >= th ? (v.h - th) / 2 : -((th - v.h) / 2);
    for (int dd = 0; dd < td; ++dd) {
        int sd_ = dd + od;
        if (sd_ < 0 || sd_ >= v.d) continue;
        for (int ww = 0; ww < tw; ++ww) {
            int sw_ = ww + ow;
            if (sw_ < 0 || sw_ >= v.w) continue;
            for (int hh = 0; hh < th; ++hh) {
                int sh_ = hh + oh;
                if (sh_ < 0 || sh_ >= v.h) continue;
                out.at(dd, ww, hh) = v.at(sd_, sw_, sh_);
            }
        }
    }
    return out;
}

// Per-volume z-score with a floor on the population std.
inline Volume normalize(const Volume& v) {
    Volume out = v;
    double mu = 0.0;
    for (double x : v.voxels) mu += x;
    mu /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v.voxels) var += (x - mu) * (x - mu);
    double sd = std::sqrt(var / static_cast<double>(v.size()));
    double inv = 1.0 / std::max(sd, 1e-8);
    for (double& x : out.voxels) x = (x - mu) * inv;
    return out;
}

// Train-time augmentation: independent W and H flips with probability p_flip
// each, then additive voxelwise Gaussian noise. Fully determined by the rng
// state; draw order is flip_w, flip_h, then noise in voxel order.
inline Volume augment(const Volume& v, Rng& rng, double p_flip = 0.5, double noise_sigma = 0.05) {
    bool flip_w = rng.bernoulli(p_flip);
    bool flip_h = rng.bernoulli(p_flip);
    Volume out(v.d, v.w, v.h, v.sd, v.sw, v.sh);
    for (int dd = 0; dd < v.d; ++dd)
        for (int ww = 0; ww < v.w; ++ww)
            for (int hh = 0; hh < v.h; ++hh)
                out.at(dd, ww, hh) = v.at(dd, flip_w ? v.w - 1 - ww : ww, flip_h ? v.h - 1 - hh : hh);
    if (noise_sigma > 0.0)
        for (double& x : out.voxels) x += rng.normal(0.0, noise_sigma);
    return out;
}

struct PreprocessOptions {
    double spacing_d = 3.0, spacing_w = 1.0, spacing_h = 1.0;
    double hu_lo = 0.0, hu_hi = 80.0;
    int crop_d = 32, crop_w = 192, crop_h = 128;
    bool skip_skull_strip = false;
};

// The full chain in order: resample -> clip -> strip -> crop -> normalize.
inline Volume preprocess(const Volume& v, const PreprocessOptions& o = {}) {
    Volume r = resample(v, o.spacing_d, o.spacing_w, o.spacing_h);
    r = clip_hu(r, o.hu_lo, o.hu_hi);
    if (!o.skip_skull_strip) r = strip_skull(r, o.hu_lo, o.hu_hi);
    r = center_crop_pad(r, o.crop_d, o.crop_w, o.crop_h);
    return normalize(r);
}

} // namespace transop
