#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <vector>

#include "sbss/common.hpp"

namespace sbss {

// Per-pixel class-probability tensor, channel-major [C][H][W].
// Invariants: values in [0, 1], channel sum per pixel == 1 within 1e-5.
struct ProbMap {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> values;

    ProbMap() = default;
    ProbMap(int c, int h, int w, float fill = 0.f)
        : channels(c), height(h), width(w), values(static_cast<size_t>(c) * h * w, fill) {}

    size_t idx(int c, int y, int x) const {
        return (static_cast<size_t>(c) * height + y) * width + x;
    }
    float at(int c, int y, int x) const { return values[idx(c, y, x)]; }
    float& at(int c, int y, int x) { return values[idx(c, y, x)]; }
    const float* plane(int c) const { return values.data() + static_cast<size_t>(c) * height * width; }
    float* plane(int c) { return values.data() + static_cast<size_t>(c) * height * width; }
    size_t pixel_count() const { return static_cast<size_t>(height) * width; }

    bool operator==(const ProbMap&) const = default;
};

// 8-bit RGB image, interleaved row-major.
struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> samples;  // h*w*3

    RgbImage() = default;
    RgbImage(int h, int w, uint8_t fill = 0)
        : height(h), width(w), samples(static_cast<size_t>(h) * w * 3, fill) {}

    size_t idx(int y, int x, int c) const { return (static_cast<size_t>(y) * width + x) * 3 + c; }
    uint8_t at(int y, int x, int c) const { return samples[idx(y, x, c)]; }
    uint8_t& at(int y, int x, int c) { return samples[idx(y, x, c)]; }

    bool operator==(const RgbImage&) const = default;
};

// Per-pixel class index in [0, C) or the reserved ignore value 255.
struct LabelMap {
    static constexpr uint8_t kIgnore = 255;

    int height = 0;
    int width = 0;
    std::vector<uint8_t> labels;

    LabelMap() = default;
    LabelMap(int h, int w, uint8_t fill = 0)
        : height(h), width(w), labels(static_cast<size_t>(h) * w, fill) {}

    uint8_t at(int y, int x) const { return labels[static_cast<size_t>(y) * width + x]; }
    uint8_t& at(int y, int x) { return labels[static_cast<size_t>(y) * width + x]; }

    bool operator==(const LabelMap&) const = default;
};

// Per-pixel maximum class probability of the map it was derived from.
struct ConfidenceMap {
    int height = 0;
    int width = 0;
    std::vector<float> values;

    ConfidenceMap() = default;
    ConfidenceMap(int h, int w, float fill = 0.f)
        : height(h), width(w), values(static_cast<size_t>(h) * w, fill) {}

    float at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }
    float& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
};

struct Rect {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;

    bool operator==(const Rect&) const = default;
    int64_t area() const { return static_cast<int64_t>(w) * h; }
    bool contains_in(int host_h, int host_w) const {
        return x >= 0 && y >= 0 && w >= 1 && h >= 1 && x + w <= host_w && y + h <= host_h;
    }
};

// Non-overlapping tiling of a raster. Patches cover the padded raster exactly;
// padded dims are the smallest multiples of the patch dims >= host dims.
struct PatchGrid {
    int host_h = 0, host_w = 0;
    int patch_h = 0, patch_w = 0;
    int padded_h = 0, padded_w = 0;
    std::vector<Rect> patches;  // row-major

    int rows() const { return patch_h ? padded_h / patch_h : 0; }
    int cols() const { return patch_w ? padded_w / patch_w : 0; }
};

namespace detail {

// Fold an arbitrary coordinate into [0, n) by mirror reflection with edge repeat.
inline int reflect_index(int t, int n) {
    if (n == 1) return 0;
    int period = 2 * n;
    int m = t % period;
    if (m < 0) m += period;
    return m < n ? m : period - 1 - m;
}

struct LerpTap {
    int i0, i1;
    float f;  // weight of i1
};

// Half-pixel-center source taps: src = (dst + 0.5) * in/out - 0.5, clamped to [0, in-1].
inline std::vector<LerpTap> bilinear_taps(int in, int out) {
    std::vector<LerpTap> taps(out);
    double scale = static_cast<double>(in) / out;
    for (int d = 0; d < out; ++d) {
        double src = (d + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        int i0 = static_cast<int>(src);
        if (i0 > in - 1) i0 = in - 1;
        int i1 = std::min(i0 + 1, in - 1);
        taps[d] = {i0, i1, static_cast<float>(src - i0)};
    }
    return taps;
}

// Same convention, nearest neighbour: round-half-up of the source coordinate.
inline std::vector<int> nearest_taps(int in, int out) {
    std::vector<int> taps(out);
    double scale = static_cast<double>(in) / out;
    for (int d = 0; d < out; ++d) {
        double src = (d + 0.5) * scale - 0.5;
        int i = static_cast<int>(std::floor(src + 0.5));
        taps[d] = std::clamp(i, 0, in - 1);
    }
    return taps;
}

// One plane of bilinear resize, float accumulate.
inline void resize_plane(const float* src, int in_w, float* dst, int out_h, int out_w,
                         const std::vector<LerpTap>& ty, const std::vector<LerpTap>& tx) {
    for (int y = 0; y < out_h; ++y) {
        const float* r0 = src + static_cast<size_t>(ty[y].i0) * in_w;
        const float* r1 = src + static_cast<size_t>(ty[y].i1) * in_w;
        float fy = ty[y].f;
        float* out = dst + static_cast<size_t>(y) * out_w;
        for (int x = 0; x < out_w; ++x) {
            const LerpTap& t = tx[x];
            float a = r0[t.i0] + (r0[t.i1] - r0[t.i0]) * t.f;
            float b = r1[t.i0] + (r1[t.i1] - r1[t.i0]) * t.f;
            out[x] = a + (b - a) * fy;
        }
    }
}

}  // namespace detail

inline void validate_probmap(const ProbMap& m, float tol = 1e-5f) {
    if (m.channels < 2) throw std::invalid_argument("ProbMap: channels must be >= 2");
    for (size_t p = 0; p < m.pixel_count(); ++p) {
        float sum = 0.f;
        for (int c = 0; c < m.channels; ++c) {
            float v = m.values[static_cast<size_t>(c) * m.pixel_count() + p];
            if (!(v >= 0.f && v <= 1.f)) throw std::invalid_argument("ProbMap: value outside [0,1]");
            sum += v;
        }
        if (std::abs(sum - 1.f) > tol) throw std::invalid_argument("ProbMap: channel sum != 1");
    }
}

inline bool probmap_ok(const ProbMap& m, float tol = 1e-5f) {
    try {
        validate_probmap(m, tol);
        return true;
    } catch (const std::invalid_argument&) {
        return false;
    }
}

// Bilinear per-channel resize without renormalization. Exposed because the
// probability variant below renormalizes after interpolation.
inline ProbMap resize_bilinear_raw(const ProbMap& map, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize: zero-sized target");
    if (out_h == map.height && out_w == map.width) return map;
    ProbMap out(map.channels, out_h, out_w);
    auto ty = detail::bilinear_taps(map.height, out_h);
    auto tx = detail::bilinear_taps(map.width, out_w);
    for (int c = 0; c < map.channels; ++c)
        detail::resize_plane(map.plane(c), map.width, out.plane(c), out_h, out_w, ty, tx);
    return out;
}

inline void renormalize(ProbMap& m) {
    size_t n = m.pixel_count();
    for (size_t p = 0; p < n; ++p) {
        float sum = 0.f;
        for (int c = 0; c < m.channels; ++c) sum += m.values[static_cast<size_t>(c) * n + p];
        if (sum > 0.f) {
            float inv = 1.f / sum;
            for (int c = 0; c < m.channels; ++c) m.values[static_cast<size_t>(c) * n + p] *= inv;
        }
    }
}

inline ProbMap resize_probmap(const ProbMap& map, int out_h, int out_w) {
    if (out_h == map.height && out_w == map.width) {
        if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize: zero-sized target");
        return map;  // bit-identical
    }
    ProbMap out = resize_bilinear_raw(map, out_h, out_w);
    renormalize(out);
    return out;
}

inline RgbImage resize_image(const RgbImage& img, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize: zero-sized target");
    if (out_h == img.height && out_w == img.width) return img;
    RgbImage out(out_h, out_w);
    auto ty = detail::bilinear_taps(img.height, out_h);
    auto tx = detail::bilinear_taps(img.width, out_w);
    for (int y = 0; y < out_h; ++y) {
        int y0 = ty[y].i0, y1 = ty[y].i1;
        float fy = ty[y].f;
        for (int x = 0; x < out_w; ++x) {
            const detail::LerpTap& t = tx[x];
            for (int c = 0; c < 3; ++c) {
                float v00 = img.at(y0, t.i0, c), v01 = img.at(y0, t.i1, c);
                float v10 = img.at(y1, t.i0, c), v11 = img.at(y1, t.i1, c);
                float a = v00 + (v01 - v00) * t.f;
                float b = v10 + (v11 - v10) * t.f;
                float v = a + (b - a) * fy;
                int q = static_cast<int>(std::floor(v + 0.5f));  // round half up
                out.at(y, x, c) = static_cast<uint8_t>(std::clamp(q, 0, 255));
            }
        }
    }
    return out;
}

inline LabelMap resize_labels(const LabelMap& labels, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize: zero-sized target");
    if (out_h == labels.height && out_w == labels.width) return labels;
    LabelMap out(out_h, out_w);
    auto ty = detail::nearest_taps(labels.height, out_h);
    auto tx = detail::nearest_taps(labels.width, out_w);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) out.at(y, x) = labels.at(ty[y], tx[x]);
    return out;
}

inline ConfidenceMap confidence_map(const ProbMap& map) {
    ConfidenceMap out(map.height, map.width);
    size_t n = map.pixel_count();
    for (size_t p = 0; p < n; ++p) {
        float best = map.values[p];
        for (int c = 1; c < map.channels; ++c)
            best = std::max(best, map.values[static_cast<size_t>(c) * n + p]);
        out.values[p] = best;
    }
    return out;
}

// Per-pixel argmax; ties go to the lowest channel index.
inline LabelMap argmax_labels(const ProbMap& map) {
    LabelMap out(map.height, map.width);
    size_t n = map.pixel_count();
    for (size_t p = 0; p < n; ++p) {
        int best_c = 0;
        float best = map.values[p];
        for (int c = 1; c < map.channels; ++c) {
            float v = map.values[static_cast<size_t>(c) * n + p];
            if (v > best) {
                best = v;
                best_c = c;
            }
        }
        out.labels[p] = static_cast<uint8_t>(best_c);
    }
    return out;
}

inline PatchGrid make_patch_grid(int host_h, int host_w, int patch_h, int patch_w) {
    if (host_h < 1 || host_w < 1) throw std::invalid_argument("make_patch_grid: empty host");
    if (patch_h < 1 || patch_w < 1) throw std::invalid_argument("make_patch_grid: empty patch");
    if (patch_h > 4 * host_h || patch_w > 4 * host_w)
        throw std::invalid_argument("make_patch_grid: patch exceeds 4x host dimension");
    PatchGrid g;
    g.host_h = host_h;
    g.host_w = host_w;
    g.patch_h = patch_h;
    g.patch_w = patch_w;
    g.padded_h = ((host_h + patch_h - 1) / patch_h) * patch_h;
    g.padded_w = ((host_w + patch_w - 1) / patch_w) * patch_w;
    g.patches.reserve(static_cast<size_t>(g.rows()) * g.cols());
    for (int ry = 0; ry < g.padded_h; ry += patch_h)
        for (int rx = 0; rx < g.padded_w; rx += patch_w)
            g.patches.push_back(Rect{rx, ry, patch_w, patch_h});
    return g;
}

// --- crop / paste ------------------------------------------------------------

inline ProbMap crop(const ProbMap& map, const Rect& r) {
    if (!r.contains_in(map.height, map.width)) throw std::invalid_argument("crop: rect outside map");
    ProbMap out(map.channels, r.h, r.w);
    for (int c = 0; c < map.channels; ++c)
        for (int y = 0; y < r.h; ++y)
            std::memcpy(out.plane(c) + static_cast<size_t>(y) * r.w,
                        map.plane(c) + (static_cast<size_t>(r.y + y) * map.width + r.x),
                        sizeof(float) * r.w);
    return out;
}

inline void paste(ProbMap& dst, const ProbMap& src, const Rect& r) {
    if (src.channels != dst.channels) throw std::invalid_argument("paste: channel mismatch");
    if (src.height != r.h || src.width != r.w) throw std::invalid_argument("paste: src dims != rect");
    if (!r.contains_in(dst.height, dst.width)) throw std::invalid_argument("paste: rect outside map");
    for (int c = 0; c < dst.channels; ++c)
        for (int y = 0; y < r.h; ++y)
            std::memcpy(dst.plane(c) + (static_cast<size_t>(r.y + y) * dst.width + r.x),
                        src.plane(c) + static_cast<size_t>(y) * r.w, sizeof(float) * r.w);
}

inline RgbImage crop(const RgbImage& img, const Rect& r) {
    if (!r.contains_in(img.height, img.width)) throw std::invalid_argument("crop: rect outside image");
    RgbImage out(r.h, r.w);
    for (int y = 0; y < r.h; ++y)
        std::memcpy(out.samples.data() + static_cast<size_t>(y) * r.w * 3,
                    img.samples.data() + (static_cast<size_t>(r.y + y) * img.width + r.x) * 3,
                    static_cast<size_t>(r.w) * 3);
    return out;
}

inline LabelMap crop(const LabelMap& m, const Rect& r) {
    if (!r.contains_in(m.height, m.width)) throw std::invalid_argument("crop: rect outside map");
    LabelMap out(r.h, r.w);
    for (int y = 0; y < r.h; ++y)
        std::memcpy(out.labels.data() + static_cast<size_t>(y) * r.w,
                    m.labels.data() + static_cast<size_t>(r.y + y) * m.width + r.x,
                    static_cast<size_t>(r.w));
    return out;
}

// Crop where the rect may extend past the host; out-of-range coordinates are
// mirror-reflected. Used when tiling a raster whose dims are not multiples of
// the patch dims.
inline RgbImage crop_reflected(const RgbImage& img, const Rect& r) {
    RgbImage out(r.h, r.w);
    for (int y = 0; y < r.h; ++y) {
        int sy = detail::reflect_index(r.y + y, img.height);
        for (int x = 0; x < r.w; ++x) {
            int sx = detail::reflect_index(r.x + x, img.width);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(sy, sx, c);
        }
    }
    return out;
}

inline LabelMap crop_reflected(const LabelMap& m, const Rect& r) {
    LabelMap out(r.h, r.w);
    for (int y = 0; y < r.h; ++y) {
        int sy = detail::reflect_index(r.y + y, m.height);
        for (int x = 0; x < r.w; ++x) out.at(y, x) = m.at(sy, detail::reflect_index(r.x + x, m.width));
    }
    return out;
}

inline ProbMap crop_reflected(const ProbMap& m, const Rect& r) {
    ProbMap out(m.channels, r.h, r.w);
    for (int c = 0; c < m.channels; ++c)
        for (int y = 0; y < r.h; ++y) {
            int sy = detail::reflect_index(r.y + y, m.height);
            for (int x = 0; x < r.w; ++x)
                out.at(c, y, x) = m.at(c, sy, detail::reflect_index(r.x + x, m.width));
        }
    return out;
}

// Reflection-pad to the given dims (top-left anchored, pad on bottom/right).
inline ProbMap reflect_pad(const ProbMap& m, int padded_h, int padded_w) {
    if (padded_h == m.height && padded_w == m.width) return m;
    return crop_reflected(m, Rect{0, 0, padded_w, padded_h});
}

// Map a rect between scale coordinate systems, rounding edges outward, then
// clamp to the target host raster. Used to locate the lower-scale source
// region backing a patch at the next scale.
inline Rect scale_rect_outward(const Rect& r, double from_scale, double to_scale, int host_h,
                               int host_w) {
    double f = to_scale / from_scale;
    int x0 = static_cast<int>(std::floor(r.x * f));
    int y0 = static_cast<int>(std::floor(r.y * f));
    int x1 = static_cast<int>(std::ceil((r.x + r.w) * f));
    int y1 = static_cast<int>(std::ceil((r.y + r.h) * f));
    x0 = std::clamp(x0, 0, host_w - 1);
    y0 = std::clamp(y0, 0, host_h - 1);
    x1 = std::clamp(x1, x0 + 1, host_w);
    y1 = std::clamp(y1, y0 + 1, host_h);
    return Rect{x0, y0, x1 - x0, y1 - y0};
}

inline ConfidenceMap crop_to_host(const ConfidenceMap& m, int h, int w) {
    ConfidenceMap out(h, w);
    for (int y = 0; y < h; ++y)
        std::memcpy(out.values.data() + static_cast<size_t>(y) * w,
                    m.values.data() + static_cast<size_t>(y) * m.width, sizeof(float) * w);
    return out;
}

}  // namespace sbss
