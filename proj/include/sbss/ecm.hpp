#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "sbss/grid.hpp"
#include "sbss/io.hpp"

namespace sbss {

// Generic channel-major tensor used by the network internals. Production math
// runs in float; the double instantiation exists for gradient verification.
template <typename T>
struct Tensor3 {
    int c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor3() = default;
    Tensor3(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, T(0)) {}

    size_t plane_size() const { return static_cast<size_t>(h) * w; }
    T* plane(int ci) { return v.data() + static_cast<size_t>(ci) * plane_size(); }
    const T* plane(int ci) const { return v.data() + static_cast<size_t>(ci) * plane_size(); }
};

// Error-correction network parameters. Channel counts follow the fixed layout:
// stem 3x3 (2C -> width), two residual blocks of depthwise 7x7 + pointwise
// expansion (width -> expansion) + pointwise projection, head 1x1 (width -> C).
// Production nets use width 96 / expansion 384; narrower instances are allowed
// in memory for verification but cannot be serialized.
template <typename T>
struct EcnParams {
    static constexpr int kBlocks = 2;
    static constexpr int kStemKernel = 3;
    static constexpr int kDwKernel = 7;
    static constexpr int kProductionWidth = 96;
    static constexpr int kProductionExpansion = 384;

    int classes = 0;
    int width = kProductionWidth;
    int expansion = kProductionExpansion;

    std::vector<T> stem_w;  // [width][2C][3][3]
    std::vector<T> stem_b;  // [width]
    struct Block {
        std::vector<T> dw_w;    // [width][7][7]
        std::vector<T> dw_b;    // [width]
        std::vector<T> exp_w;   // [expansion][width]
        std::vector<T> exp_b;   // [expansion]
        std::vector<T> proj_w;  // [width][expansion]
        std::vector<T> proj_b;  // [width]
    };
    std::array<Block, kBlocks> blocks;
    std::vector<T> head_w;  // [C][width]
    std::vector<T> head_b;  // [C]

    void allocate() {
        stem_w.assign(static_cast<size_t>(width) * 2 * classes * 9, T(0));
        stem_b.assign(width, T(0));
        for (auto& b : blocks) {
            b.dw_w.assign(static_cast<size_t>(width) * 49, T(0));
            b.dw_b.assign(width, T(0));
            b.exp_w.assign(static_cast<size_t>(expansion) * width, T(0));
            b.exp_b.assign(expansion, T(0));
            b.proj_w.assign(static_cast<size_t>(width) * expansion, T(0));
            b.proj_b.assign(width, T(0));
        }
        head_w.assign(static_cast<size_t>(classes) * width, T(0));
        head_b.assign(classes, T(0));
    }

    // Visits every parameter tensor in the fixed serialization order.
    template <typename F>
    void for_each_tensor(F&& fn) {
        fn("stem_w", stem_w, std::vector<uint32_t>{static_cast<uint32_t>(width),
                                                   static_cast<uint32_t>(2 * classes), 3u, 3u});
        fn("stem_b", stem_b, std::vector<uint32_t>{static_cast<uint32_t>(width)});
        for (int i = 0; i < kBlocks; ++i) {
            auto& b = blocks[i];
            std::string tag = "block" + std::to_string(i) + ".";
            fn(tag + "dw_w", b.dw_w,
               std::vector<uint32_t>{static_cast<uint32_t>(width), 7u, 7u});
            fn(tag + "dw_b", b.dw_b, std::vector<uint32_t>{static_cast<uint32_t>(width)});
            fn(tag + "exp_w", b.exp_w,
               std::vector<uint32_t>{static_cast<uint32_t>(expansion), static_cast<uint32_t>(width)});
            fn(tag + "exp_b", b.exp_b, std::vector<uint32_t>{static_cast<uint32_t>(expansion)});
            fn(tag + "proj_w", b.proj_w,
               std::vector<uint32_t>{static_cast<uint32_t>(width), static_cast<uint32_t>(expansion)});
            fn(tag + "proj_b", b.proj_b, std::vector<uint32_t>{static_cast<uint32_t>(width)});
        }
        fn("head_w", head_w,
           std::vector<uint32_t>{static_cast<uint32_t>(classes), static_cast<uint32_t>(width)});
        fn("head_b", head_b, std::vector<uint32_t>{static_cast<uint32_t>(classes)});
    }

    template <typename F>
    void for_each_tensor(F&& fn) const {
        const_cast<EcnParams*>(this)->for_each_tensor(
            [&](const std::string& name, std::vector<T>& v, const std::vector<uint32_t>& dims) {
                fn(name, const_cast<const std::vector<T>&>(v), dims);
            });
    }

    void validate() const {
        if (classes < 2) throw std::invalid_argument("ecn: classes must be >= 2");
        if (width < 1 || expansion < 1) throw std::invalid_argument("ecn: bad channel counts");
        const_cast<EcnParams*>(this)->for_each_tensor(
            [&](const std::string& name, std::vector<T>& v, const std::vector<uint32_t>& dims) {
                size_t n = 1;
                for (uint32_t d : dims) n *= d;
                if (v.size() != n) throw std::invalid_argument("ecn: tensor size mismatch: " + name);
                for (T x : v)
                    if (!std::isfinite(static_cast<double>(x)))
                        throw std::invalid_argument("ecn: non-finite parameter in " + name);
            });
    }
};

using EcnWeights = EcnParams<float>;

inline EcnWeights make_ecn_weights(int classes, uint64_t seed, int width = 96, int expansion = 384) {
    EcnWeights p;
    p.classes = classes;
    p.width = width;
    p.expansion = expansion;
    p.allocate();
    std::mt19937_64 rng(seed);
    auto fill = [&](std::vector<float>& v, int fan_in) {
        float bound = std::sqrt(6.f / static_cast<float>(fan_in));  // Kaiming uniform, fan-in
        std::uniform_real_distribution<float> dist(-bound, bound);
        for (auto& x : v) x = dist(rng);
    };
    fill(p.stem_w, 2 * classes * 9);
    for (auto& b : p.blocks) {
        fill(b.dw_w, 49);
        fill(b.exp_w, width);
        fill(b.proj_w, expansion);
    }
    fill(p.head_w, width);
    return p;
}

template <typename T>
EcnParams<T> convert_params(const EcnWeights& src) {
    EcnParams<T> dst;
    dst.classes = src.classes;
    dst.width = src.width;
    dst.expansion = src.expansion;
    dst.allocate();
    auto copy = [](const std::vector<float>& a, std::vector<T>& b) {
        for (size_t i = 0; i < a.size(); ++i) b[i] = static_cast<T>(a[i]);
    };
    copy(src.stem_w, dst.stem_w);
    copy(src.stem_b, dst.stem_b);
    for (int i = 0; i < EcnWeights::kBlocks; ++i) {
        copy(src.blocks[i].dw_w, dst.blocks[i].dw_w);
        copy(src.blocks[i].dw_b, dst.blocks[i].dw_b);
        copy(src.blocks[i].exp_w, dst.blocks[i].exp_w);
        copy(src.blocks[i].exp_b, dst.blocks[i].exp_b);
        copy(src.blocks[i].proj_w, dst.blocks[i].proj_w);
        copy(src.blocks[i].proj_b, dst.blocks[i].proj_b);
    }
    copy(src.head_w, dst.head_w);
    copy(src.head_b, dst.head_b);
    return dst;
}

// Analytic cost of one ECN application, per pixel, in Flops (2 per MAC).
inline double ecn_flops_per_pixel(int classes, int width = 96, int expansion = 384, int blocks = 2) {
    double f = 2.0 * 9 * (2 * classes) * width;               // stem 3x3
    f += blocks * (2.0 * 49 * width + 4.0 * width * expansion);  // dw + expand + project
    f += 2.0 * width * classes;                               // head 1x1
    return f;
}

// --- low-level kernels --------------------------------------------------------

namespace ecn_detail {

template <typename T>
inline void axpy(T alpha, const T* x, T* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Fixed-order blocked dot product: lane accumulators summed in a set order so
// results do not depend on call context.
template <typename T>
inline T dot(const T* a, const T* b, size_t n) {
    T acc[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
    for (; i < n; ++i) acc[i % 8] += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
inline T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <typename T>
inline T gelu_grad(T x) {
    T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
    return cdf + x * pdf;
}

// Dense conv, stride 1, zero padding 'same'. Weights [Cout][Cin][k][k].
template <typename T>
void conv2d_same(const Tensor3<T>& in, const std::vector<T>& w, const std::vector<T>& b, int k,
                 Tensor3<T>& out) {
    int pad = k / 2, h = in.h, width = in.w;
    for (int co = 0; co < out.c; ++co) {
        T* op = out.plane(co);
        std::fill(op, op + out.plane_size(), b[co]);
    }
    for (int co = 0; co < out.c; ++co) {
        T* op = out.plane(co);
        for (int ci = 0; ci < in.c; ++ci) {
            const T* ip = in.plane(ci);
            const T* wk = w.data() + ((static_cast<size_t>(co) * in.c) + ci) * k * k;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    T wv = wk[ky * k + kx];
                    int oy0 = std::max(0, pad - ky), oy1 = std::min(h, h + pad - ky);
                    int ox0 = std::max(0, pad - kx), ox1 = std::min(width, width + pad - kx);
                    if (ox0 >= ox1) continue;
                    for (int oy = oy0; oy < oy1; ++oy) {
                        const T* irow = ip + static_cast<size_t>(oy + ky - pad) * width + (ox0 + kx - pad);
                        T* orow = op + static_cast<size_t>(oy) * width + ox0;
                        axpy(wv, irow, orow, static_cast<size_t>(ox1 - ox0));
                    }
                }
        }
    }
}

// Depthwise conv, stride 1, zero padding 'same'. Weights [C][k][k].
template <typename T>
void depthwise_same(const Tensor3<T>& in, const std::vector<T>& w, const std::vector<T>& b, int k,
                    Tensor3<T>& out) {
    int pad = k / 2, h = in.h, width = in.w;
    for (int c = 0; c < in.c; ++c) {
        T* op = out.plane(c);
        std::fill(op, op + out.plane_size(), b[c]);
        const T* ip = in.plane(c);
        const T* wk = w.data() + static_cast<size_t>(c) * k * k;
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                T wv = wk[ky * k + kx];
                int oy0 = std::max(0, pad - ky), oy1 = std::min(h, h + pad - ky);
                int ox0 = std::max(0, pad - kx), ox1 = std::min(width, width + pad - kx);
                if (ox0 >= ox1) continue;
                for (int oy = oy0; oy < oy1; ++oy) {
                    const T* irow = ip + static_cast<size_t>(oy + ky - pad) * width + (ox0 + kx - pad);
                    T* orow = op + static_cast<size_t>(oy) * width + ox0;
                    axpy(wv, irow, orow, static_cast<size_t>(ox1 - ox0));
                }
            }
    }
}

// 1x1 conv. Weights [Cout][Cin].
template <typename T>
void pointwise(const Tensor3<T>& in, const std::vector<T>& w, const std::vector<T>& b,
               Tensor3<T>& out) {
    size_t n = in.plane_size();
    for (int co = 0; co < out.c; ++co) {
        T* op = out.plane(co);
        std::fill(op, op + n, b[co]);
        const T* wr = w.data() + static_cast<size_t>(co) * in.c;
        for (int ci = 0; ci < in.c; ++ci) axpy(wr[ci], in.plane(ci), op, n);
    }
}

template <typename T>
void gelu_inplace(Tensor3<T>& t) {
    for (auto& x : t.v) x = gelu(x);
}

// Cached intermediates of one forward pass, enough to backpropagate.
template <typename T>
struct Trace {
    Tensor3<T> input;                          // 2C
    Tensor3<T> stem_pre;                       // pre-GELU stem output
    std::array<Tensor3<T>, 2> block_in;        // features entering each block
    std::array<Tensor3<T>, 2> dw_out;          // depthwise output (expand input)
    std::array<Tensor3<T>, 2> exp_pre;         // pre-GELU expansion
    std::array<Tensor3<T>, 2> exp_act;         // post-GELU expansion (projection input)
    Tensor3<T> features;                       // head input
};

template <typename T>
Tensor3<T> forward_logits(const EcnParams<T>& p, const Tensor3<T>& input, Trace<T>* trace) {
    int h = input.h, w = input.w;
    Tensor3<T> stem(p.width, h, w);
    conv2d_same(input, p.stem_w, p.stem_b, 3, stem);
    if (trace) {
        trace->input = input;
        trace->stem_pre = stem;
    }
    gelu_inplace(stem);

    Tensor3<T> x = std::move(stem);
    for (int bi = 0; bi < EcnParams<T>::kBlocks; ++bi) {
        const auto& blk = p.blocks[bi];
        if (trace) trace->block_in[bi] = x;
        Tensor3<T> u(p.width, h, w);
        depthwise_same(x, blk.dw_w, blk.dw_b, 7, u);
        Tensor3<T> e(p.expansion, h, w);
        pointwise(u, blk.exp_w, blk.exp_b, e);
        if (trace) {
            trace->dw_out[bi] = u;
            trace->exp_pre[bi] = e;
        }
        gelu_inplace(e);
        if (trace) trace->exp_act[bi] = e;
        Tensor3<T> y(p.width, h, w);
        pointwise(e, blk.proj_w, blk.proj_b, y);
        for (size_t i = 0; i < x.v.size(); ++i) x.v[i] += y.v[i];  // identity skip
    }
    if (trace) trace->features = x;

    Tensor3<T> logits(p.classes, h, w);
    pointwise(x, p.head_w, p.head_b, logits);
    return logits;
}

template <typename T>
void softmax_inplace(Tensor3<T>& t) {
    size_t n = t.plane_size();
    for (size_t px = 0; px < n; ++px) {
        T best = t.v[px];
        for (int c = 1; c < t.c; ++c) best = std::max(best, t.v[static_cast<size_t>(c) * n + px]);
        T sum = T(0);
        for (int c = 0; c < t.c; ++c) {
            T& x = t.v[static_cast<size_t>(c) * n + px];
            x = std::exp(x - best);
            sum += x;
        }
        T inv = T(1) / sum;
        for (int c = 0; c < t.c; ++c) t.v[static_cast<size_t>(c) * n + px] *= inv;
    }
}

}  // namespace ecn_detail

// --- public ECM operations -------------------------------------------------------

// Initial corrected map: concatenate [lower; upper], run the network, softmax.
inline ProbMap ecn_forward(const EcnWeights& weights, const ProbMap& lower, const ProbMap& upper) {
    if (lower.channels != upper.channels || lower.height != upper.height ||
        lower.width != upper.width)
        throw std::invalid_argument("ecn_forward: lower/upper geometry mismatch");
    if (weights.classes != lower.channels)
        throw std::invalid_argument("ecn_forward: weights class count does not match inputs");

    Tensor3<float> input(2 * lower.channels, lower.height, lower.width);
    std::copy(lower.values.begin(), lower.values.end(), input.v.begin());
    std::copy(upper.values.begin(), upper.values.end(),
              input.v.begin() + static_cast<ptrdiff_t>(lower.values.size()));

    Tensor3<float> logits = ecn_detail::forward_logits<float>(weights, input, nullptr);
    ecn_detail::softmax_inplace(logits);

    ProbMap out(lower.channels, lower.height, lower.width);
    out.values = std::move(logits.v);
    return out;
}

using AdMap = ConfidenceMap;  // values are (1 - conf_lower) * conf_upper

inline AdMap ad_map(const ConfidenceMap& conf_lower, const ConfidenceMap& conf_upper) {
    if (conf_lower.height != conf_upper.height || conf_lower.width != conf_upper.width)
        throw std::invalid_argument("ad_map: geometry mismatch");
    AdMap out(conf_lower.height, conf_lower.width);
    for (size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = (1.f - conf_lower.values[i]) * conf_upper.values[i];
    return out;
}

// Upper median: element at index floor(N/2) of the ascending order.
inline float act_threshold(const AdMap& ad) {
    if (ad.values.empty()) throw std::invalid_argument("act_threshold: empty map");
    std::vector<float> v = ad.values;
    size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    return v[mid];
}

enum class FusionMode { act_only, ecn_only, ecn_act };

inline const char* to_string(FusionMode m) {
    switch (m) {
        case FusionMode::act_only: return "act_only";
        case FusionMode::ecn_only: return "ecn_only";
        default: return "ecn_act";
    }
}

struct FusionResult {
    ProbMap fused;
    std::vector<uint8_t> mask;  // 1 where the candidate replaced the base
    size_t replaced = 0;
    float threshold = 0.f;
};

// Replace base pixels whose AD value strictly exceeds the median AD.
inline FusionResult act_fuse(const ProbMap& base, const ProbMap& candidate) {
    if (base.channels != candidate.channels || base.height != candidate.height ||
        base.width != candidate.width)
        throw std::invalid_argument("act_fuse: geometry mismatch");
    AdMap ad = ad_map(confidence_map(base), confidence_map(candidate));
    FusionResult res;
    res.threshold = act_threshold(ad);
    res.fused = base;
    res.mask.assign(ad.values.size(), 0);
    size_t n = base.pixel_count();
    for (size_t p = 0; p < n; ++p) {
        if (ad.values[p] > res.threshold) {
            res.mask[p] = 1;
            ++res.replaced;
            for (int c = 0; c < base.channels; ++c)
                res.fused.values[static_cast<size_t>(c) * n + p] =
                    candidate.values[static_cast<size_t>(c) * n + p];
        }
    }
    return res;
}

struct CorrectionResult {
    ProbMap map;
    double replaced_fraction = 0.0;
};

// Full error-correction step for one patch.
inline CorrectionResult correct(FusionMode mode, const EcnWeights* weights, const ProbMap& lower,
                                const ProbMap& upper) {
    if (mode != FusionMode::act_only && weights == nullptr)
        throw std::invalid_argument("correct: ECN modes require weights");
    switch (mode) {
        case FusionMode::act_only: {
            FusionResult r = act_fuse(lower, upper);
            return {std::move(r.fused), static_cast<double>(r.replaced) / lower.pixel_count()};
        }
        case FusionMode::ecn_only:
            return {ecn_forward(*weights, lower, upper), 1.0};
        default: {
            ProbMap initial = ecn_forward(*weights, lower, upper);
            FusionResult r = act_fuse(lower, initial);
            return {std::move(r.fused), static_cast<double>(r.replaced) / lower.pixel_count()};
        }
    }
}

// --- .ecw weight container ---------------------------------------------------------
// magic "ECW1" | u32 classes | u32 width | u32 blocks | u32 stem kernel | u32 dw kernel
// followed by each parameter tensor as an embedded .tns record, fixed order.

inline void write_ecw(const std::string& path, const EcnWeights& weights) {
    weights.validate();
    if (weights.width != EcnWeights::kProductionWidth ||
        weights.expansion != EcnWeights::kProductionExpansion)
        throw std::invalid_argument("write_ecw: only production-width nets are serializable");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os.write("ECW1", 4);
    detail::put_u32le(os, static_cast<uint32_t>(weights.classes));
    detail::put_u32le(os, static_cast<uint32_t>(weights.width));
    detail::put_u32le(os, EcnWeights::kBlocks);
    detail::put_u32le(os, EcnWeights::kStemKernel);
    detail::put_u32le(os, EcnWeights::kDwKernel);
    weights.for_each_tensor(
        [&](const std::string&, const std::vector<float>& v, const std::vector<uint32_t>& dims) {
            TnsTensor t;
            t.dims = dims;
            t.data = v;
            write_tns(os, t);
        });
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline EcnWeights read_ecw(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw NotFoundError("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "ECW1", 4) != 0)
        throw CorruptInputError(path + ": bad .ecw magic");
    uint32_t classes = detail::get_u32le(is, path);
    uint32_t width = detail::get_u32le(is, path);
    uint32_t blocks = detail::get_u32le(is, path);
    uint32_t stem_k = detail::get_u32le(is, path);
    uint32_t dw_k = detail::get_u32le(is, path);
    if (width != EcnWeights::kProductionWidth || blocks != EcnWeights::kBlocks ||
        stem_k != EcnWeights::kStemKernel || dw_k != EcnWeights::kDwKernel || classes < 2)
        throw CorruptInputError(path + ": header inconsistent with the ECN layout");
    EcnWeights w;
    w.classes = static_cast<int>(classes);
    w.width = static_cast<int>(width);
    w.expansion = 4 * static_cast<int>(width);
    w.allocate();
    w.for_each_tensor(
        [&](const std::string& name, std::vector<float>& v, const std::vector<uint32_t>& dims) {
            TnsTensor t = read_tns(is, path);
            if (t.dims != dims) throw CorruptInputError(path + ": unexpected dims for " + name);
            v = std::move(t.data);
        });
    w.validate();
    return w;
}

}  // namespace sbss
