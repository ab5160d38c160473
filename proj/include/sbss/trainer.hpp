#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sbss/backend.hpp"
#include "sbss/common.hpp"
#include "sbss/ecm.hpp"
#include "sbss/pipeline.hpp"
#include "sbss/scheduler.hpp"

namespace sbss {

// One supervised example for a scale transition: the resized lower-scale map,
// the raw upper-scale map, and ground truth at the upper geometry.
struct TrainSample {
    ProbMap lower;
    ProbMap upper;
    LabelMap target;

    void validate() const {
        if (lower.channels != upper.channels || lower.height != upper.height ||
            lower.width != upper.width)
            throw std::invalid_argument("train sample: lower/upper geometry mismatch");
        if (target.height != upper.height || target.width != upper.width)
            throw std::invalid_argument("train sample: target geometry mismatch");
    }
};

struct TrainConfig {
    int iterations = 1000;
    int batch = 16;
    double lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    double poly_power = 0.9;
    uint64_t seed = 0;
    bool flip = true;        // random horizontal flip
    int crop_h = 0;          // random-crop dims; 0 disables
    int crop_w = 0;

    void validate() const {
        if (iterations < 1) throw std::invalid_argument("train: iterations must be >= 1");
        if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
        if (!(lr >= 0.0)) throw std::invalid_argument("train: negative learning rate");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw std::invalid_argument("train: momentum outside [0,1)");
        if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: negative weight decay");
        if ((crop_h == 0) != (crop_w == 0))
            throw std::invalid_argument("train: crop dims must both be set or both be zero");
    }
};

namespace ecn_detail {

template <typename T>
std::vector<std::vector<T>*> tensor_list(EcnParams<T>& p) {
    std::vector<std::vector<T>*> out;
    p.for_each_tensor([&](const std::string&, std::vector<T>& v, const std::vector<uint32_t>&) {
        out.push_back(&v);
    });
    return out;
}

template <typename T>
void add_params(EcnParams<T>& dst, EcnParams<T>& src) {
    auto d = tensor_list(dst), s = tensor_list(src);
    for (size_t i = 0; i < d.size(); ++i)
        for (size_t j = 0; j < d[i]->size(); ++j) (*d[i])[j] += (*s[i])[j];
}

template <typename T>
void scale_params(EcnParams<T>& p, T alpha) {
    auto l = tensor_list(p);
    for (auto* v : l)
        for (auto& x : *v) x *= alpha;
}

template <typename T>
T sum_plane(const T* p, size_t n) {
    T acc[4] = {T(0), T(0), T(0), T(0)};
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        for (int k = 0; k < 4; ++k) acc[k] += p[i + k];
    for (; i < n; ++i) acc[i % 4] += p[i];
    return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

// Gradient of a stride-1 same-padded conv with respect to its kernel:
// g[co][ci][ky][kx] = sum over valid pixels of dout[co] * in[ci] shifted by (ky,kx).
template <typename T>
void conv_kernel_grad(const Tensor3<T>& in, const Tensor3<T>& dout, int k, std::vector<T>& grad) {
    int pad = k / 2, h = in.h, w = in.w;
    for (int co = 0; co < dout.c; ++co)
        for (int ci = 0; ci < in.c; ++ci) {
            const T* dp = dout.plane(co);
            const T* ip = in.plane(ci);
            T* g = grad.data() + ((static_cast<size_t>(co) * in.c) + ci) * k * k;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    int oy0 = std::max(0, pad - ky), oy1 = std::min(h, h + pad - ky);
                    int ox0 = std::max(0, pad - kx), ox1 = std::min(w, w + pad - kx);
                    if (ox0 >= ox1) continue;
                    T acc = T(0);
                    for (int oy = oy0; oy < oy1; ++oy)
                        acc += dot(dp + static_cast<size_t>(oy) * w + ox0,
                                   ip + static_cast<size_t>(oy + ky - pad) * w + (ox0 + kx - pad),
                                   static_cast<size_t>(ox1 - ox0));
                    g[ky * k + kx] += acc;
                }
        }
}

template <typename T>
void depthwise_kernel_grad(const Tensor3<T>& in, const Tensor3<T>& dout, int k,
                           std::vector<T>& grad) {
    int pad = k / 2, h = in.h, w = in.w;
    for (int c = 0; c < in.c; ++c) {
        const T* dp = dout.plane(c);
        const T* ip = in.plane(c);
        T* g = grad.data() + static_cast<size_t>(c) * k * k;
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                int oy0 = std::max(0, pad - ky), oy1 = std::min(h, h + pad - ky);
                int ox0 = std::max(0, pad - kx), ox1 = std::min(w, w + pad - kx);
                if (ox0 >= ox1) continue;
                T acc = T(0);
                for (int oy = oy0; oy < oy1; ++oy)
                    acc += dot(dp + static_cast<size_t>(oy) * w + ox0,
                               ip + static_cast<size_t>(oy + ky - pad) * w + (ox0 + kx - pad),
                               static_cast<size_t>(ox1 - ox0));
                g[ky * k + kx] += acc;
            }
    }
}

// Input gradient of a depthwise conv: correlate dout with the flipped kernel.
template <typename T>
void depthwise_input_grad(const Tensor3<T>& dout, const std::vector<T>& w, int k, Tensor3<T>& din) {
    std::vector<T> flipped(w.size());
    for (int c = 0; c < dout.c; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx)
                flipped[(static_cast<size_t>(c) * k + ky) * k + kx] =
                    w[(static_cast<size_t>(c) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
    std::vector<T> zero_bias(dout.c, T(0));
    depthwise_same(dout, flipped, zero_bias, k, din);
}

// dL/din for a pointwise conv: in gradient = W^T * dout.
template <typename T>
void pointwise_input_grad(const Tensor3<T>& dout, const std::vector<T>& w, int cin,
                          Tensor3<T>& din) {
    size_t n = dout.plane_size();
    for (int ci = 0; ci < cin; ++ci) {
        T* dp = din.plane(ci);
        std::fill(dp, dp + n, T(0));
    }
    for (int co = 0; co < dout.c; ++co) {
        const T* dp = dout.plane(co);
        const T* wr = w.data() + static_cast<size_t>(co) * cin;
        for (int ci = 0; ci < cin; ++ci) axpy(wr[ci], dp, din.plane(ci), n);
    }
}

template <typename T>
void pointwise_grads(const Tensor3<T>& in, const Tensor3<T>& dout, std::vector<T>& grad_w,
                     std::vector<T>& grad_b) {
    size_t n = in.plane_size();
    for (int co = 0; co < dout.c; ++co) {
        const T* dp = dout.plane(co);
        grad_b[co] += sum_plane(dp, n);
        T* g = grad_w.data() + static_cast<size_t>(co) * in.c;
        for (int ci = 0; ci < in.c; ++ci) g[ci] += dot(dp, in.plane(ci), n);
    }
}

// Backpropagate dlogits through the network, accumulating parameter gradients.
template <typename T>
void backward_into(const EcnParams<T>& p, const Trace<T>& trace, const Tensor3<T>& dlogits,
                   EcnParams<T>& grads) {
    int h = dlogits.h, w = dlogits.w;
    size_t n = static_cast<size_t>(h) * w;

    // head
    pointwise_grads(trace.features, dlogits, grads.head_w, grads.head_b);
    Tensor3<T> dx(p.width, h, w);
    pointwise_input_grad(dlogits, p.head_w, p.width, dx);

    // residual blocks, reverse order
    for (int bi = EcnParams<T>::kBlocks - 1; bi >= 0; --bi) {
        const auto& blk = p.blocks[bi];
        auto& gblk = grads.blocks[bi];

        // projection
        pointwise_grads(trace.exp_act[bi], dx, gblk.proj_w, gblk.proj_b);
        Tensor3<T> dg(p.expansion, h, w);
        pointwise_input_grad(dx, blk.proj_w, p.expansion, dg);

        // GELU on the expansion
        for (size_t i = 0; i < dg.v.size(); ++i) dg.v[i] *= gelu_grad(trace.exp_pre[bi].v[i]);

        // expansion
        pointwise_grads(trace.dw_out[bi], dg, gblk.exp_w, gblk.exp_b);
        Tensor3<T> du(p.width, h, w);
        pointwise_input_grad(dg, blk.exp_w, p.width, du);

        // depthwise
        depthwise_kernel_grad(trace.block_in[bi], du, 7, gblk.dw_w);
        for (int c = 0; c < p.width; ++c) gblk.dw_b[c] += sum_plane(du.plane(c), n);
        Tensor3<T> da(p.width, h, w);
        depthwise_input_grad(du, blk.dw_w, 7, da);

        // skip connection: gradient flows both through the block and around it
        for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += da.v[i];
    }

    // stem GELU + conv
    for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] *= gelu_grad(trace.stem_pre.v[i]);
    conv_kernel_grad(trace.input, dx, 3, grads.stem_w);
    for (int c = 0; c < p.width; ++c) grads.stem_b[c] += sum_plane(dx.plane(c), n);
}

template <typename T>
Tensor3<T> concat_input(const ProbMap& lower, const ProbMap& upper) {
    Tensor3<T> input(2 * lower.channels, lower.height, lower.width);
    for (size_t i = 0; i < lower.values.size(); ++i) input.v[i] = static_cast<T>(lower.values[i]);
    for (size_t i = 0; i < upper.values.size(); ++i)
        input.v[lower.values.size() + i] = static_cast<T>(upper.values[i]);
    return input;
}

}  // namespace ecn_detail

template <typename T>
struct LossGrads {
    double loss = 0.0;
    uint64_t valid_pixels = 0;
    EcnParams<T> grads;
};

// Mean cross-entropy of the initial corrected map against the targets, with
// exact analytic parameter gradients. T=double backs the verification mode.
template <typename T>
LossGrads<T> loss_and_grads(const EcnParams<T>& params, std::span<const TrainSample> batch,
                            int workers = 1) {
    if (batch.empty()) throw std::invalid_argument("loss_and_grads: empty batch");
    for (const auto& s : batch) {
        s.validate();
        if (s.lower.channels != params.classes)
            throw std::invalid_argument("loss_and_grads: sample classes do not match weights");
    }

    struct PerSample {
        double loss_sum = 0.0;
        uint64_t valid = 0;
        EcnParams<T> grads;
    };
    std::vector<PerSample> partial(batch.size());

    parallel_for(static_cast<int64_t>(batch.size()), workers, [&](int64_t i) {
        const TrainSample& s = batch[static_cast<size_t>(i)];
        PerSample& out = partial[static_cast<size_t>(i)];
        out.grads = params;
        ecn_detail::scale_params(out.grads, T(0));

        Tensor3<T> input = ecn_detail::concat_input<T>(s.lower, s.upper);
        ecn_detail::Trace<T> trace;
        Tensor3<T> logits = ecn_detail::forward_logits(params, input, &trace);
        Tensor3<T> probs = logits;
        ecn_detail::softmax_inplace(probs);

        size_t n = probs.plane_size();
        Tensor3<T> dlogits(params.classes, probs.h, probs.w);
        for (size_t px = 0; px < n; ++px) {
            uint8_t t = s.target.labels[px];
            if (t == LabelMap::kIgnore) continue;  // dlogits stays zero
            ++out.valid;
            for (int c = 0; c < params.classes; ++c) {
                T pv = probs.v[static_cast<size_t>(c) * n + px];
                dlogits.v[static_cast<size_t>(c) * n + px] = pv - T(c == t ? 1 : 0);
            }
            out.loss_sum -= std::log(
                std::max(static_cast<double>(probs.v[static_cast<size_t>(t) * n + px]), 1e-300));
        }
        if (out.valid) ecn_detail::backward_into(params, trace, dlogits, out.grads);
    });

    LossGrads<T> total;
    total.grads = params;
    ecn_detail::scale_params(total.grads, T(0));
    for (auto& p : partial) {
        total.loss += p.loss_sum;
        total.valid_pixels += p.valid;
        ecn_detail::add_params(total.grads, p.grads);
    }
    if (total.valid_pixels == 0)
        throw std::invalid_argument("loss_and_grads: batch has no non-ignore pixels");
    total.loss /= static_cast<double>(total.valid_pixels);
    ecn_detail::scale_params(total.grads, T(1) / static_cast<T>(total.valid_pixels));
    return total;
}

// SGD with momentum, weight decay and a poly learning-rate schedule:
// lr(t) = lr0 * (1 - t/T)^power; v <- m*v + g + wd*w; w <- w - lr*v.
inline void sgd_step(EcnWeights& weights, const EcnParams<float>& grads,
                     EcnParams<float>& momentum_buf, int step_index, const TrainConfig& cfg) {
    double frac = 1.0 - static_cast<double>(step_index) / cfg.iterations;
    frac = std::max(0.0, frac);
    float lr = static_cast<float>(cfg.lr * std::pow(frac, cfg.poly_power));
    float m = static_cast<float>(cfg.momentum);
    float wd = static_cast<float>(cfg.weight_decay);

    auto wl = ecn_detail::tensor_list(weights);
    auto gl = ecn_detail::tensor_list(const_cast<EcnParams<float>&>(grads));
    auto vl = ecn_detail::tensor_list(momentum_buf);
    for (size_t t = 0; t < wl.size(); ++t) {
        auto& w = *wl[t];
        auto& g = *gl[t];
        auto& v = *vl[t];
        for (size_t i = 0; i < w.size(); ++i) {
            v[i] = m * v[i] + g[i] + wd * w[i];
            w[i] -= lr * v[i];
        }
    }
}

struct TrainLogEntry {
    int iteration = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    EcnWeights weights;
    std::vector<TrainLogEntry> log;
};

namespace trainer_detail {

inline TrainSample flip_horizontal(const TrainSample& s) {
    TrainSample out = s;
    int h = s.upper.height, w = s.upper.width, C = s.upper.channels;
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                out.lower.at(c, y, x) = s.lower.at(c, y, w - 1 - x);
                out.upper.at(c, y, x) = s.upper.at(c, y, w - 1 - x);
            }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.target.at(y, x) = s.target.at(y, w - 1 - x);
    return out;
}

inline TrainSample crop_sample(const TrainSample& s, int ch, int cw, int oy, int ox) {
    Rect r{ox, oy, cw, ch};
    return TrainSample{crop(s.lower, r), crop(s.upper, r), crop(s.target, r)};
}

}  // namespace trainer_detail

// Deterministic supervised training; a pure function of (cfg, samples).
inline TrainResult train(const TrainConfig& cfg, const std::vector<TrainSample>& samples,
                         int workers = 1) {
    cfg.validate();
    if (samples.empty()) throw std::invalid_argument("train: empty sample list");
    for (const auto& s : samples) s.validate();
    const int classes = samples.front().lower.channels;

    TrainResult res;
    res.weights = make_ecn_weights(classes, mix64(cfg.seed, 0xec4u));
    EcnParams<float> momentum_buf = res.weights;
    ecn_detail::scale_params(momentum_buf, 0.f);

    std::mt19937_64 shuffle_rng(mix64(cfg.seed, 0x5841u));
    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    size_t cursor = order.size();  // triggers an initial shuffle

    std::vector<TrainSample> batch;
    res.log.reserve(cfg.iterations);
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        batch.clear();
        for (int b = 0; b < cfg.batch; ++b) {
            if (cursor >= order.size()) {
                std::shuffle(order.begin(), order.end(), shuffle_rng);
                cursor = 0;
            }
            const TrainSample& src = samples[order[cursor++]];
            uint64_t aug = mix64(mix64(cfg.seed, 0xa06u), (static_cast<uint64_t>(iter) << 20) | b);
            TrainSample s = src;
            if (cfg.crop_h > 0 && cfg.crop_h <= src.upper.height && cfg.crop_w <= src.upper.width) {
                int oy = static_cast<int>(unit_double(aug) * (src.upper.height - cfg.crop_h + 1));
                int ox = static_cast<int>(unit_double(splitmix64(aug)) *
                                          (src.upper.width - cfg.crop_w + 1));
                s = trainer_detail::crop_sample(s, cfg.crop_h, cfg.crop_w, oy, ox);
            }
            if (cfg.flip && (mix64(aug, 0xf11bu) & 1)) s = trainer_detail::flip_horizontal(s);
            batch.push_back(std::move(s));
        }
        auto lg = loss_and_grads<float>(res.weights, batch, workers);
        double frac = 1.0 - static_cast<double>(iter) / cfg.iterations;
        res.log.push_back({iter, cfg.lr * std::pow(frac, cfg.poly_power), lg.loss});
        sgd_step(res.weights, lg.grads, momentum_buf, iter, cfg);
    }
    return res;
}

// When set, the lower inputs of a training set come from the pipeline state at
// the transition's lower scale, produced with the already-trained weights of
// the earlier transitions (cascade training). Without it the lower inputs are
// the raw tiled segmentations at that scale.
struct CascadePrefix {
    FusionMode mode = FusionMode::ecn_act;
    std::vector<EcnWeights> trained;  // weights for transitions [0, transition_index)
};

// Builds the supervised set for one scale transition of a schedule: tile the
// next-scale raster, pair each patch's segmentation with the aligned region of
// the current-scale map and the resampled ground truth.
inline std::vector<TrainSample> build_training_set(const Backend& backend, const SceneSet& scenes,
                                                   const ScaleSchedule& schedule,
                                                   size_t transition_index, int workers = 1,
                                                   const CascadePrefix* cascade = nullptr) {
    schedule.validate();
    if (transition_index >= schedule.transition_count())
        throw std::invalid_argument("build_training_set: transition index out of range");
    if (cascade && cascade->mode != FusionMode::act_only &&
        cascade->trained.size() < transition_index)
        throw std::invalid_argument("build_training_set: cascade prefix is missing weights");
    double s_lo = schedule.scales[transition_index];
    double s_hi = schedule.scales[transition_index + 1];

    std::vector<std::vector<TrainSample>> per_scene(scenes.scenes.size());
    parallel_for(static_cast<int64_t>(scenes.scenes.size()), workers, [&](int64_t si) {
        const Scene& scene = scenes.scenes[static_cast<size_t>(si)];
        int H = scene.image.height, W = scene.image.width;
        int h_lo = round_px(s_lo * H), w_lo = round_px(s_lo * W);
        int h_hi = round_px(s_hi * H), w_hi = round_px(s_hi * W);

        ProbMap y_lo;
        if (cascade && transition_index > 0) {
            RunConfig rc;
            rc.schedule = schedule;
            rc.mode = cascade->mode;
            rc.backend = std::shared_ptr<const Backend>(std::shared_ptr<const Backend>(), &backend);
            rc.weights.assign(cascade->trained.begin(),
                              cascade->trained.begin() + transition_index);
            rc.workers = 1;  // scenes already run in parallel
            y_lo = sbss_refine(rc, scene.image, scene.id, transition_index, nullptr, nullptr);
        } else {
            RgbImage x_lo = resize_image(scene.image, h_lo, w_lo);
            y_lo = tiled_segment(backend, x_lo, s_lo, scene.id, schedule.patch_h, schedule.patch_w)
                       .map;
        }
        RgbImage x_hi = resize_image(scene.image, h_hi, w_hi);
        LabelMap gt_hi = resize_labels(scene.labels, h_hi, w_hi);

        PatchGrid grid = make_patch_grid(h_hi, w_hi, schedule.patch_h, schedule.patch_w);
        auto& out = per_scene[static_cast<size_t>(si)];
        out.reserve(grid.patches.size());
        for (const Rect& r : grid.patches) {
            ProbMap upper = backend.segment(crop_reflected(x_hi, r), s_hi, {scene.id, r});
            Rect r_lo = scale_rect_outward(r, s_hi, s_lo, h_lo, w_lo);
            ProbMap lower = resize_probmap(crop(y_lo, r_lo), r.h, r.w);
            LabelMap target = crop_reflected(gt_hi, r);
            out.push_back(TrainSample{std::move(lower), std::move(upper), std::move(target)});
        }
    });

    std::vector<TrainSample> samples;
    for (auto& v : per_scene)
        for (auto& s : v) samples.push_back(std::move(s));
    return samples;
}

}  // namespace sbss
