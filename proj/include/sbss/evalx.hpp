#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "sbss/backend.hpp"
#include "sbss/grid.hpp"

namespace sbss {

// C x C pixel counts; entry (gt, pred). Ignore pixels are excluded.
struct ConfusionMatrix {
    int classes = 0;
    std::vector<uint64_t> counts;  // row-major [gt][pred]

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int c) : classes(c), counts(static_cast<size_t>(c) * c, 0) {}

    uint64_t at(int gt, int pred) const { return counts[static_cast<size_t>(gt) * classes + pred]; }
    uint64_t& at(int gt, int pred) { return counts[static_cast<size_t>(gt) * classes + pred]; }

    uint64_t total() const {
        uint64_t t = 0;
        for (uint64_t v : counts) t += v;
        return t;
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
        if (other.classes != classes) throw std::invalid_argument("confusion matrix: size mismatch");
        for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
        return *this;
    }
};

inline void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw std::invalid_argument("accumulate: prediction and ground truth dims differ");
    for (size_t i = 0; i < gt.labels.size(); ++i) {
        uint8_t g = gt.labels[i];
        if (g == LabelMap::kIgnore) continue;
        uint8_t p = pred.labels[i];
        if (p == LabelMap::kIgnore) throw std::invalid_argument("accumulate: prediction contains the ignore value");
        if (g >= cm.classes || p >= cm.classes)
            throw std::invalid_argument("accumulate: label outside [0, C)");
        ++cm.at(g, p);
    }
}

struct IouReport {
    std::vector<double> per_class;  // NaN for classes with an empty union
    std::vector<bool> valid;
    double mean = 0.0;
};

// IoU_c = TP / (TP + FP + FN); classes with zero denominator are excluded from the mean.
inline IouReport miou(const ConfusionMatrix& cm) {
    IouReport rep;
    rep.per_class.assign(cm.classes, std::numeric_limits<double>::quiet_NaN());
    rep.valid.assign(cm.classes, false);
    double sum = 0.0;
    int n = 0;
    for (int c = 0; c < cm.classes; ++c) {
        uint64_t tp = cm.at(c, c);
        uint64_t fp = 0, fn = 0;
        for (int k = 0; k < cm.classes; ++k) {
            if (k == c) continue;
            fp += cm.at(k, c);
            fn += cm.at(c, k);
        }
        uint64_t denom = tp + fp + fn;
        if (denom == 0) continue;
        double iou = static_cast<double>(tp) / static_cast<double>(denom);
        rep.per_class[c] = iou;
        rep.valid[c] = true;
        sum += iou;
        ++n;
    }
    rep.mean = n ? sum / n : 0.0;
    return rep;
}

// --- per-class scale preference profiling ----------------------------------------

struct ScalePreferenceTable {
    std::vector<double> scales;
    // per class, one IoU per scale (NaN when undefined)
    std::vector<std::vector<double>> iou;
    std::vector<double> best_scale;     // argmax scale per class
    std::vector<bool> no_preference;    // top two scales closer than the tie margin

    static constexpr double kTieMargin = 0.005;  // 0.5 IoU points
};

// Single-scale sweep: for each scale, run tiled inference on every scene at
// that scale, resize predictions back to the original dims, and accumulate a
// corpus-wide confusion matrix. Records the best scale per class.
inline ScalePreferenceTable profile_scales(const Backend& backend, const SceneSet& scenes,
                                           const std::vector<double>& scales, int patch_h,
                                           int patch_w, int workers = 1) {
    if (scales.empty()) throw std::invalid_argument("profile_scales: empty scale list");
    if (scenes.scenes.empty()) throw std::invalid_argument("profile_scales: empty scene set");
    const int C = backend.classes();

    ScalePreferenceTable table;
    table.scales = scales;
    table.iou.assign(C, std::vector<double>(scales.size(), std::numeric_limits<double>::quiet_NaN()));

    for (size_t si = 0; si < scales.size(); ++si) {
        double s = scales[si];
        ConfusionMatrix cm(C);
        for (const Scene& scene : scenes.scenes) {
            int h_s = round_px(s * scene.image.height);
            int w_s = round_px(s * scene.image.width);
            RgbImage scaled = resize_image(scene.image, h_s, w_s);
            TiledResult r = tiled_segment(backend, scaled, s, scene.id, patch_h, patch_w, workers);
            ProbMap back = resize_probmap(r.map, scene.image.height, scene.image.width);
            accumulate(cm, argmax_labels(back), scene.labels);
        }
        IouReport rep = miou(cm);
        for (int c = 0; c < C; ++c) table.iou[c][si] = rep.per_class[c];
    }

    table.best_scale.assign(C, 0.0);
    table.no_preference.assign(C, false);
    for (int c = 0; c < C; ++c) {
        double best = -1.0, second = -1.0;
        size_t best_i = 0;
        for (size_t si = 0; si < scales.size(); ++si) {
            double v = table.iou[c][si];
            if (std::isnan(v)) continue;
            if (v > best) {
                second = best;
                best = v;
                best_i = si;
            } else if (v > second) {
                second = v;
            }
        }
        table.best_scale[c] = best >= 0 ? scales[best_i] : 0.0;
        table.no_preference[c] = best >= 0 && second >= 0 && (best - second) < ScalePreferenceTable::kTieMargin;
    }
    return table;
}

}  // namespace sbss
