#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "sbss/grid.hpp"

namespace sbss {

// Exact patch-selection fraction. Kept rational so budget identities like
// (1/12) * 1.5^2 = 0.1875 hold without rounding.
struct Fraction {
    int64_t num = 0;
    int64_t den = 1;

    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    bool is_one() const { return num == den; }
    bool is_zero() const { return num == 0; }

    // k = round-half-up(f * n), with a floor of one patch whenever f > 0.
    int64_t patch_count(int64_t n) const {
        if (num == 0) return 0;
        int64_t k = (2 * num * n + den) / (2 * den);
        return std::max<int64_t>(1, k);
    }

    static Fraction one() { return {1, 1}; }
    static Fraction zero() { return {0, 1}; }

    // Best rational with small denominator; exact for inputs like 0.25.
    static Fraction from_double(double x);
};

inline Fraction Fraction::from_double(double x) {
    if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("fraction outside [0,1]");
    int64_t best_num = 0, best_den = 1;
    double best_err = x;
    for (int64_t den = 1; den <= 4096; ++den) {
        int64_t num = static_cast<int64_t>(std::llround(x * den));
        double err = std::abs(x - static_cast<double>(num) / den);
        if (err < best_err - 1e-15) {
            best_err = err;
            best_num = num;
            best_den = den;
            if (err == 0.0) break;
        }
    }
    return {best_num, best_den};
}

enum class SchemeTag { ecs_ms, ecs_ss, baseline_ms, baseline_ss, custom };

inline const char* to_string(SchemeTag t) {
    switch (t) {
        case SchemeTag::ecs_ms: return "ecs_ms";
        case SchemeTag::ecs_ss: return "ecs_ss";
        case SchemeTag::baseline_ms: return "ms";
        case SchemeTag::baseline_ss: return "ss";
        default: return "custom";
    }
}

// An error-correction scheme: ordered scales with per-scale selection fractions.
struct ScaleSchedule {
    std::vector<double> scales;       // strictly increasing
    std::vector<Fraction> fractions;  // same length; fractions[0] must be 1
    int patch_h = 0;
    int patch_w = 0;
    SchemeTag tag = SchemeTag::custom;

    size_t scale_count() const { return scales.size(); }
    size_t transition_count() const { return scales.empty() ? 0 : scales.size() - 1; }

    void validate() const {
        if (scales.empty()) throw std::invalid_argument("schedule: no scales");
        if (scales.size() != fractions.size())
            throw std::invalid_argument("schedule: scales/fractions length mismatch");
        for (size_t i = 0; i + 1 < scales.size(); ++i)
            if (!(scales[i] < scales[i + 1]))
                throw std::invalid_argument("schedule: scales must be strictly increasing");
        for (double s : scales)
            if (!(s > 0.0)) throw std::invalid_argument("schedule: scales must be positive");
        if (!fractions.front().is_one())
            throw std::invalid_argument("schedule: first scale needs full coverage (f=1)");
        for (const auto& f : fractions)
            if (f.num < 0 || f.den <= 0 || f.num > f.den)
                throw std::invalid_argument("schedule: fraction outside [0,1]");
        if (patch_h < 1 || patch_w < 1) throw std::invalid_argument("schedule: empty patch dims");
    }
};

inline ScaleSchedule make_ecs_ms(int patch_h, int patch_w) {
    ScaleSchedule s;
    s.scales = {0.5, 0.75, 1.0, 1.25, 1.5};
    s.fractions.assign(5, Fraction::one());
    s.patch_h = patch_h;
    s.patch_w = patch_w;
    s.tag = SchemeTag::ecs_ms;
    return s;
}

inline ScaleSchedule make_ecs_ss(int patch_h, int patch_w) {
    ScaleSchedule s;
    s.scales = {0.25, 0.5, 1.0, 1.5};
    s.fractions = {Fraction::one(), Fraction::one(), {1, 4}, {1, 12}};
    s.patch_h = patch_h;
    s.patch_w = patch_w;
    s.tag = SchemeTag::ecs_ss;
    return s;
}

inline ScaleSchedule make_baseline_ms(int patch_h, int patch_w) {
    ScaleSchedule s;
    s.scales = {0.5, 0.75, 1.0, 1.25, 1.5, 1.75};
    s.fractions.assign(6, Fraction::one());
    s.patch_h = patch_h;
    s.patch_w = patch_w;
    s.tag = SchemeTag::baseline_ms;
    return s;
}

inline ScaleSchedule make_baseline_ss(int patch_h, int patch_w) {
    ScaleSchedule s;
    s.scales = {1.0};
    s.fractions = {Fraction::one()};
    s.patch_h = patch_h;
    s.patch_w = patch_w;
    s.tag = SchemeTag::baseline_ss;
    return s;
}

// Sum of f_i * s_i^2: the processed-area ratio, ignoring padding slack.
inline double schedule_ratio(const ScaleSchedule& s) {
    s.validate();
    double total = 0.0;
    for (size_t i = 0; i < s.scales.size(); ++i) {
        double term = static_cast<double>(s.fractions[i].num) * s.scales[i] * s.scales[i] /
                      static_cast<double>(s.fractions[i].den);
        total += term;
    }
    return total;
}

// Score each patch by mean confidence over its host-visible pixels and take the
// k lowest. Ties break toward the lower row-major patch index.
inline std::vector<Rect> select_patches(const ScaleSchedule& schedule, size_t scale_index,
                                        const ConfidenceMap& conf, const PatchGrid& grid) {
    if (scale_index >= schedule.fractions.size())
        throw std::invalid_argument("select_patches: scale index out of range");
    const Fraction& f = schedule.fractions[scale_index];
    if (!f.is_zero() && grid.patches.empty())
        throw std::invalid_argument("select_patches: empty grid with nonzero fraction");
    if (conf.height != grid.host_h || conf.width != grid.host_w)
        throw std::invalid_argument("select_patches: confidence map does not match grid host dims");
    if (f.is_one()) return grid.patches;
    int64_t n = static_cast<int64_t>(grid.patches.size());
    int64_t k = f.patch_count(n);
    if (k >= n) return grid.patches;
    if (k == 0) return {};

    std::vector<double> score(grid.patches.size());
    for (size_t i = 0; i < grid.patches.size(); ++i) {
        const Rect& r = grid.patches[i];
        int y1 = std::min(r.y + r.h, grid.host_h);
        int x1 = std::min(r.x + r.w, grid.host_w);
        double sum = 0.0;
        int64_t cnt = 0;
        for (int y = r.y; y < y1; ++y)
            for (int x = r.x; x < x1; ++x) {
                sum += conf.at(y, x);
                ++cnt;
            }
        score[i] = cnt ? sum / static_cast<double>(cnt) : 0.0;
    }
    std::vector<size_t> order(grid.patches.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (score[a] != score[b]) return score[a] < score[b];
        return a < b;
    });
    order.resize(static_cast<size_t>(k));
    std::sort(order.begin(), order.end());  // keep row-major processing order
    std::vector<Rect> out;
    out.reserve(order.size());
    for (size_t i : order) out.push_back(grid.patches[i]);
    return out;
}

// Multi-scale average voting: resize every map to the target dims, average, renormalize.
inline ProbMap ms_vote(const std::vector<ProbMap>& maps, int out_h, int out_w) {
    if (maps.empty()) throw std::invalid_argument("ms_vote: no maps");
    ProbMap acc = resize_probmap(maps.front(), out_h, out_w);
    for (size_t i = 1; i < maps.size(); ++i) {
        ProbMap m = resize_probmap(maps[i], out_h, out_w);
        if (m.channels != acc.channels) throw std::invalid_argument("ms_vote: channel mismatch");
        for (size_t j = 0; j < acc.values.size(); ++j) acc.values[j] += m.values[j];
    }
    float inv = 1.f / static_cast<float>(maps.size());
    for (float& v : acc.values) v *= inv;
    renormalize(acc);
    return acc;
}

// Processed-pixel accounting per scale, plus Flops estimates.
struct BudgetLedger {
    struct Entry {
        double scale = 0.0;
        uint64_t patches = 0;
        uint64_t backend_pixels = 0;
        uint64_t ecn_pixels = 0;
        uint64_t slack_pixels = 0;  // processed pixels falling outside the host raster
    };

    std::vector<Entry> per_scale;
    uint64_t original_pixels = 0;
    double backend_flops_per_pixel = 0.0;
    double ecn_flops_per_pixel = 0.0;

    void record(double scale, uint64_t patches, uint64_t backend_px, uint64_t ecn_px,
                uint64_t slack_px) {
        for (auto& e : per_scale) {
            if (e.scale == scale) {
                e.patches += patches;
                e.backend_pixels += backend_px;
                e.ecn_pixels += ecn_px;
                e.slack_pixels += slack_px;
                return;
            }
        }
        per_scale.push_back({scale, patches, backend_px, ecn_px, slack_px});
    }

    uint64_t total_backend_pixels() const {
        uint64_t t = 0;
        for (const auto& e : per_scale) t += e.backend_pixels;
        return t;
    }
    uint64_t total_ecn_pixels() const {
        uint64_t t = 0;
        for (const auto& e : per_scale) t += e.ecn_pixels;
        return t;
    }
    uint64_t total_slack_pixels() const {
        uint64_t t = 0;
        for (const auto& e : per_scale) t += e.slack_pixels;
        return t;
    }

    double ratio() const {
        if (original_pixels == 0) return 0.0;
        return static_cast<double>(total_backend_pixels()) / static_cast<double>(original_pixels);
    }

    double backend_flops() const { return static_cast<double>(total_backend_pixels()) * backend_flops_per_pixel; }
    double ecn_flops() const { return static_cast<double>(total_ecn_pixels()) * ecn_flops_per_pixel; }
    double total_flops() const { return backend_flops() + ecn_flops(); }
};

}  // namespace sbss
