#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sbss/backend.hpp"
#include "sbss/common.hpp"
#include "sbss/ecm.hpp"
#include "sbss/grid.hpp"
#include "sbss/scheduler.hpp"

namespace sbss {

struct RunConfig {
    ScaleSchedule schedule;
    FusionMode mode = FusionMode::act_only;
    std::shared_ptr<const Backend> backend;
    std::vector<EcnWeights> weights;  // one per transition for ECN modes
    int workers = 1;

    void validate() const {
        schedule.validate();
        if (!backend) throw ConfigError("run config: no backend");
        if (mode != FusionMode::act_only) {
            if (weights.size() != schedule.transition_count())
                throw ConfigError("run config: ECN modes need one weight set per transition");
            for (const auto& w : weights)
                if (w.classes != backend->classes())
                    throw ConfigError("run config: weight class count does not match the backend");
        }
    }
};

struct PatchDiag {
    Rect rect;
    double replaced_fraction = 0.0;
};

struct TransitionDiag {
    double scale = 0.0;           // scale being corrected into
    size_t selected_patches = 0;
    size_t total_patches = 0;
    std::vector<PatchDiag> patches;
};

struct RunResult {
    ProbMap prob;      // original dims
    LabelMap labels;   // argmax of prob
    BudgetLedger ledger;
    std::vector<TransitionDiag> diagnostics;
};

namespace pipeline_detail {

inline uint64_t host_overlap(const Rect& r, int host_h, int host_w) {
    int y1 = std::min(r.y + r.h, host_h), x1 = std::min(r.x + r.w, host_w);
    if (y1 <= r.y || x1 <= r.x) return 0;
    return static_cast<uint64_t>(y1 - r.y) * static_cast<uint64_t>(x1 - r.x);
}

}  // namespace pipeline_detail

// The refinement loop up to (and including) a given scale index; returns the
// working map at that scale's dims. run_sbss wraps this with the final resize;
// cascade-style training uses it to reproduce the pipeline state mid-run.
inline ProbMap sbss_refine(const RunConfig& cfg, const RgbImage& image,
                           const std::string& image_id, size_t last_scale_index,
                           BudgetLedger* ledger, std::vector<TransitionDiag>* diagnostics) {
    const Backend& backend = *cfg.backend;
    const ScaleSchedule& sched = cfg.schedule;
    const int H = image.height, W = image.width;
    const bool uses_ecn = cfg.mode != FusionMode::act_only;
    if (last_scale_index >= sched.scales.size())
        throw std::invalid_argument("sbss_refine: scale index out of range");

    // initial map at the smallest scale
    double s0 = sched.scales.front();
    RgbImage x0 = resize_image(image, round_px(s0 * H), round_px(s0 * W));
    TiledResult t0 = tiled_segment(backend, x0, s0, image_id, sched.patch_h, sched.patch_w,
                                   cfg.workers);
    if (ledger) ledger->record(s0, t0.patches, t0.processed_pixels, 0, t0.slack_pixels);
    ProbMap current = std::move(t0.map);

    for (size_t t = 0; t < last_scale_index; ++t) {
        double s_lo = sched.scales[t], s_hi = sched.scales[t + 1];
        int h_lo = current.height, w_lo = current.width;
        int h_hi = round_px(s_hi * H), w_hi = round_px(s_hi * W);

        ProbMap resized = resize_probmap(current, h_hi, w_hi);
        PatchGrid grid = make_patch_grid(h_hi, w_hi, sched.patch_h, sched.patch_w);
        ConfidenceMap conf = confidence_map(resized);
        std::vector<Rect> selected = select_patches(sched, t + 1, conf, grid);

        TransitionDiag diag;
        diag.scale = s_hi;
        diag.selected_patches = selected.size();
        diag.total_patches = grid.patches.size();

        if (selected.empty()) {
            if (ledger) ledger->record(s_hi, 0, 0, 0, 0);
            if (diagnostics) diagnostics->push_back(std::move(diag));
            current = std::move(resized);
            continue;
        }

        RgbImage x_hi = resize_image(image, h_hi, w_hi);
        ProbMap padded = reflect_pad(resized, grid.padded_h, grid.padded_w);
        const EcnWeights* weights = uses_ecn ? &cfg.weights[t] : nullptr;

        diag.patches.resize(selected.size());
        parallel_for(static_cast<int64_t>(selected.size()), cfg.workers, [&](int64_t i) {
            const Rect& r = selected[static_cast<size_t>(i)];
            RgbImage patch = crop_reflected(x_hi, r);
            ProbMap upper = backend.segment(patch, s_hi, PatchContext{image_id, r});
            if (upper.height != r.h || upper.width != r.w || upper.channels != padded.channels)
                throw CorruptInputError("backend returned a map with unexpected dims (image " +
                                        image_id + ")");
            Rect r_lo = scale_rect_outward(r, s_hi, s_lo, h_lo, w_lo);
            ProbMap lower = resize_probmap(crop(current, r_lo), r.h, r.w);
            CorrectionResult corr = correct(cfg.mode, weights, lower, upper);
            paste(padded, corr.map, r);  // selected rects are disjoint
            diag.patches[static_cast<size_t>(i)] = PatchDiag{r, corr.replaced_fraction};
        });

        uint64_t patch_area = static_cast<uint64_t>(sched.patch_h) * sched.patch_w;
        uint64_t processed = selected.size() * patch_area;
        uint64_t covered = 0;
        for (const Rect& r : selected) covered += pipeline_detail::host_overlap(r, h_hi, w_hi);
        if (ledger)
            ledger->record(s_hi, selected.size(), processed, uses_ecn ? processed : 0,
                           processed - covered);
        if (diagnostics) diagnostics->push_back(std::move(diag));

        current = (grid.padded_h == h_hi && grid.padded_w == w_hi)
                      ? std::move(padded)
                      : crop(padded, Rect{0, 0, w_hi, h_hi});
    }
    return current;
}

// The iterative refinement loop: segment at the smallest scale, then for each
// transition resize the running map upward, pick low-confidence patches, and
// replace them with corrected segmentations.
inline RunResult run_sbss(const RunConfig& cfg, const RgbImage& image, const std::string& image_id) {
    cfg.validate();
    RunResult res;
    res.ledger.original_pixels = static_cast<uint64_t>(image.height) * image.width;
    res.ledger.backend_flops_per_pixel = cfg.backend->flops_per_pixel();
    res.ledger.ecn_flops_per_pixel =
        cfg.mode != FusionMode::act_only ? ecn_flops_per_pixel(cfg.backend->classes()) : 0.0;

    ProbMap last = sbss_refine(cfg, image, image_id, cfg.schedule.scales.size() - 1, &res.ledger,
                               &res.diagnostics);
    res.prob = resize_probmap(last, image.height, image.width);
    res.labels = argmax_labels(res.prob);
    return res;
}

// Multi-scale baseline: full tiled inference at every scale, average voting.
inline RunResult run_ms(const Backend& backend, const RgbImage& image, const std::string& image_id,
                        const std::vector<double>& scales, int patch_h, int patch_w,
                        int workers = 1) {
    if (scales.empty()) throw std::invalid_argument("run_ms: no scales");
    const int H = image.height, W = image.width;
    RunResult res;
    res.ledger.original_pixels = static_cast<uint64_t>(H) * W;
    res.ledger.backend_flops_per_pixel = backend.flops_per_pixel();

    std::vector<ProbMap> maps;
    maps.reserve(scales.size());
    for (double s : scales) {
        RgbImage xs = resize_image(image, round_px(s * H), round_px(s * W));
        TiledResult t = tiled_segment(backend, xs, s, image_id, patch_h, patch_w, workers);
        res.ledger.record(s, t.patches, t.processed_pixels, 0, t.slack_pixels);
        maps.push_back(std::move(t.map));
    }
    res.prob = ms_vote(maps, H, W);
    res.labels = argmax_labels(res.prob);
    return res;
}

// Single-scale baseline: the original resolution only.
inline RunResult run_ss(const Backend& backend, const RgbImage& image, const std::string& image_id,
                        int patch_h, int patch_w, int workers = 1) {
    return run_ms(backend, image, image_id, {1.0}, patch_h, patch_w, workers);
}

}  // namespace sbss
