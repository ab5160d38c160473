#pragma once

#include <bit>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "sbss/common.hpp"
#include "sbss/grid.hpp"
#include "sbss/io.hpp"

namespace sbss {

// --- synthetic oracle configuration -------------------------------------------

struct OracleConfig {
    int classes = 2;
    std::vector<double> preferred_scales;  // one per class, positive
    double e_min = 0.05;
    double e_max = 0.5;
    double gain = 0.15;
    double sharpness = 0.9;          // correct-pixel winner mass
    double corrupt_sharpness = 0.75;  // corrupted-pixel winner mass (1 - epsilon)
    // Fraction of pixels whose corruption is driven by a scale-independent
    // latent difficulty instead of per-scale noise. Marginal error rates stay
    // e(c, s) exactly; the latent couples errors across scales the way hard
    // pixels stay hard for a real network.
    double error_correlation = 0.0;
    uint64_t seed = 0;

    void validate() const {
        if (classes < 2) throw std::invalid_argument("oracle: classes must be >= 2");
        if (preferred_scales.size() != static_cast<size_t>(classes))
            throw std::invalid_argument("oracle: need one preferred scale per class");
        for (double s : preferred_scales)
            if (!(s > 0.0)) throw std::invalid_argument("oracle: preferred scales must be positive");
        if (!(e_min >= 0.0 && e_min < 1.0)) throw std::invalid_argument("oracle: e_min outside [0,1)");
        if (!(e_max > e_min && e_max <= 1.0))
            throw std::invalid_argument("oracle: e_max outside (e_min,1]");
        if (!(gain >= 0.0)) throw std::invalid_argument("oracle: gain must be >= 0");
        if (!(sharpness > 1.0 / classes && sharpness <= 1.0))
            throw std::invalid_argument("oracle: sharpness must lie in (1/classes, 1]");
        if (!(corrupt_sharpness > 1.0 / classes && corrupt_sharpness <= 1.0))
            throw std::invalid_argument("oracle: corrupt_sharpness must lie in (1/classes, 1]");
        if (!(error_correlation >= 0.0 && error_correlation <= 1.0))
            throw std::invalid_argument("oracle: error_correlation outside [0,1]");
    }
};

// Error law: quadratic in log2-scale distance from the class's preferred scale,
// capped at e_max.
inline double oracle_error_rate(const OracleConfig& cfg, int cls, double scale) {
    if (cls < 0 || cls >= cfg.classes) throw std::invalid_argument("oracle_error_rate: bad class");
    if (!(scale > 0.0)) throw std::invalid_argument("oracle_error_rate: bad scale");
    double d = std::log2(scale) - std::log2(cfg.preferred_scales[cls]);
    return std::min(cfg.e_max, cfg.e_min + cfg.gain * d * d);
}

// --- synthetic scenes ----------------------------------------------------------

struct SceneProfile {
    struct ClassSpec {
        double area_fraction = 0.0;
        double object_size = 0.1;  // mean object diameter as a fraction of min(h, w)
    };
    std::vector<ClassSpec> classes;

    void validate() const {
        if (classes.size() < 2) throw std::invalid_argument("scene profile: need >= 2 classes");
        double sum = 0.0;
        for (const auto& c : classes) {
            if (!(c.area_fraction > 0.0)) throw std::invalid_argument("scene profile: fractions must be > 0");
            if (!(c.object_size > 0.0 && c.object_size <= 1.0))
                throw std::invalid_argument("scene profile: object size outside (0,1]");
            sum += c.area_fraction;
        }
        if (std::abs(sum - 1.0) > 1e-6)
            throw std::invalid_argument("scene profile: area fractions must sum to 1");
    }
};

struct Scene {
    std::string id;
    RgbImage image;
    LabelMap labels;
};

struct SceneSet {
    int classes = 0;
    SceneProfile profile;
    std::vector<Scene> scenes;
};

namespace detail {

inline void class_color(int cls, uint8_t rgb[3]) {
    static const uint8_t palette[][3] = {
        {52, 52, 52},   {214, 80, 60},  {66, 148, 224}, {84, 196, 110},
        {232, 196, 74}, {156, 88, 196}, {236, 140, 52}, {88, 212, 212},
        {190, 190, 190}, {120, 70, 40}, {40, 110, 70},  {200, 120, 160},
    };
    const int n = sizeof(palette) / sizeof(palette[0]);
    for (int i = 0; i < 3; ++i) rgb[i] = palette[cls % n][i];
}

}  // namespace detail

// Quota-driven painter: repeatedly drops a rectangle or ellipse of the class
// with the largest remaining area deficit, shrinking shapes as quotas close.
inline SceneSet generate_scenes(const SceneProfile& profile, int count, int height, int width,
                                uint64_t seed) {
    profile.validate();
    if (profile.classes.size() < 2) throw std::invalid_argument("generate_scenes: C < 2");
    if (count < 1 || height < 4 || width < 4)
        throw std::invalid_argument("generate_scenes: bad count or dims");
    const int classes = static_cast<int>(profile.classes.size());
    const double total_px = static_cast<double>(height) * width;

    SceneSet set;
    set.classes = classes;
    set.profile = profile;
    set.scenes.reserve(count);

    for (int s = 0; s < count; ++s) {
        std::mt19937_64 rng(mix64(seed, static_cast<uint64_t>(s) + 1));
        std::uniform_real_distribution<double> unit(0.0, 1.0);

        LabelMap labels(height, width, 0);
        std::vector<int64_t> pixel_count(classes, 0);
        pixel_count[0] = static_cast<int64_t>(total_px);
        std::vector<double> target(classes);
        for (int c = 0; c < classes; ++c) target[c] = profile.classes[c].area_fraction * total_px;

        const double tol = std::max(4.0, 0.004 * total_px);
        for (int iter = 0; iter < 3000; ++iter) {
            int cls = -1;
            double worst = tol;
            for (int c = 0; c < classes; ++c) {
                double deficit = target[c] - static_cast<double>(pixel_count[c]);
                if (deficit > worst) {
                    worst = deficit;
                    cls = c;
                }
            }
            if (cls < 0) break;

            double base = profile.classes[cls].object_size * std::min(height, width);
            double sw = base * (0.6 + 0.8 * unit(rng));
            double sh = base * (0.6 + 0.8 * unit(rng));
            // shrink toward the remaining quota so the last shapes land gently
            double deficit = target[cls] - static_cast<double>(pixel_count[cls]);
            if (sw * sh > deficit * 1.3) {
                double k = std::sqrt(deficit * 1.3 / (sw * sh));
                sw *= k;
                sh *= k;
            }
            int iw = std::max(2, static_cast<int>(std::lround(sw)));
            int ih = std::max(2, static_cast<int>(std::lround(sh)));
            iw = std::min(iw, width);
            ih = std::min(ih, height);
            int x0 = static_cast<int>(unit(rng) * (width - iw + 1));
            int y0 = static_cast<int>(unit(rng) * (height - ih + 1));
            bool ellipse = (rng() & 1) != 0;

            double cx = x0 + (iw - 1) * 0.5, cy = y0 + (ih - 1) * 0.5;
            double ax = std::max(0.5, iw * 0.5), ay = std::max(0.5, ih * 0.5);
            for (int y = y0; y < y0 + ih; ++y)
                for (int x = x0; x < x0 + iw; ++x) {
                    if (ellipse) {
                        double dx = (x - cx) / ax, dy = (y - cy) / ay;
                        if (dx * dx + dy * dy > 1.0) continue;
                    }
                    uint8_t& cell = labels.at(y, x);
                    if (cell != cls) {
                        --pixel_count[cell];
                        ++pixel_count[cls];
                        cell = static_cast<uint8_t>(cls);
                    }
                }
        }

        RgbImage image(height, width);
        uint64_t img_stream = mix64(mix64(seed, static_cast<uint64_t>(s) + 1), 0x10a6eull);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                uint8_t rgb[3];
                detail::class_color(labels.at(y, x), rgb);
                uint64_t key = (static_cast<uint64_t>(y) << 32) | static_cast<uint64_t>(x);
                uint64_t word = mix64(img_stream, key);
                for (int c = 0; c < 3; ++c) {
                    int noise = static_cast<int>((word >> (c * 8)) & 0x1f) - 15;
                    image.at(y, x, c) = static_cast<uint8_t>(std::clamp(rgb[c] + noise, 0, 255));
                }
            }

        char id[32];
        std::snprintf(id, sizeof(id), "scene_%04d", s);
        set.scenes.push_back(Scene{id, std::move(image), std::move(labels)});
    }
    return set;
}

// --- backends -------------------------------------------------------------------

// Identifies the patch a segmentation request refers to. The rect lives in the
// (possibly padded) raster of the requested scale.
struct PatchContext {
    std::string image_id;
    Rect rect;
};

class Backend {
public:
    virtual ~Backend() = default;

    // Returns a ProbMap with the patch's dims. Must be deterministic in its
    // arguments and safe to call from multiple threads.
    virtual ProbMap segment(const RgbImage& patch, double scale, const PatchContext& ctx) const = 0;

    virtual int classes() const = 0;
    virtual double flops_per_pixel() const = 0;
};

// Scale-biased synthetic oracle: corrupts ground truth with per-class,
// per-scale error rates. Noise is keyed by (seed, image, scale, absolute pixel)
// so outputs are independent of tiling and scheduling.
class OracleBackend : public Backend {
public:
    OracleBackend(OracleConfig cfg, std::shared_ptr<const SceneSet> scenes,
                  double flops_per_pixel = 891000.0)
        : cfg_(std::move(cfg)), scenes_(std::move(scenes)), flops_per_pixel_(flops_per_pixel) {
        cfg_.validate();
        if (!(flops_per_pixel_ > 0.0))
            throw std::invalid_argument("backend: flops_per_pixel must be > 0");
        if (!scenes_) throw std::invalid_argument("oracle backend: no scenes");
        for (size_t i = 0; i < scenes_->scenes.size(); ++i) index_[scenes_->scenes[i].id] = i;
    }

    ProbMap segment(const RgbImage& patch, double scale, const PatchContext& ctx) const override {
        if (patch.height != ctx.rect.h || patch.width != ctx.rect.w)
            throw std::invalid_argument("oracle: patch dims do not match rect");
        auto it = index_.find(ctx.image_id);
        if (it == index_.end())
            throw NotFoundError("oracle: unknown image id '" + ctx.image_id + "'");
        const Scene& scene = scenes_->scenes[it->second];
        int h_s = round_px(scale * scene.labels.height);
        int w_s = round_px(scale * scene.labels.width);
        const LabelMap& gt_s = scaled_gt(it->second, h_s, w_s);

        std::vector<double> err(cfg_.classes);
        for (int c = 0; c < cfg_.classes; ++c) err[c] = oracle_error_rate(cfg_, c, scale);

        uint64_t pix_stream = mix64(cfg_.seed, hash_str(ctx.image_id));  // scale-independent
        uint64_t scale_stream = mix64(pix_stream, std::bit_cast<uint64_t>(scale));
        const int C = cfg_.classes;
        const float win_ok = static_cast<float>(cfg_.sharpness);
        const float rest_ok = static_cast<float>((1.0 - cfg_.sharpness) / (C - 1));
        const float win_bad = static_cast<float>(cfg_.corrupt_sharpness);
        const float rest_bad = static_cast<float>((1.0 - cfg_.corrupt_sharpness) / (C - 1));
        const double rho = cfg_.error_correlation;

        // maps from the scaled grid back to original pixels, same convention as
        // resize_labels: carries the latent difficulty across scales
        auto ty = detail::nearest_taps(scene.labels.height, h_s);
        auto tx = detail::nearest_taps(scene.labels.width, w_s);

        ProbMap out(C, ctx.rect.h, ctx.rect.w);
        size_t n = out.pixel_count();
        for (int y = 0; y < ctx.rect.h; ++y)
            for (int x = 0; x < ctx.rect.w; ++x) {
                int fy = detail::reflect_index(ctx.rect.y + y, h_s);
                int fx = detail::reflect_index(ctx.rect.x + x, w_s);
                uint8_t gt = gt_s.at(fy, fx);
                size_t p = static_cast<size_t>(y) * ctx.rect.w + x;
                if (gt == LabelMap::kIgnore) {
                    for (int c = 0; c < C; ++c) out.values[static_cast<size_t>(c) * n + p] = 1.f / C;
                    continue;
                }
                uint64_t okey = (static_cast<uint64_t>(ty[fy]) << 32) | static_cast<uint64_t>(tx[fx]);
                int winner = gt;
                float win = win_ok, rest = rest_ok;
                bool corrupted;
                uint64_t wrong_word;
                if (rho > 0.0 && unit_double(mix64(pix_stream, okey * 3 + 1)) < rho) {
                    // latent-difficulty pixel: one draw reused at every scale
                    corrupted = unit_double(mix64(pix_stream, okey * 3 + 2)) < err[gt];
                    wrong_word = mix64(pix_stream, okey * 3);
                } else {
                    uint64_t skey = (static_cast<uint64_t>(fy) << 32) | static_cast<uint64_t>(fx);
                    uint64_t w1 = mix64(scale_stream, skey);
                    corrupted = unit_double(w1) < err[gt];
                    wrong_word = splitmix64(w1 ^ 0xd1b54a32d192ed03ull);
                }
                if (corrupted) {
                    int wrong = static_cast<int>(unit_double(wrong_word) * (C - 1));
                    if (wrong >= C - 1) wrong = C - 2;
                    winner = wrong >= gt ? wrong + 1 : wrong;
                    win = win_bad;
                    rest = rest_bad;
                }
                for (int c = 0; c < C; ++c)
                    out.values[static_cast<size_t>(c) * n + p] = (c == winner) ? win : rest;
            }
        return out;
    }

    int classes() const override { return cfg_.classes; }
    double flops_per_pixel() const override { return flops_per_pixel_; }
    const OracleConfig& config() const { return cfg_; }
    const SceneSet& scenes() const { return *scenes_; }

private:
    const LabelMap& scaled_gt(size_t scene_idx, int h, int w) const {
        std::lock_guard<std::mutex> lock(mu_);
        auto key = std::make_tuple(scene_idx, h, w);
        auto it = gt_cache_.find(key);
        if (it == gt_cache_.end())
            it = gt_cache_.emplace(key, resize_labels(scenes_->scenes[scene_idx].labels, h, w)).first;
        return it->second;
    }

    OracleConfig cfg_;
    std::shared_ptr<const SceneSet> scenes_;
    double flops_per_pixel_;
    std::unordered_map<std::string, size_t> index_;
    mutable std::mutex mu_;
    mutable std::map<std::tuple<size_t, int, int>, LabelMap> gt_cache_;
};

// Serves precomputed maps stored as .tns files, keyed by (image id, scale, rect).
class FileBackend : public Backend {
public:
    FileBackend(const std::string& manifest_path, double flops_per_pixel = 891000.0)
        : flops_per_pixel_(flops_per_pixel) {
        if (!(flops_per_pixel_ > 0.0))
            throw std::invalid_argument("backend: flops_per_pixel must be > 0");
        std::ifstream is(manifest_path);
        if (!is) throw NotFoundError("cannot open: " + manifest_path);
        nlohmann::json j;
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            throw CorruptInputError(manifest_path + ": " + e.what());
        }
        base_dir_ = std::filesystem::path(manifest_path).parent_path();
        const nlohmann::json& records = j.is_array() ? j : j.at("records");
        if (j.is_object() && j.contains("classes")) classes_ = j["classes"].get<int>();
        for (const auto& r : records) {
            Rect rect{r.at("rect")[0].get<int>(), r.at("rect")[1].get<int>(),
                      r.at("rect")[2].get<int>(), r.at("rect")[3].get<int>()};
            records_[key(r.at("image_id").get<std::string>(), r.at("scale").get<double>(), rect)] =
                r.at("path").get<std::string>();
        }
    }

    ProbMap segment(const RgbImage& patch, double scale, const PatchContext& ctx) const override {
        auto it = records_.find(key(ctx.image_id, scale, ctx.rect));
        if (it == records_.end()) {
            char buf[160];
            std::snprintf(buf, sizeof(buf),
                          "file backend: no stored map for (image_id=%s, scale=%g, rect=[%d,%d,%d,%d])",
                          ctx.image_id.c_str(), scale, ctx.rect.x, ctx.rect.y, ctx.rect.w,
                          ctx.rect.h);
            throw NotFoundError(buf);
        }
        std::filesystem::path p(it->second);
        if (p.is_relative()) p = base_dir_ / p;
        ProbMap m = load(p.string());
        if (m.height != patch.height || m.width != patch.width || m.height != ctx.rect.h ||
            m.width != ctx.rect.w)
            throw CorruptInputError(p.string() + ": stored map dims do not match the requested patch");
        return m;
    }

    int classes() const override { return classes_; }
    double flops_per_pixel() const override { return flops_per_pixel_; }

private:
    static std::string key(const std::string& id, double scale, const Rect& r) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "\x1f%016llx\x1f%d,%d,%d,%d",
                      static_cast<unsigned long long>(std::bit_cast<uint64_t>(scale)), r.x, r.y, r.w,
                      r.h);
        return id + buf;
    }

    ProbMap load(const std::string& path) const {
        {
            std::lock_guard<std::mutex> lock(mu_);
            auto it = cache_.find(path);
            if (it != cache_.end()) return it->second;
        }
        ProbMap m = tns_to_probmap(read_tns_file(path), path);
        std::lock_guard<std::mutex> lock(mu_);
        if (classes_ == 0) classes_ = m.channels;
        return cache_.emplace(path, std::move(m)).first->second;
    }

    double flops_per_pixel_;
    std::filesystem::path base_dir_;
    std::unordered_map<std::string, std::string> records_;
    mutable int classes_ = 0;
    mutable std::mutex mu_;
    mutable std::unordered_map<std::string, ProbMap> cache_;
};

// --- tiled inference -------------------------------------------------------------

struct TiledResult {
    ProbMap map;  // cropped back to the host dims
    uint64_t patches = 0;
    uint64_t processed_pixels = 0;
    uint64_t slack_pixels = 0;
};

// Full-coverage segmentation of one raster: tile, segment each patch, paste,
// crop back. Patch jobs are independent, so any worker count gives identical bytes.
inline TiledResult tiled_segment(const Backend& backend, const RgbImage& image, double scale,
                                 const std::string& image_id, int patch_h, int patch_w,
                                 int workers = 1) {
    PatchGrid grid = make_patch_grid(image.height, image.width, patch_h, patch_w);
    ProbMap padded(backend.classes(), grid.padded_h, grid.padded_w);
    parallel_for(static_cast<int64_t>(grid.patches.size()), workers, [&](int64_t i) {
        const Rect& r = grid.patches[static_cast<size_t>(i)];
        RgbImage patch = crop_reflected(image, r);
        ProbMap pm = backend.segment(patch, scale, PatchContext{image_id, r});
        if (pm.height != r.h || pm.width != r.w || pm.channels != padded.channels)
            throw CorruptInputError("backend returned a map with unexpected dims");
        paste(padded, pm, r);  // rects are disjoint, writes do not overlap
    });
    TiledResult out;
    out.patches = grid.patches.size();
    out.processed_pixels = static_cast<uint64_t>(grid.patches.size()) *
                           static_cast<uint64_t>(patch_h) * static_cast<uint64_t>(patch_w);
    out.slack_pixels = out.processed_pixels - static_cast<uint64_t>(image.height) * image.width;
    out.map = (grid.padded_h == image.height && grid.padded_w == image.width)
                  ? std::move(padded)
                  : crop(padded, Rect{0, 0, image.width, image.height});
    return out;
}

}  // namespace sbss
