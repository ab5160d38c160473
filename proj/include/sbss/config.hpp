#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sbss/backend.hpp"
#include "sbss/common.hpp"
#include "sbss/ecm.hpp"
#include "sbss/evalx.hpp"
#include "sbss/pipeline.hpp"
#include "sbss/scheduler.hpp"
#include "sbss/trainer.hpp"

namespace sbss {

using json = nlohmann::json;

// --- scene corpus manifest -----------------------------------------------------

struct CorpusEntry {
    std::string id;
    std::string image_path;
    std::string labels_path;
};

struct CorpusManifest {
    int classes = 0;
    int height = 0;
    int width = 0;
    std::vector<CorpusEntry> entries;
    std::filesystem::path base_dir;
};

inline CorpusManifest read_corpus_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw NotFoundError("cannot open: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw CorruptInputError(path + ": " + e.what());
    }
    CorpusManifest m;
    m.base_dir = std::filesystem::path(path).parent_path();
    try {
        m.classes = j.at("classes").get<int>();
        m.height = j.value("height", 0);
        m.width = j.value("width", 0);
        for (const auto& e : j.at("scenes")) {
            m.entries.push_back(CorpusEntry{e.at("id").get<std::string>(),
                                            e.at("image").get<std::string>(),
                                            e.at("labels").get<std::string>()});
        }
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return m;
}

inline std::string resolve_path(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_relative() ? (base / fp).string() : p;
}

inline SceneSet load_scene_set(const CorpusManifest& m) {
    SceneSet set;
    set.classes = m.classes;
    set.scenes.reserve(m.entries.size());
    for (const auto& e : m.entries) {
        Scene s;
        s.id = e.id;
        s.image = read_ppm(resolve_path(m.base_dir, e.image_path));
        s.labels = read_pgm(resolve_path(m.base_dir, e.labels_path));
        if (s.labels.height != s.image.height || s.labels.width != s.image.width)
            throw CorruptInputError(e.id + ": image and label dims differ");
        set.scenes.push_back(std::move(s));
    }
    return set;
}

// --- synthetic generator configuration -------------------------------------------

struct SynthSpec {
    int classes = 0;
    int count = 10;
    int height = 64;
    int width = 64;
    uint64_t seed = 0;
    SceneProfile profile;
};

inline SynthSpec parse_synth_spec(const json& j, const std::string& what) {
    SynthSpec s;
    try {
        s.count = j.value("count", 10);
        s.height = j.at("height").get<int>();
        s.width = j.at("width").get<int>();
        s.seed = j.value("seed", 0ull);
        for (const auto& c : j.at("profile")) {
            SceneProfile::ClassSpec spec;
            spec.area_fraction = c.at("area_fraction").get<double>();
            spec.object_size = c.at("object_size").get<double>();
            s.profile.classes.push_back(spec);
        }
        s.classes = static_cast<int>(s.profile.classes.size());
    } catch (const json::exception& e) {
        throw ConfigError(what + ": " + e.what());
    }
    s.profile.validate();
    return s;
}

// --- run specification --------------------------------------------------------------

struct RunSpec {
    std::string scheme = "custom";  // ecs_ms | ecs_ss | ms | ss | custom
    std::vector<double> scales;
    std::vector<Fraction> fractions;
    int patch_h = 0;
    int patch_w = 0;
    FusionMode mode = FusionMode::act_only;

    std::string backend_kind = "oracle";  // oracle | file
    double flops_per_pixel = 891000.0;
    OracleConfig oracle;
    std::string maps_manifest;  // file backend

    std::string corpus;  // scene manifest path
    std::vector<std::string> weight_paths;
    TrainConfig train;
    uint64_t seed = 0;
    std::string out_dir = "out";
};

inline FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "act_only") return FusionMode::act_only;
    if (s == "ecn_only") return FusionMode::ecn_only;
    if (s == "ecn_act") return FusionMode::ecn_act;
    throw ConfigError("unknown fusion mode '" + s + "'");
}

inline Fraction parse_fraction(const json& v, const std::string& what) {
    if (v.is_string()) {
        std::string s = v.get<std::string>();
        auto slash = s.find('/');
        if (slash == std::string::npos) return Fraction::from_double(std::stod(s));
        int64_t num = std::stoll(s.substr(0, slash));
        int64_t den = std::stoll(s.substr(slash + 1));
        if (den <= 0 || num < 0 || num > den) throw ConfigError(what + ": fraction outside [0,1]");
        return Fraction{num, den};
    }
    if (v.is_number()) return Fraction::from_double(v.get<double>());
    throw ConfigError(what + ": fractions must be numbers or \"a/b\" strings");
}

inline RunSpec parse_run_spec(const json& j, const std::string& what) {
    RunSpec r;
    try {
        r.scheme = j.value("scheme", "custom");
        if (j.contains("patch")) {
            r.patch_h = j.at("patch")[0].get<int>();
            r.patch_w = j.at("patch")[1].get<int>();
        }
        if (j.contains("scales"))
            for (const auto& s : j.at("scales")) r.scales.push_back(s.get<double>());
        if (j.contains("fractions"))
            for (const auto& f : j.at("fractions")) r.fractions.push_back(parse_fraction(f, what));
        if (j.contains("mode")) r.mode = parse_fusion_mode(j.at("mode").get<std::string>());
        r.corpus = j.value("corpus", "");
        r.seed = j.value("seed", 0ull);
        r.out_dir = j.value("out", "out");

        if (j.contains("backend")) {
            const json& b = j.at("backend");
            r.backend_kind = b.value("kind", "oracle");
            r.flops_per_pixel = b.value("flops_per_pixel", 891000.0);
            if (r.backend_kind == "file") {
                r.maps_manifest = b.at("manifest").get<std::string>();
            } else if (r.backend_kind == "oracle") {
                const json& o = b.at("oracle");
                for (const auto& s : o.at("preferred_scales"))
                    r.oracle.preferred_scales.push_back(s.get<double>());
                r.oracle.classes = static_cast<int>(r.oracle.preferred_scales.size());
                r.oracle.e_min = o.value("e_min", 0.05);
                r.oracle.e_max = o.value("e_max", 0.5);
                r.oracle.gain = o.value("gain", 0.15);
                r.oracle.sharpness = o.value("sharpness", 0.9);
                r.oracle.corrupt_sharpness = o.value("corrupt_sharpness", 0.75);
                r.oracle.error_correlation = o.value("error_correlation", 0.0);
                r.oracle.seed = o.value("seed", 0ull);
            } else {
                throw ConfigError(what + ": unknown backend kind '" + r.backend_kind + "'");
            }
        }
        if (j.contains("weights"))
            for (const auto& w : j.at("weights")) r.weight_paths.push_back(w.get<std::string>());
        if (j.contains("train")) {
            const json& t = j.at("train");
            r.train.iterations = t.value("iterations", 1000);
            r.train.batch = t.value("batch", 16);
            r.train.lr = t.value("lr", 0.001);
            r.train.momentum = t.value("momentum", 0.9);
            r.train.weight_decay = t.value("weight_decay", 0.0005);
            r.train.poly_power = t.value("poly_power", 0.9);
            r.train.seed = t.value("seed", r.seed);
            r.train.flip = t.value("flip", true);
            if (t.contains("crop")) {
                r.train.crop_h = t.at("crop")[0].get<int>();
                r.train.crop_w = t.at("crop")[1].get<int>();
            }
        } else {
            r.train.seed = r.seed;
        }
    } catch (const json::exception& e) {
        throw ConfigError(what + ": " + e.what());
    }
    return r;
}

inline RunSpec read_run_spec(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw NotFoundError("cannot open: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw CorruptInputError(path + ": " + e.what());
    }
    return parse_run_spec(j, path);
}

// Resolve the schedule described by a spec; presets fill scales/fractions.
inline ScaleSchedule spec_schedule(const RunSpec& r) {
    if (r.patch_h < 1 || r.patch_w < 1) throw ConfigError("run spec: missing or empty patch dims");
    ScaleSchedule s;
    if (r.scheme == "ecs_ms") {
        s = make_ecs_ms(r.patch_h, r.patch_w);
    } else if (r.scheme == "ecs_ss") {
        s = make_ecs_ss(r.patch_h, r.patch_w);
    } else if (r.scheme == "ms") {
        s = make_baseline_ms(r.patch_h, r.patch_w);
    } else if (r.scheme == "ss") {
        s = make_baseline_ss(r.patch_h, r.patch_w);
    } else if (r.scheme == "custom") {
        s.scales = r.scales;
        s.fractions = r.fractions;
        if (s.fractions.empty()) s.fractions.assign(s.scales.size(), Fraction::one());
        s.patch_h = r.patch_h;
        s.patch_w = r.patch_w;
        s.tag = SchemeTag::custom;
    } else {
        throw ConfigError("run spec: unknown scheme '" + r.scheme + "'");
    }
    try {
        s.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("run spec: ") + e.what());
    }
    return s;
}

// Build the backend named by a spec. Oracle backends need the scene corpus for
// their ground truth.
inline std::shared_ptr<const Backend> spec_backend(const RunSpec& r,
                                                   std::shared_ptr<const SceneSet> scenes,
                                                   const std::filesystem::path& base_dir) {
    if (r.backend_kind == "file")
        return std::make_shared<FileBackend>(resolve_path(base_dir, r.maps_manifest),
                                             r.flops_per_pixel);
    OracleConfig cfg = r.oracle;
    if (!scenes) throw ConfigError("oracle backend requires a scene corpus");
    if (cfg.classes != scenes->classes)
        throw ConfigError("oracle backend: preferred_scales length (" +
                          std::to_string(cfg.classes) + ") does not match corpus classes (" +
                          std::to_string(scenes->classes) + ")");
    return std::make_shared<OracleBackend>(cfg, std::move(scenes), r.flops_per_pixel);
}

// --- reports ---------------------------------------------------------------------

inline json ledger_json(const BudgetLedger& l) {
    json per = json::array();
    for (const auto& e : l.per_scale) {
        per.push_back({{"scale", e.scale},
                       {"patches", e.patches},
                       {"backend_pixels", e.backend_pixels},
                       {"ecn_pixels", e.ecn_pixels},
                       {"slack_pixels", e.slack_pixels}});
    }
    return json{{"original_pixels", l.original_pixels},
                {"per_scale", per},
                {"processed_ratio", l.ratio()},
                {"slack_pixels", l.total_slack_pixels()},
                {"backend_flops", l.backend_flops()},
                {"ecn_flops", l.ecn_flops()},
                {"total_flops", l.total_flops()}};
}

inline json diagnostics_json(const std::vector<TransitionDiag>& diags) {
    json out = json::array();
    for (const auto& d : diags) {
        json patches = json::array();
        for (const auto& p : d.patches)
            patches.push_back({{"rect", {p.rect.x, p.rect.y, p.rect.w, p.rect.h}},
                               {"replaced_fraction", p.replaced_fraction}});
        out.push_back({{"scale", d.scale},
                       {"selected_patches", d.selected_patches},
                       {"total_patches", d.total_patches},
                       {"patches", patches}});
    }
    return out;
}

inline json iou_json(const IouReport& rep) {
    json per = json::array();
    for (size_t c = 0; c < rep.per_class.size(); ++c)
        per.push_back(rep.valid[c] ? json(rep.per_class[c]) : json(nullptr));
    return json{{"per_class_iou", per}, {"miou", rep.mean}};
}

inline void write_json_file(const std::string& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << j.dump(2) << "\n";
}

}  // namespace sbss
