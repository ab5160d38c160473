// Command-line front end: synthetic data generation, ECN training, inference
// under the budgeted schemes, evaluation, scale profiling, and budget tables.

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "sbss/config.hpp"
#include "sbss/evalx.hpp"
#include "sbss/pipeline.hpp"
#include "sbss/trainer.hpp"

namespace fs = std::filesystem;
using namespace sbss;

namespace {

void log_line(int level, const std::string& msg) {
    if (log_level() >= level) std::cerr << "[sbss] " << msg << "\n";
}

json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw NotFoundError("cannot open: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw CorruptInputError(path + ": " + e.what());
    }
    return j;
}

struct CommonOpts {
    std::string config;
    std::optional<uint64_t> seed;
    std::optional<std::string> out;
    int workers = static_cast<int>(std::thread::hardware_concurrency());
};

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required = true) {
    auto* c = cmd->add_option("--config", o.config, "JSON configuration file");
    if (config_required) c->required();
    cmd->add_option("--seed", o.seed, "override every seed in the config");
    cmd->add_option("--out", o.out, "override the output directory");
    cmd->add_option("--workers", o.workers, "worker threads for patch-level work");
}

RunSpec load_spec(const CommonOpts& o) {
    RunSpec spec = read_run_spec(o.config);
    if (o.seed) {
        spec.seed = *o.seed;
        spec.oracle.seed = *o.seed;
        spec.train.seed = *o.seed;
    }
    if (o.out) spec.out_dir = *o.out;
    return spec;
}

struct LoadedCorpus {
    std::shared_ptr<const SceneSet> scenes;
    std::shared_ptr<const Backend> backend;
};

LoadedCorpus load_corpus_and_backend(const RunSpec& spec, const std::string& config_path) {
    fs::path base = fs::path(config_path).parent_path();
    LoadedCorpus out;
    if (!spec.corpus.empty()) {
        auto manifest = read_corpus_manifest(resolve_path(base, spec.corpus));
        out.scenes = std::make_shared<SceneSet>(load_scene_set(manifest));
    }
    out.backend = spec_backend(spec, out.scenes, base);
    return out;
}

std::vector<EcnWeights> load_weights(const RunSpec& spec, const ScaleSchedule& sched,
                                     const std::string& config_path) {
    if (spec.mode == FusionMode::act_only) return {};
    std::vector<std::string> paths = spec.weight_paths;
    fs::path base = fs::path(config_path).parent_path();
    if (paths.empty()) {
        for (size_t t = 0; t < sched.transition_count(); ++t)
            paths.push_back((fs::path(spec.out_dir) / ("ecn_t" + std::to_string(t) + ".ecw")).string());
    }
    if (paths.size() != sched.transition_count())
        throw ConfigError("run spec: expected " + std::to_string(sched.transition_count()) +
                          " weight files, got " + std::to_string(paths.size()));
    std::vector<EcnWeights> out;
    for (const auto& p : paths) out.push_back(read_ecw(resolve_path(base, p)));
    return out;
}

int cmd_synth(const CommonOpts& o) {
    json j = read_json_file(o.config);
    SynthSpec spec = parse_synth_spec(j, o.config);
    if (o.seed) spec.seed = *o.seed;
    std::string out_dir = o.out.value_or(j.value("out", "scenes"));
    fs::create_directories(out_dir);

    SceneSet set = generate_scenes(spec.profile, spec.count, spec.height, spec.width, spec.seed);
    json manifest;
    manifest["classes"] = spec.classes;
    manifest["height"] = spec.height;
    manifest["width"] = spec.width;
    manifest["seed"] = spec.seed;
    json profile = json::array();
    for (const auto& c : spec.profile.classes)
        profile.push_back({{"area_fraction", c.area_fraction}, {"object_size", c.object_size}});
    manifest["profile"] = profile;
    json scenes = json::array();
    for (const auto& s : set.scenes) {
        std::string img = s.id + ".ppm", gt = s.id + "_gt.pgm";
        write_ppm((fs::path(out_dir) / img).string(), s.image);
        write_pgm((fs::path(out_dir) / gt).string(), s.labels);
        scenes.push_back({{"id", s.id}, {"image", img}, {"labels", gt}});
    }
    manifest["scenes"] = scenes;
    write_json_file((fs::path(out_dir) / "manifest.json").string(), manifest);
    std::cout << "wrote " << set.scenes.size() << " scenes to " << out_dir << "\n";
    return 0;
}

int cmd_train_ecn(const CommonOpts& o) {
    RunSpec spec = load_spec(o);
    ScaleSchedule sched = spec_schedule(spec);
    auto corpus = load_corpus_and_backend(spec, o.config);
    if (!corpus.scenes) throw ConfigError("train-ecn: config needs a scene corpus");
    fs::create_directories(spec.out_dir);

    // transitions are trained in order so each one sees the corrected state
    // produced by its predecessors
    CascadePrefix cascade;
    cascade.mode = spec.mode == FusionMode::act_only ? FusionMode::ecn_act : spec.mode;
    for (size_t t = 0; t < sched.transition_count(); ++t) {
        log_line(1, "building training set for transition " + std::to_string(t));
        auto samples =
            build_training_set(*corpus.backend, *corpus.scenes, sched, t, o.workers, &cascade);
        TrainConfig tc = spec.train;
        tc.seed = mix64(spec.train.seed, t + 1);
        log_line(1, "training transition " + std::to_string(t) + " on " +
                        std::to_string(samples.size()) + " samples");
        TrainResult res = train(tc, samples, o.workers);

        std::string wpath = (fs::path(spec.out_dir) / ("ecn_t" + std::to_string(t) + ".ecw")).string();
        write_ecw(wpath, res.weights);
        cascade.trained.push_back(res.weights);
        std::string lpath =
            (fs::path(spec.out_dir) / ("train_log_t" + std::to_string(t) + ".txt")).string();
        std::ofstream log(lpath);
        for (const auto& e : res.log) {
            char line[96];
            std::snprintf(line, sizeof(line), "%d %.8f %.6f\n", e.iteration, e.lr, e.loss);
            log << line;
        }
        std::cout << "transition " << t << " (scale " << sched.scales[t] << " -> "
                  << sched.scales[t + 1] << "): final loss " << res.log.back().loss << ", weights "
                  << wpath << "\n";
    }
    return 0;
}

int cmd_infer(const CommonOpts& o) {
    RunSpec spec = load_spec(o);
    ScaleSchedule sched = spec_schedule(spec);
    auto corpus = load_corpus_and_backend(spec, o.config);
    if (!corpus.scenes) throw ConfigError("infer: config needs a scene corpus");
    fs::create_directories(spec.out_dir);

    RunConfig rc;
    rc.schedule = sched;
    rc.mode = spec.mode;
    rc.backend = corpus.backend;
    rc.workers = o.workers;
    bool baseline = sched.tag == SchemeTag::baseline_ms || sched.tag == SchemeTag::baseline_ss;
    if (!baseline) rc.weights = load_weights(spec, sched, o.config);

    for (const auto& scene : corpus.scenes->scenes) {
        log_line(1, "infer " + scene.id);
        RunResult res;
        if (sched.tag == SchemeTag::baseline_ms) {
            res = run_ms(*corpus.backend, scene.image, scene.id, sched.scales, sched.patch_h,
                         sched.patch_w, o.workers);
        } else if (sched.tag == SchemeTag::baseline_ss) {
            res = run_ss(*corpus.backend, scene.image, scene.id, sched.patch_h, sched.patch_w,
                         o.workers);
        } else {
            res = run_sbss(rc, scene.image, scene.id);
        }
        fs::path base = fs::path(spec.out_dir) / scene.id;
        write_pgm(base.string() + "_pred.pgm", res.labels);
        write_tns_file(base.string() + "_prob.tns", probmap_to_tns(res.prob));
        write_json_file(base.string() + "_ledger.json", ledger_json(res.ledger));
        write_json_file(base.string() + "_diag.json", diagnostics_json(res.diagnostics));
    }
    std::cout << "inference over " << corpus.scenes->scenes.size() << " scenes -> " << spec.out_dir
              << "\n";
    return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, int classes,
             const std::string& out_path) {
    std::vector<fs::path> preds;
    for (const auto& e : fs::directory_iterator(pred_dir))
        if (e.path().extension() == ".pgm") preds.push_back(e.path());
    std::sort(preds.begin(), preds.end());
    if (preds.empty()) throw NotFoundError("no .pgm predictions in " + pred_dir);

    ConfusionMatrix cm(classes);
    for (const auto& p : preds) {
        std::string stem = p.stem().string();
        std::vector<std::string> candidates{stem + ".pgm", stem + "_gt.pgm"};
        if (stem.size() > 5 && stem.ends_with("_pred")) {
            std::string id = stem.substr(0, stem.size() - 5);
            candidates.push_back(id + "_gt.pgm");
            candidates.push_back(id + ".pgm");
        }
        fs::path gt_path;
        for (const auto& c : candidates) {
            fs::path cand = fs::path(gt_dir) / c;
            if (fs::exists(cand)) {
                gt_path = cand;
                break;
            }
        }
        if (gt_path.empty())
            throw NotFoundError("no ground truth for " + p.string() + " (looked for " +
                                (fs::path(gt_dir) / candidates.back()).string() + ")");
        accumulate(cm, read_pgm(p.string()), read_pgm(gt_path.string()));
    }
    IouReport rep = miou(cm);

    write_json_file(out_path + ".json", iou_json(rep));
    std::ofstream csv(out_path + ".csv");
    csv << "class,iou\n";
    for (size_t c = 0; c < rep.per_class.size(); ++c) {
        if (rep.valid[c])
            csv << c << "," << rep.per_class[c] << "\n";
        else
            csv << c << ",\n";
    }
    csv << "mean," << rep.mean << "\n";
    std::printf("mIoU %.6f over %llu pixels\n", rep.mean,
                static_cast<unsigned long long>(cm.total()));
    return 0;
}

int cmd_profile(const CommonOpts& o, const std::vector<double>& scales) {
    RunSpec spec = load_spec(o);
    if (spec.patch_h < 1) throw ConfigError("profile: config needs patch dims");
    auto corpus = load_corpus_and_backend(spec, o.config);
    if (!corpus.scenes) throw ConfigError("profile: config needs a scene corpus");
    fs::create_directories(spec.out_dir);

    std::vector<double> use = scales;
    if (use.empty()) use = spec.scales;
    if (use.empty()) throw ConfigError("profile: no scales given (flag --scales or config)");

    ScalePreferenceTable table =
        profile_scales(*corpus.backend, *corpus.scenes, use, spec.patch_h, spec.patch_w, o.workers);

    fs::path base = fs::path(spec.out_dir) / "scale_preference";
    std::ofstream csv(base.string() + ".csv");
    csv << "class";
    for (double s : table.scales) csv << ",iou@" << s;
    csv << ",best_scale,no_preference\n";
    for (size_t c = 0; c < table.iou.size(); ++c) {
        csv << c;
        for (double v : table.iou[c]) csv << "," << v;
        csv << "," << table.best_scale[c] << "," << (table.no_preference[c] ? 1 : 0) << "\n";
    }
    json j;
    j["scales"] = table.scales;
    json rows = json::array();
    for (size_t c = 0; c < table.iou.size(); ++c)
        rows.push_back({{"class", c},
                        {"iou", table.iou[c]},
                        {"best_scale", table.best_scale[c]},
                        {"no_preference", table.no_preference[c]}});
    j["classes"] = rows;
    write_json_file(base.string() + ".json", j);

    for (size_t c = 0; c < table.best_scale.size(); ++c)
        std::printf("class %zu: best scale %.2f%s\n", c, table.best_scale[c],
                    table.no_preference[c] ? " (no stable preference)" : "");
    return 0;
}

int cmd_budget(const CommonOpts& o) {
    RunSpec spec = load_spec(o);
    ScaleSchedule sched = spec_schedule(spec);
    std::printf("scheme %s, patch %dx%d\n", to_string(sched.tag), sched.patch_h, sched.patch_w);
    std::printf("%8s %12s %14s\n", "scale", "fraction", "area ratio");
    for (size_t i = 0; i < sched.scales.size(); ++i) {
        double term = static_cast<double>(sched.fractions[i].num) * sched.scales[i] *
                      sched.scales[i] / static_cast<double>(sched.fractions[i].den);
        std::printf("%8.2f %8lld/%-4lld %14.6f\n", sched.scales[i],
                    static_cast<long long>(sched.fractions[i].num),
                    static_cast<long long>(sched.fractions[i].den), term);
    }
    std::printf("total processed-area ratio: %.6f\n", schedule_ratio(sched));
    if (spec.backend_kind == "oracle" && !spec.oracle.preferred_scales.empty()) {
        double ecn = ecn_flops_per_pixel(spec.oracle.classes);
        std::printf("backend flops/pixel %.1f, ecn flops/pixel %.1f (ratio %.4f)\n",
                    spec.flops_per_pixel, ecn, ecn / spec.flops_per_pixel);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stacking-based multi-scale segmentation fusion engine"};
    app.require_subcommand(1);

    CommonOpts synth_o, train_o, infer_o, profile_o, budget_o;
    std::string pred_dir, gt_dir, eval_out = "metrics";
    int eval_classes = 0;
    std::vector<double> profile_scales_flag;

    auto* synth = app.add_subcommand("synth", "generate a synthetic scene corpus");
    add_common(synth, synth_o);

    auto* train = app.add_subcommand("train-ecn", "train error-correction weights per transition");
    add_common(train, train_o);

    auto* infer = app.add_subcommand("infer", "run a scheme over a corpus");
    add_common(infer, infer_o);

    auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
    eval->add_option("--pred", pred_dir, "directory of predicted .pgm label maps")->required();
    eval->add_option("--gt", gt_dir, "directory of ground-truth .pgm label maps")->required();
    eval->add_option("--classes", eval_classes, "class count")->required();
    eval->add_option("--out", eval_out, "output path stem for metrics (.json/.csv)");

    auto* profile = app.add_subcommand("profile", "per-class scale preference sweep");
    add_common(profile, profile_o);
    profile->add_option("--scales", profile_scales_flag, "scales to profile")->delimiter(',');

    auto* budget = app.add_subcommand("budget", "print the processed-area budget table");
    add_common(budget, budget_o);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(synth_o);
        if (train->parsed()) return cmd_train_ecn(train_o);
        if (infer->parsed()) return cmd_infer(infer_o);
        if (eval->parsed()) return cmd_eval(pred_dir, gt_dir, eval_classes, eval_out);
        if (profile->parsed()) return cmd_profile(profile_o, profile_scales_flag);
        if (budget->parsed()) return cmd_budget(budget_o);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
