#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "sbss/config.hpp"
#include "sbss/io.hpp"

using namespace sbss;
namespace fs = std::filesystem;

namespace {

std::string cli_bin() {
    const char* p = std::getenv("SBSS_CLI_BIN");
    REQUIRE(p != nullptr);
    return p;
}

struct RunOut {
    int exit_code = -1;
    std::string output;
};

RunOut run_cli(const std::string& args, const fs::path& dir) {
    fs::path log = dir / "cli_output.txt";
    std::string cmd = "cd " + dir.string() + " && " + cli_bin() + " " + args + " > " +
                      log.string() + " 2>&1";
    int rc = std::system(cmd.c_str());
    RunOut out;
    out.exit_code = WEXITSTATUS(rc);
    std::ifstream is(log);
    out.output.assign(std::istreambuf_iterator<char>(is), {});
    return out;
}

fs::path fresh_dir(const std::string& name) {
    fs::path d = fs::temp_directory_path() / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream os(p);
    os << content;
}

const char* kSynthJson = R"({
  "count": 3, "height": 64, "width": 64, "seed": 11,
  "profile": [
    {"area_fraction": 0.45, "object_size": 0.55},
    {"area_fraction": 0.22, "object_size": 0.25},
    {"area_fraction": 0.21, "object_size": 0.2},
    {"area_fraction": 0.12, "object_size": 0.1}
  ]
})";

std::string backend_block(uint64_t seed) {
    return R"("backend": {"kind": "oracle", "flops_per_pixel": 891000.0,
      "oracle": {"preferred_scales": [0.5, 1.0, 1.0, 1.5],
                 "e_min": 0.05, "e_max": 0.5, "gain": 0.15,
                 "sharpness": 0.9, "seed": )" +
           std::to_string(seed) + "}}";
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

TEST_CASE("synth is reproducible and honors the configured class count") {
    auto dir = fresh_dir("sbss_cli_synth");
    write_file(dir / "synth.json", kSynthJson);

    auto r1 = run_cli("synth --config synth.json --out a", dir);
    REQUIRE(r1.exit_code == 0);
    auto r2 = run_cli("synth --config synth.json --out b", dir);
    REQUIRE(r2.exit_code == 0);

    for (const char* name : {"manifest.json", "scene_0000.ppm", "scene_0002_gt.pgm"})
        REQUIRE(slurp(dir / "a" / name) == slurp(dir / "b" / name));

    auto manifest = read_corpus_manifest((dir / "a" / "manifest.json").string());
    REQUIRE(manifest.classes == 4);
    REQUIRE(manifest.entries.size() == 3);
    auto labels = read_pgm((dir / "a" / "scene_0001_gt.pgm").string());
    for (uint8_t l : labels.labels) REQUIRE(l < 4);
}

TEST_CASE("infer with scheme ss matches scheme custom scales=[1.0]") {
    auto dir = fresh_dir("sbss_cli_ss");
    write_file(dir / "synth.json", kSynthJson);
    REQUIRE(run_cli("synth --config synth.json --out scenes", dir).exit_code == 0);

    write_file(dir / "ss.json", R"({
      "scheme": "ss", "patch": [16, 16], "mode": "act_only",
      "corpus": "scenes/manifest.json", )" + backend_block(7) +
                                    R"(, "seed": 1, "out": "out_ss"})");
    write_file(dir / "custom.json", R"({
      "scheme": "custom", "scales": [1.0], "patch": [16, 16], "mode": "act_only",
      "corpus": "scenes/manifest.json", )" + backend_block(7) +
                                        R"(, "seed": 1, "out": "out_custom"})");

    REQUIRE(run_cli("infer --config ss.json", dir).exit_code == 0);
    REQUIRE(run_cli("infer --config custom.json", dir).exit_code == 0);
    for (int i = 0; i < 3; ++i) {
        std::string id = "scene_000" + std::to_string(i);
        REQUIRE(slurp(dir / "out_ss" / (id + "_pred.pgm")) ==
                slurp(dir / "out_custom" / (id + "_pred.pgm")));
        // the ss path renormalizes once more after voting; values agree to float noise
        auto a = read_tns_file((dir / "out_ss" / (id + "_prob.tns")).string());
        auto b = read_tns_file((dir / "out_custom" / (id + "_prob.tns")).string());
        REQUIRE(a.dims == b.dims);
        for (size_t k = 0; k < a.data.size(); ++k)
            REQUIRE(a.data[k] == Catch::Approx(b.data[k]).margin(1e-6));
    }
}

TEST_CASE("infer ledger ratio matches the schedule on divisible dims") {
    auto dir = fresh_dir("sbss_cli_ledger");
    write_file(dir / "synth.json", kSynthJson);
    REQUIRE(run_cli("synth --config synth.json --out scenes", dir).exit_code == 0);
    write_file(dir / "run.json", R"({
      "scheme": "ecs_ss", "patch": [16, 16], "mode": "act_only",
      "corpus": "scenes/manifest.json", )" + backend_block(7) +
                                     R"(, "seed": 1, "out": "out"})");
    REQUIRE(run_cli("infer --config run.json", dir).exit_code == 0);

    std::ifstream is(dir / "out" / "scene_0000_ledger.json");
    json j;
    is >> j;
    REQUIRE(j.at("processed_ratio").get<double>() == 0.75);
    REQUIRE(j.at("slack_pixels").get<uint64_t>() == 0);
}

TEST_CASE("corrupt tns magic fails with a diagnostic naming the file") {
    auto dir = fresh_dir("sbss_cli_corrupt");
    write_file(dir / "synth.json", kSynthJson);
    REQUIRE(run_cli("synth --config synth.json --out scenes", dir).exit_code == 0);

    // a file backend whose stored maps are all garbage
    write_file(dir / "bad.tns", "XXXXnot-a-tensor");
    std::string records;
    for (int id = 0; id < 3; ++id)
        for (int y = 0; y < 64; y += 16)
            for (int x = 0; x < 64; x += 16) {
                if (!records.empty()) records += ",\n";
                records += R"({"image_id": "scene_000)" + std::to_string(id) +
                           R"(", "scale": 1.0, "rect": [)" + std::to_string(x) + ", " +
                           std::to_string(y) + R"(, 16, 16], "path": "bad.tns"})";
            }
    write_file(dir / "maps.json", R"({"classes": 4, "records": [)" + records + "]}");
    write_file(dir / "run.json", R"({
      "scheme": "ss", "patch": [16, 16], "mode": "act_only",
      "corpus": "scenes/manifest.json",
      "backend": {"kind": "file", "manifest": "maps.json", "flops_per_pixel": 891000.0},
      "seed": 1, "out": "out"})");

    auto r = run_cli("infer --config run.json", dir);
    REQUIRE(r.exit_code != 0);
    REQUIRE(r.output.find("bad.tns") != std::string::npos);
}

TEST_CASE("eval scores a perfect prediction at 1.0 and reproduces 38/63") {
    auto dir = fresh_dir("sbss_cli_eval");
    fs::create_directories(dir / "pred");
    fs::create_directories(dir / "gt");

    SECTION("pred == gt gives exactly 1") {
        LabelMap m(8, 8);
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) m.at(y, x) = static_cast<uint8_t>((x / 3) % 3);
        write_pgm((dir / "pred" / "img_pred.pgm").string(), m);
        write_pgm((dir / "gt" / "img_gt.pgm").string(), m);
        auto r = run_cli("eval --pred pred --gt gt --classes 3 --out metrics", dir);
        REQUIRE(r.exit_code == 0);
        REQUIRE(r.output.find("mIoU 1.000000") != std::string::npos);
    }

    SECTION("three-class fixture yields 38/63") {
        // confusion matrix [[5,1,0],[1,3,1],[0,1,4]] laid out on 16 pixels
        uint8_t gt_v[16] = {0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2};
        uint8_t pr_v[16] = {0, 0, 0, 0, 0, 1, 0, 1, 1, 1, 2, 1, 2, 2, 2, 2};
        LabelMap gt(4, 4), pr(4, 4);
        std::copy(gt_v, gt_v + 16, gt.labels.begin());
        std::copy(pr_v, pr_v + 16, pr.labels.begin());
        write_pgm((dir / "pred" / "img_pred.pgm").string(), pr);
        write_pgm((dir / "gt" / "img_gt.pgm").string(), gt);
        auto r = run_cli("eval --pred pred --gt gt --classes 3 --out metrics", dir);
        REQUIRE(r.exit_code == 0);

        std::ifstream is(dir / "metrics.json");
        json j;
        is >> j;
        REQUIRE(std::abs(j.at("miou").get<double>() - 38.0 / 63.0) < 1e-12);
    }

    SECTION("missing ground truth names the file") {
        LabelMap m(4, 4, 1);
        write_pgm((dir / "pred" / "lonely_pred.pgm").string(), m);
        auto r = run_cli("eval --pred pred --gt gt --classes 3 --out metrics", dir);
        REQUIRE(r.exit_code != 0);
        REQUIRE(r.output.find("lonely") != std::string::npos);
    }
}

TEST_CASE("train-ecn writes one weight file per transition, reproducibly") {
    auto dir = fresh_dir("sbss_cli_train");
    write_file(dir / "synth.json", R"({
      "count": 2, "height": 32, "width": 32, "seed": 3,
      "profile": [
        {"area_fraction": 0.55, "object_size": 0.5},
        {"area_fraction": 0.25, "object_size": 0.3},
        {"area_fraction": 0.12, "object_size": 0.2},
        {"area_fraction": 0.08, "object_size": 0.15}
      ]})");
    REQUIRE(run_cli("synth --config synth.json --out scenes", dir).exit_code == 0);

    write_file(dir / "train.json", R"({
      "scheme": "ecs_ss", "patch": [8, 8], "mode": "ecn_act",
      "corpus": "scenes/manifest.json", )" + backend_block(5) +
                                       R"(,
      "train": {"iterations": 3, "batch": 2, "lr": 0.001, "seed": 9},
      "seed": 9, "out": "w1"})");

    REQUIRE(run_cli("train-ecn --config train.json", dir).exit_code == 0);
    for (int t = 0; t < 3; ++t) {
        REQUIRE(fs::exists(dir / "w1" / ("ecn_t" + std::to_string(t) + ".ecw")));
        REQUIRE(fs::exists(dir / "w1" / ("train_log_t" + std::to_string(t) + ".txt")));
    }
    REQUIRE_FALSE(fs::exists(dir / "w1" / "ecn_t3.ecw"));  // 4 scales -> 3 transitions

    REQUIRE(run_cli("train-ecn --config train.json --out w2", dir).exit_code == 0);
    for (int t = 0; t < 3; ++t) {
        std::string name = "ecn_t" + std::to_string(t) + ".ecw";
        REQUIRE(slurp(dir / "w1" / name) == slurp(dir / "w2" / name));
    }

    // ECN inference consumes the trained weights from the out dir by default
    write_file(dir / "infer.json", R"({
      "scheme": "ecs_ss", "patch": [8, 8], "mode": "ecn_act",
      "corpus": "scenes/manifest.json", )" + backend_block(5) +
                                       R"(,
      "weights": ["w1/ecn_t0.ecw", "w1/ecn_t1.ecw", "w1/ecn_t2.ecw"],
      "seed": 9, "out": "inferred"})");
    REQUIRE(run_cli("infer --config infer.json", dir).exit_code == 0);
    REQUIRE(fs::exists(dir / "inferred" / "scene_0000_pred.pgm"));
}

TEST_CASE("budget prints the published totals") {
    auto dir = fresh_dir("sbss_cli_budget");
    for (auto [scheme, total] : {std::pair{"ecs_ms", "5.625000"},
                                 {"ms", "8.687500"},
                                 {"ecs_ss", "0.750000"},
                                 {"ss", "1.000000"}}) {
        write_file(dir / "b.json", std::string(R"({"scheme": ")") + scheme +
                                       R"(", "patch": [128, 128], )" + backend_block(1) + "}");
        auto r = run_cli("budget --config b.json", dir);
        REQUIRE(r.exit_code == 0);
        REQUIRE(r.output.find(std::string("total processed-area ratio: ") + total) !=
                std::string::npos);
    }
}

TEST_CASE("config validation names the offending field") {
    auto dir = fresh_dir("sbss_cli_badcfg");
    write_file(dir / "synth.json", kSynthJson);
    REQUIRE(run_cli("synth --config synth.json --out scenes", dir).exit_code == 0);

    // fractions[0] != 1
    write_file(dir / "bad1.json", R"({
      "scheme": "custom", "scales": [0.5, 1.0], "fractions": [0.5, 1.0],
      "patch": [16, 16], "corpus": "scenes/manifest.json", )" +
                                      backend_block(2) + "}");
    auto r1 = run_cli("infer --config bad1.json", dir);
    REQUIRE(r1.exit_code != 0);
    REQUIRE(r1.output.find("full coverage") != std::string::npos);

    // decreasing scales
    write_file(dir / "bad2.json", R"({
      "scheme": "custom", "scales": [1.0, 0.5], "patch": [16, 16],
      "corpus": "scenes/manifest.json", )" + backend_block(2) +
                                      "}");
    auto r2 = run_cli("infer --config bad2.json", dir);
    REQUIRE(r2.exit_code != 0);
    REQUIRE(r2.output.find("increasing") != std::string::npos);

    // oracle class count vs corpus
    write_file(dir / "bad3.json", R"({
      "scheme": "ss", "patch": [16, 16], "corpus": "scenes/manifest.json",
      "backend": {"kind": "oracle", "oracle": {"preferred_scales": [1.0, 1.0]}}})");
    auto r3 = run_cli("infer --config bad3.json", dir);
    REQUIRE(r3.exit_code != 0);
    REQUIRE(r3.output.find("classes") != std::string::npos);
}
