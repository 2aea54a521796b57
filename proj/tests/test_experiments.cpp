// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <doctest.h>

#include "desk_models.hpp"
#include "flowlens/experiments.hpp"
#include "flowlens/image.hpp"
#include "flowlens/rng.hpp"

using namespace flowlens;
using flowlens::testing::desk_models;

namespace {

DeskPipeline fixture_pipeline() {
    const auto& m = desk_models();
    DeskPipeline p;
    p.fx = m.fx;
    p.flow = m.flow;
    p.det = m.det;
    return p;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name)
        : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("manifests survive a serialization round-trip") {
    ExperimentManifest m;
    m.kind = "adaptation";
    m.seed = 987654321ULL;
    m.out_dir = "runs/adapt";
    m.features_checkpoint = "fx.ckpt";
    m.flow_checkpoint = "flow.ckpt";
    m.threads = 3;
    m.n_scenes = 123;
    m.ood.in_dist = "bright-light";
    m.ood.ood_sets = {"nominal"};
    m.ood.both_directions = false;
    m.ood.n_train = 64;
    m.ood.n_calibration = 32;
    m.ood.n_test = 16;
    m.ood.alpha = 0.1;
    m.ood.flow_epochs = 7;
    m.ood.flow_layers = 4;
    m.ood.flow_hidden = 12;
    m.adaptation.n_trials = 5;
    m.adaptation.iterations = 9;
    m.adaptation.population_size = 13;
    m.adaptation.mutation_rate = 0.5f;
    m.adaptation.elite_fraction = 0.3f;
    m.adaptation.mutation_scale = 0.25f;
    m.adaptation.dump_images = false;

    const ExperimentManifest r = parse_manifest(manifest_to_json(m));
    CHECK(r.kind == m.kind);
    CHECK(r.seed == m.seed);
    CHECK(r.out_dir == m.out_dir);
    CHECK(r.features_checkpoint == m.features_checkpoint);
    CHECK(r.flow_checkpoint == m.flow_checkpoint);
    CHECK(r.threads == m.threads);
    CHECK(r.n_scenes == m.n_scenes);
    CHECK(r.ood.in_dist == m.ood.in_dist);
    CHECK(r.ood.ood_sets == m.ood.ood_sets);
    CHECK(r.ood.both_directions == m.ood.both_directions);
    CHECK(r.ood.n_train == m.ood.n_train);
    CHECK(r.ood.n_calibration == m.ood.n_calibration);
    CHECK(r.ood.n_test == m.ood.n_test);
    CHECK(r.ood.alpha == m.ood.alpha);
    CHECK(r.ood.flow_epochs == m.ood.flow_epochs);
    CHECK(r.ood.flow_layers == m.ood.flow_layers);
    CHECK(r.ood.flow_hidden == m.ood.flow_hidden);
    CHECK(r.adaptation.n_trials == m.adaptation.n_trials);
    CHECK(r.adaptation.iterations == m.adaptation.iterations);
    CHECK(r.adaptation.population_size == m.adaptation.population_size);
    CHECK(r.adaptation.mutation_rate == m.adaptation.mutation_rate);
    CHECK(r.adaptation.elite_fraction == m.adaptation.elite_fraction);
    CHECK(r.adaptation.mutation_scale == m.adaptation.mutation_scale);
    CHECK(r.adaptation.dump_images == m.adaptation.dump_images);
}

TEST_CASE("a minimal manifest fills every default") {
    const ExperimentManifest m = parse_manifest("{\"kind\": \"ood\"}");
    CHECK(m.kind == "ood");
    CHECK(m.seed == 0);
    CHECK(m.out_dir.empty());
    CHECK(m.threads == 0);
    CHECK(m.n_scenes == 200);
    CHECK(m.ood.in_dist == "nominal");
    CHECK(m.ood.ood_sets == std::vector<std::string>{"bright-light", "low-light"});
    CHECK(m.ood.n_train == 2000);
    CHECK(m.ood.n_calibration == 500);
    CHECK(m.ood.n_test == 500);
    CHECK(m.ood.alpha == 0.05);
    CHECK(m.adaptation.n_trials == 50);
    CHECK(m.adaptation.iterations == 60);
}

TEST_CASE("malformed manifests are rejected") {
    CHECK_THROWS_AS(parse_manifest("not json"), std::invalid_argument);
    CHECK_THROWS_AS(parse_manifest("[1, 2]"), std::invalid_argument);
    CHECK_THROWS_AS(parse_manifest("{}"), std::invalid_argument);
    CHECK_THROWS_AS(parse_manifest("{\"kind\": \"unknown\"}"), std::invalid_argument);
    CHECK_THROWS_AS(load_manifest_file("/nonexistent/manifest.json"), std::runtime_error);
}

TEST_CASE("a missing checkpoint path is rejected before any training") {
    ExperimentManifest m;
    m.kind = "correlation";
    m.features_checkpoint = "/nonexistent/features.ckpt";
    CHECK_THROWS_AS(run_correlation_experiment(m), std::runtime_error);
    CHECK_THROWS_AS(build_pipeline(m), std::runtime_error);
}

TEST_CASE("experiment runners reject manifests of the wrong kind") {
    const DeskPipeline p = fixture_pipeline();
    ExperimentManifest m;
    m.kind = "ood";
    CHECK_THROWS_AS(run_correlation_experiment(m, p), std::invalid_argument);
    CHECK_THROWS_AS(run_adaptation_experiment(m, p), std::invalid_argument);
    m.kind = "correlation";
    CHECK_THROWS_AS(run_ood_experiment(m, p.fx), std::invalid_argument);
}

TEST_CASE("auto exposure lands the mean luma inside the target band") {
    for (const ScenePreset preset : {ScenePreset::BrightLight, ScenePreset::LowLight}) {
        for (std::uint64_t s = 1; s <= 5; ++s) {
            const Scene scene = generate_scene(preset, mix_seed(0xae0ULL, s));
            const std::uint64_t cap_seed = mix_seed(0xae1ULL, s);
            const CameraParams tuned = auto_exposure_params(scene, cap_seed);
            const float luma = mean_luma(capture(scene, tuned, cap_seed));
            const auto& ranges = CameraParams::ranges();
            const bool pinned = tuned.exposure == ranges[3].lo || tuned.exposure == ranges[3].hi;
            CHECK((pinned || (luma >= 0.4f && luma <= 0.6f)));
        }
    }
}

TEST_CASE("auto exposure keeps every other parameter at its default") {
    const Scene scene = generate_scene(ScenePreset::BrightLight, 42);
    const CameraParams tuned = auto_exposure_params(scene, 7);
    const CameraParams def = CameraParams::defaults();
    CHECK(tuned.backlight_compensation == def.backlight_compensation);
    CHECK(tuned.brightness == def.brightness);
    CHECK(tuned.contrast == def.contrast);
    CHECK(tuned.gain == def.gain);
    CHECK(tuned.saturation == def.saturation);
    CHECK(tuned.sharpness == def.sharpness);
    CHECK(tuned.exposure != def.exposure);
}

TEST_CASE("the correlation experiment summarizes gradient means per box group") {
    const DeskPipeline p = fixture_pipeline();
    ExperimentManifest m;
    m.kind = "correlation";
    m.seed = 0x7e57ULL;
    m.n_scenes = 12;
    const CorrelationOutput out = run_correlation_experiment(m, p);
    CHECK(out.result.n_correct > 0);
    CHECK(out.result.boxes.row_count() ==
          static_cast<std::size_t>(out.result.n_correct + out.result.n_incorrect));
    REQUIRE(out.summary.row_count() == 1);

    const CorrelationOutput again = run_correlation_experiment(m, p);
    CHECK(out.result.boxes.dump() == again.result.boxes.dump());
    CHECK(out.summary.dump() == again.summary.dump());
}

TEST_CASE("the correlation experiment writes its tables under the output directory") {
    const DeskPipeline p = fixture_pipeline();
    TempDir dir("flowlens-test-corr");
    ExperimentManifest m;
    m.kind = "correlation";
    m.seed = 0x7e58ULL;
    m.n_scenes = 6;
    m.out_dir = dir.path.string();
    const CorrelationOutput out = run_correlation_experiment(m, p);
    CHECK(read_file(dir.path / "boxes.csv") == out.result.boxes.dump());
    CHECK(read_file(dir.path / "summary.csv") == out.summary.dump());
}

TEST_CASE("a small ood run produces calibrated rows for both scores") {
    const DeskPipeline p = fixture_pipeline();
    ExperimentManifest m;
    m.kind = "ood";
    m.seed = 0x00dULL;
    m.ood.ood_sets = {"bright-light"};
    m.ood.both_directions = true;
    m.ood.n_train = 48;
    m.ood.n_calibration = 40;
    m.ood.n_test = 20;
    m.ood.flow_epochs = 8;
    const OodResult res = run_ood_experiment(m, p.fx);

    REQUIRE(res.rows.size() == 4);
    CHECK(res.table.row_count() == 4);
    for (const OodRow& r : res.rows) {
        CHECK(r.calibration_fpr <= m.ood.alpha + 1e-12);
        CHECK(r.n_test == 20);
        CHECK(r.tpr >= 0.0);
        CHECK(r.tpr <= 1.0);
        CHECK((r.score == "avg-gradient" || r.score == "log-density"));
    }
    CHECK(res.rows[0].train_set == "nominal");
    CHECK(res.rows[0].eval_set == "bright-light");
    CHECK(res.rows[2].train_set == "bright-light");
    CHECK(res.rows[2].eval_set == "nominal");

    const OodResult again = run_ood_experiment(m, p.fx);
    CHECK(res.table.dump() == again.table.dump());
}

TEST_CASE("the ood experiment rejects overlapping family choices") {
    const DeskPipeline p = fixture_pipeline();
    ExperimentManifest m;
    m.kind = "ood";
    m.ood.in_dist = "nominal";
    m.ood.ood_sets = {"nominal"};
    CHECK_THROWS_AS(run_ood_experiment(m, p.fx), std::invalid_argument);
    m.ood.ood_sets.clear();
    CHECK_THROWS_AS(run_ood_experiment(m, p.fx), std::invalid_argument);
}

TEST_CASE("a small adaptation run fills the per-class and per-trial tables") {
    const DeskPipeline p = fixture_pipeline();
    TempDir dir("flowlens-test-adapt");
    ExperimentManifest m;
    m.kind = "adaptation";
    m.seed = 0xada7ULL;
    m.out_dir = dir.path.string();
    m.adaptation.n_trials = 2;
    m.adaptation.iterations = 3;
    m.adaptation.population_size = 8;
    const AdaptationResult res = run_adaptation_experiment(m, p);

    CHECK(res.histories_monotone);
    REQUIRE(res.per_class.row_count() == kObjectClassCount + 1);
    CHECK(res.per_trial.row_count() == 2);

    const std::string per_class = res.per_class.dump();
    CHECK(per_class.find("disc") != std::string::npos);
    CHECK(per_class.find("ring") != std::string::npos);
    CHECK(per_class.find("total") != std::string::npos);

    int sum = 0;
    for (int c : res.totals) sum += c;
    CHECK(sum >= 0);

    CHECK(read_file(dir.path / "adaptation.csv") == per_class);
    CHECK(read_file(dir.path / "trials.csv") == res.per_trial.dump());
    for (const char* cond : kAdaptationConditions) {
        CHECK(std::filesystem::exists(dir.path / "trial-000" / cond / "capture.ppm"));
        CHECK(std::filesystem::exists(dir.path / "trial-000" / cond / "gradient.pgm"));
    }

    const AdaptationResult again = run_adaptation_experiment(m, p);
    CHECK(res.per_class.dump() == again.per_class.dump());
    CHECK(res.per_trial.dump() == again.per_trial.dump());
}

TEST_CASE("per-class adaptation counts sum to the totals row") {
    const DeskPipeline p = fixture_pipeline();
    ExperimentManifest m;
    m.kind = "adaptation";
    m.seed = 0xada8ULL;
    m.adaptation.n_trials = 2;
    m.adaptation.iterations = 2;
    m.adaptation.population_size = 6;
    m.adaptation.dump_images = false;
    const AdaptationResult res = run_adaptation_experiment(m, p);

    const std::string dump = res.per_class.dump();
    std::vector<std::vector<std::string>> rows;
    std::size_t start = 0;
    while (start < dump.size()) {
        const std::size_t end = dump.find('\n', start);
        std::vector<std::string> cells;
        std::string line = dump.substr(start, end - start);
        std::size_t c0 = 0;
        while (true) {
            const std::size_t comma = line.find(',', c0);
            cells.push_back(line.substr(c0, comma - c0));
            if (comma == std::string::npos) break;
            c0 = comma + 1;
        }
        rows.push_back(cells);
        if (end == std::string::npos) break;
        start = end + 1;
    }
    REQUIRE(rows.size() == kObjectClassCount + 2);
    for (std::size_t col = 1; col <= 4; ++col) {
        int sum = 0;
        for (std::size_t r = 1; r <= kObjectClassCount; ++r)
            sum += std::stoi(rows[r][col]);
        CHECK(sum == std::stoi(rows[kObjectClassCount + 1][col]));
        CHECK(sum == res.totals[col - 1]);
    }
}
