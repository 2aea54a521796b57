// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0
//
// Scripted desk-scale experiments: OOD separation of synthetic image
// families at a fixed false-positive rate, the gradient-vs-correctness
// correlation over detected boxes, and four-way camera-parameter adaptation
// on bright-light scenes. Each run is driven by a JSON manifest and
// reproduces byte-identical CSV outputs for a fixed seed.

#ifndef FLOWLENS_EXPERIMENTS_HPP
#define FLOWLENS_EXPERIMENTS_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "flowlens/camsim.hpp"
#include "flowlens/csv.hpp"
#include "flowlens/detector.hpp"
#include "flowlens/features.hpp"
#include "flowlens/flow.hpp"
#include "flowlens/optimizer.hpp"

namespace flowlens {

struct OodSettings {
    std::string in_dist = "nominal";
    std::vector<std::string> ood_sets = {"bright-light", "low-light"};
    bool both_directions = true;
    int n_train = 2000;
    int n_calibration = 500;
    int n_test = 500;
    double alpha = 0.05;
    // Flow budget for the per-family density models.
    int flow_epochs = 60;
    int flow_layers = 6;
    int flow_hidden = 32;
};

struct AdaptationSettings {
    int n_trials = 50;
    int iterations = 60;
    int population_size = 50;
    float mutation_rate = 0.20f;
    float elite_fraction = 0.2f;
    float mutation_scale = 0.10f;
    bool dump_images = true;
};

struct ExperimentManifest {
    std::string kind;  // "ood" | "correlation" | "adaptation"
    std::uint64_t seed = 0;
    std::string out_dir;              // empty: no files are written
    std::string features_checkpoint;  // empty: train in-run
    std::string flow_checkpoint;      // empty: train in-run
    int threads = 0;
    int n_scenes = 200;  // correlation
    OodSettings ood;
    AdaptationSettings adaptation;
};

ExperimentManifest parse_manifest(const std::string& json_text);
ExperimentManifest load_manifest_file(const std::string& path);
std::string manifest_to_json(const ExperimentManifest& manifest);

// Extractor, flow, and detector resolved from a manifest: loaded from the
// named checkpoints when given, trained from the manifest seed otherwise.
struct DeskPipeline {
    FeatureExtractor fx;
    FlowModel flow;
    Detector det;
};
DeskPipeline build_pipeline(const ExperimentManifest& manifest);

struct OodRow {
    std::string train_set;
    std::string eval_set;
    std::string score;  // "avg-gradient" | "log-density"
    double tau = 0.0;
    double calibration_fpr = 0.0;
    double test_fpr = 0.0;
    double tpr = 0.0;
    int n_test = 0;
};

struct OodResult {
    std::vector<OodRow> rows;
    CsvTable table = CsvTable({});
};

// Trains a density model per in-distribution family, calibrates both score
// kinds at the manifest's false-positive rate on a held-out calibration
// split, and reports detection rates on each out-of-distribution test split.
OodResult run_ood_experiment(const ExperimentManifest& manifest);
OodResult run_ood_experiment(const ExperimentManifest& manifest, const FeatureExtractor& fx);

struct CorrelationOutput {
    CorrelationResult result;
    CsvTable summary = CsvTable({});
};

CorrelationOutput run_correlation_experiment(const ExperimentManifest& manifest);
CorrelationOutput run_correlation_experiment(const ExperimentManifest& manifest,
                                             const DeskPipeline& pipeline);

// Mean-luma exposure servo: steps exposure by half a stop at a time until
// the captured mean luma lands in [0.4, 0.6], at most 20 steps.
CameraParams auto_exposure_params(const Scene& scene, std::uint64_t capture_seed);

inline constexpr std::array<const char*, 4> kAdaptationConditions = {
    "default", "auto", "neg-log-density", "roi-gradient"};

struct AdaptationResult {
    CsvTable per_class = CsvTable({});  // object classes x conditions, plus a total row
    CsvTable per_trial = CsvTable({});
    std::array<int, 4> totals{};        // correct detections per condition
    bool histories_monotone = true;
};

AdaptationResult run_adaptation_experiment(const ExperimentManifest& manifest);
AdaptationResult run_adaptation_experiment(const ExperimentManifest& manifest,
                                           const DeskPipeline& pipeline);

}  // namespace flowlens

#endif
