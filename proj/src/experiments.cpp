// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include "flowlens/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <utility>

#include <json.hpp>

#include "flowlens/oodscore.hpp"
#include "flowlens/parallel.hpp"
#include "flowlens/rng.hpp"

namespace flowlens {

namespace {

constexpr std::uint64_t kTagFeatScene = 0x65787031ULL;
constexpr std::uint64_t kTagFeatCapture = 0x65787032ULL;
constexpr std::uint64_t kTagFeatTrain = 0x65787033ULL;
constexpr std::uint64_t kTagFlowTrain = 0x65787034ULL;
constexpr std::uint64_t kTagDetector = 0x65787035ULL;
constexpr std::uint64_t kTagOodScene = 0x65787036ULL;
constexpr std::uint64_t kTagOodCapture = 0x65787037ULL;
constexpr std::uint64_t kTagOodFlow = 0x65787038ULL;
constexpr std::uint64_t kTagCorrScene = 0x65787039ULL;
constexpr std::uint64_t kTagTrialScene = 0x6578703aULL;
constexpr std::uint64_t kTagTrialEval = 0x6578703bULL;
constexpr std::uint64_t kTagTrialServo = 0x6578703cULL;
constexpr std::uint64_t kTagTrialEvolve = 0x6578703dULL;

constexpr int kPipelineScenes = 320;
constexpr int kPipelineFeatureEpochs = 40;
constexpr int kPipelineFlowEpochs = 60;
constexpr int kPipelineFlowLayers = 6;
constexpr int kPipelineFlowHidden = 32;

nlohmann::json parse_json(const std::string& text) {
    nlohmann::json doc = nlohmann::json::parse(text, nullptr, false);
    if (doc.is_discarded()) throw std::invalid_argument("manifest is not valid JSON");
    return doc;
}

template <typename T>
void take(const nlohmann::json& doc, const char* key, T& out) {
    if (doc.contains(key)) out = doc.at(key).get<T>();
}

void require_existing(const std::string& path, const char* what) {
    if (!std::filesystem::exists(path))
        throw std::runtime_error(std::string(what) + " checkpoint not found: " + path);
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path);
}

// Per-family dataset of captures under default camera parameters.
struct FamilyData {
    std::vector<Image> train;
    std::vector<Image> calibration;
    std::vector<Image> test;
};

FamilyData make_family(ScenePreset preset, const OodSettings& s, std::uint64_t seed) {
    FamilyData fam;
    const std::uint64_t ptag = static_cast<std::uint64_t>(preset);
    const int total = s.n_train + s.n_calibration + s.n_test;
    for (int i = 0; i < total; ++i) {
        const Scene scene =
            generate_scene(preset, mix_seed(mix_seed(seed, kTagOodScene, ptag),
                                            static_cast<std::uint64_t>(i)));
        Image img = capture(scene, CameraParams::defaults(),
                            mix_seed(mix_seed(seed, kTagOodCapture, ptag),
                                     static_cast<std::uint64_t>(i)));
        if (i < s.n_train)
            fam.train.push_back(std::move(img));
        else if (i < s.n_train + s.n_calibration)
            fam.calibration.push_back(std::move(img));
        else
            fam.test.push_back(std::move(img));
    }
    return fam;
}

// Both OOD scores of one image from a single backward pass.
struct ImageScores {
    double avg_gradient = 0.0;
    double log_density = 0.0;
};

std::vector<ImageScores> score_images(const FlowModel& flow, const FeatureExtractor& fx,
                                      const std::vector<Image>& images, int threads) {
    std::vector<ImageScores> out(images.size());
    parallel_for(static_cast<int>(images.size()), threads, [&](int i) {
        const auto pg = log_density_pixel_gradients<float>(flow, fx, images[static_cast<std::size_t>(i)]);
        double sum = 0.0;
        for (float v : pg.map.data) sum += v;
        out[static_cast<std::size_t>(i)].avg_gradient = sum / static_cast<double>(pg.map.data.size());
        out[static_cast<std::size_t>(i)].log_density = pg.log_density;
    });
    return out;
}

FeatureExtractor pipeline_extractor(const ExperimentManifest& m) {
    if (!m.features_checkpoint.empty()) {
        require_existing(m.features_checkpoint, "features");
        return load_feature_checkpoint_file(m.features_checkpoint);
    }
    LabeledImages data;
    for (int i = 0; i < kPipelineScenes; ++i) {
        const Scene s = generate_scene(ScenePreset::Nominal,
                                       mix_seed(m.seed, kTagFeatScene, static_cast<std::uint64_t>(i)));
        data.images.push_back(capture(s, CameraParams::defaults(),
                                      mix_seed(m.seed, kTagFeatCapture, static_cast<std::uint64_t>(i))));
        data.labels.push_back(s.dominant_label());
    }
    FeatureTrainConfig fc;
    fc.epochs = kPipelineFeatureEpochs;
    fc.seed = mix_seed(m.seed, kTagFeatTrain);
    return train_features(data, fc);
}

}  // namespace

ExperimentManifest parse_manifest(const std::string& json_text) {
    const nlohmann::json doc = parse_json(json_text);
    if (!doc.is_object()) throw std::invalid_argument("manifest must be a JSON object");
    ExperimentManifest m;
    if (!doc.contains("kind")) throw std::invalid_argument("manifest is missing \"kind\"");
    m.kind = doc.at("kind").get<std::string>();
    if (m.kind != "ood" && m.kind != "correlation" && m.kind != "adaptation")
        throw std::invalid_argument("unknown experiment kind \"" + m.kind + "\"");
    take(doc, "seed", m.seed);
    take(doc, "out-dir", m.out_dir);
    take(doc, "features-checkpoint", m.features_checkpoint);
    take(doc, "flow-checkpoint", m.flow_checkpoint);
    take(doc, "threads", m.threads);
    take(doc, "n-scenes", m.n_scenes);
    if (doc.contains("ood")) {
        const nlohmann::json& o = doc.at("ood");
        take(o, "in-dist", m.ood.in_dist);
        take(o, "ood-sets", m.ood.ood_sets);
        take(o, "both-directions", m.ood.both_directions);
        take(o, "n-train", m.ood.n_train);
        take(o, "n-calibration", m.ood.n_calibration);
        take(o, "n-test", m.ood.n_test);
        take(o, "alpha", m.ood.alpha);
        take(o, "flow-epochs", m.ood.flow_epochs);
        take(o, "flow-layers", m.ood.flow_layers);
        take(o, "flow-hidden", m.ood.flow_hidden);
    }
    if (doc.contains("adaptation")) {
        const nlohmann::json& a = doc.at("adaptation");
        take(a, "n-trials", m.adaptation.n_trials);
        take(a, "iterations", m.adaptation.iterations);
        take(a, "population-size", m.adaptation.population_size);
        take(a, "mutation-rate", m.adaptation.mutation_rate);
        take(a, "elite-fraction", m.adaptation.elite_fraction);
        take(a, "mutation-scale", m.adaptation.mutation_scale);
        take(a, "dump-images", m.adaptation.dump_images);
    }
    return m;
}

ExperimentManifest load_manifest_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_manifest(text);
}

std::string manifest_to_json(const ExperimentManifest& m) {
    nlohmann::json doc;
    doc["kind"] = m.kind;
    doc["seed"] = m.seed;
    doc["out-dir"] = m.out_dir;
    doc["features-checkpoint"] = m.features_checkpoint;
    doc["flow-checkpoint"] = m.flow_checkpoint;
    doc["threads"] = m.threads;
    doc["n-scenes"] = m.n_scenes;
    doc["ood"] = {{"in-dist", m.ood.in_dist},
                  {"ood-sets", m.ood.ood_sets},
                  {"both-directions", m.ood.both_directions},
                  {"n-train", m.ood.n_train},
                  {"n-calibration", m.ood.n_calibration},
                  {"n-test", m.ood.n_test},
                  {"alpha", m.ood.alpha},
                  {"flow-epochs", m.ood.flow_epochs},
                  {"flow-layers", m.ood.flow_layers},
                  {"flow-hidden", m.ood.flow_hidden}};
    doc["adaptation"] = {{"n-trials", m.adaptation.n_trials},
                         {"iterations", m.adaptation.iterations},
                         {"population-size", m.adaptation.population_size},
                         {"mutation-rate", m.adaptation.mutation_rate},
                         {"elite-fraction", m.adaptation.elite_fraction},
                         {"mutation-scale", m.adaptation.mutation_scale},
                         {"dump-images", m.adaptation.dump_images}};
    return doc.dump(2) + "\n";
}

DeskPipeline build_pipeline(const ExperimentManifest& m) {
    DeskPipeline p;
    p.fx = pipeline_extractor(m);

    if (!m.flow_checkpoint.empty()) {
        require_existing(m.flow_checkpoint, "flow");
        p.flow = load_flow_checkpoint_file(m.flow_checkpoint);
    } else {
        FeatureSet fs;
        fs.count = kPipelineScenes;
        fs.dim = p.fx.dim;
        for (int i = 0; i < kPipelineScenes; ++i) {
            const Scene s = generate_scene(
                ScenePreset::Nominal, mix_seed(m.seed, kTagFeatScene, static_cast<std::uint64_t>(i)));
            const Image img =
                capture(s, CameraParams::defaults(),
                        mix_seed(m.seed, kTagFeatCapture, static_cast<std::uint64_t>(i)));
            const std::vector<float> f = extract(p.fx, img);
            fs.data.insert(fs.data.end(), f.begin(), f.end());
        }
        FlowTrainConfig nc;
        nc.epochs = kPipelineFlowEpochs;
        nc.n_layers = kPipelineFlowLayers;
        nc.hidden = kPipelineFlowHidden;
        nc.seed = mix_seed(m.seed, kTagFlowTrain);
        p.flow = train_flow(fs, nc);
    }

    DetectorConfig dc;
    dc.seed = mix_seed(m.seed, kTagDetector);
    p.det = train_detector(p.fx, dc);
    return p;
}

namespace {

void check_ood_manifest(const ExperimentManifest& m) {
    if (m.kind != "ood") throw std::invalid_argument("manifest kind is not \"ood\"");
    if (m.ood.ood_sets.empty()) throw std::invalid_argument("ood experiment needs ood sets");
    if (m.ood.n_train < 2 || m.ood.n_calibration < 1 || m.ood.n_test < 1)
        throw std::invalid_argument("ood experiment split sizes are too small");
}

}  // namespace

OodResult run_ood_experiment(const ExperimentManifest& m) {
    check_ood_manifest(m);
    return run_ood_experiment(m, pipeline_extractor(m));
}

OodResult run_ood_experiment(const ExperimentManifest& m, const FeatureExtractor& fx) {
    check_ood_manifest(m);
    const int threads = resolve_threads(m.threads);

    const ScenePreset in_dist = parse_preset(m.ood.in_dist);
    std::vector<ScenePreset> families = {in_dist};
    for (const std::string& name : m.ood.ood_sets) {
        const ScenePreset p = parse_preset(name);
        if (p == in_dist)
            throw std::invalid_argument("ood set equals the in-distribution set: " + name);
        families.push_back(p);
    }

    // (train family, eval family) directions.
    std::vector<std::pair<ScenePreset, ScenePreset>> directions;
    for (std::size_t i = 1; i < families.size(); ++i) {
        directions.emplace_back(families[0], families[i]);
        if (m.ood.both_directions) directions.emplace_back(families[i], families[0]);
    }

    std::vector<FamilyData> data(families.size());
    std::vector<bool> data_ready(families.size(), false);
    std::vector<FlowModel> flows(families.size());
    std::vector<bool> flow_ready(families.size(), false);
    std::vector<std::vector<ImageScores>> calib_scores(families.size());
    std::vector<std::vector<ImageScores>> self_test_scores(families.size());

    auto family_index = [&](ScenePreset p) {
        for (std::size_t i = 0; i < families.size(); ++i)
            if (families[i] == p) return i;
        throw std::logic_error("family not prepared");
    };
    auto prepare_data = [&](std::size_t fi) {
        if (data_ready[fi]) return;
        data[fi] = make_family(families[fi], m.ood, m.seed);
        data_ready[fi] = true;
    };
    auto prepare_flow = [&](std::size_t fi) {
        if (flow_ready[fi]) return;
        prepare_data(fi);
        FeatureSet fs;
        fs.count = static_cast<int>(data[fi].train.size());
        fs.dim = fx.dim;
        std::vector<std::vector<float>> rows(data[fi].train.size());
        parallel_for(fs.count, threads, [&](int i) {
            rows[static_cast<std::size_t>(i)] = extract(fx, data[fi].train[static_cast<std::size_t>(i)]);
        });
        for (const auto& r : rows) fs.data.insert(fs.data.end(), r.begin(), r.end());

        if (fi == 0 && !m.flow_checkpoint.empty()) {
            require_existing(m.flow_checkpoint, "flow");
            flows[fi] = load_flow_checkpoint_file(m.flow_checkpoint);
        } else {
            FlowTrainConfig nc;
            nc.epochs = m.ood.flow_epochs;
            nc.n_layers = m.ood.flow_layers;
            nc.hidden = m.ood.flow_hidden;
            nc.seed = mix_seed(m.seed, kTagOodFlow, static_cast<std::uint64_t>(families[fi]));
            flows[fi] = train_flow(fs, nc);
        }
        calib_scores[fi] = score_images(flows[fi], fx, data[fi].calibration, threads);
        self_test_scores[fi] = score_images(flows[fi], fx, data[fi].test, threads);
        flow_ready[fi] = true;
    };

    OodResult result;
    result.table = CsvTable({"train-set", "eval-set", "score", "tau", "calibration-fpr",
                             "test-fpr", "tpr", "n-test"});
    for (const auto& [train_p, eval_p] : directions) {
        const std::size_t ti = family_index(train_p);
        const std::size_t ei = family_index(eval_p);
        prepare_flow(ti);
        prepare_data(ei);
        const std::vector<ImageScores> ood_scores =
            score_images(flows[ti], fx, data[ei].test, threads);

        for (const bool use_gradient : {true, false}) {
            std::vector<double> calib;
            for (const ImageScores& s : calib_scores[ti])
                calib.push_back(use_gradient ? s.avg_gradient : s.log_density);
            const DecisionRule rule = calibrate_threshold(
                calib, m.ood.alpha, use_gradient, use_gradient ? "avg-gradient" : "log-density");

            int fp = 0;
            for (const ImageScores& s : self_test_scores[ti])
                fp += flags_as_ood(rule, use_gradient ? s.avg_gradient : s.log_density);
            int tp = 0;
            for (const ImageScores& s : ood_scores)
                tp += flags_as_ood(rule, use_gradient ? s.avg_gradient : s.log_density);

            OodRow row;
            row.train_set = preset_name(train_p);
            row.eval_set = preset_name(eval_p);
            row.score = rule.kind;
            row.tau = rule.tau;
            row.calibration_fpr = rule.realized_fpr;
            row.test_fpr = static_cast<double>(fp) / self_test_scores[ti].size();
            row.tpr = static_cast<double>(tp) / ood_scores.size();
            row.n_test = static_cast<int>(ood_scores.size());
            result.rows.push_back(row);
            result.table.add_row({row.train_set, row.eval_set, row.score, fmt_float(row.tau),
                                  fmt_float(row.calibration_fpr), fmt_float(row.test_fpr),
                                  fmt_float(row.tpr), std::to_string(row.n_test)});
        }
    }

    if (!m.out_dir.empty()) {
        std::filesystem::create_directories(m.out_dir);
        write_text_file(m.out_dir + "/ood.csv", result.table.dump());
    }
    return result;
}

namespace {

void check_correlation_manifest(const ExperimentManifest& m) {
    if (m.kind != "correlation") throw std::invalid_argument("manifest kind is not \"correlation\"");
    if (m.n_scenes < 1) throw std::invalid_argument("correlation experiment needs scenes");
}

}  // namespace

CorrelationOutput run_correlation_experiment(const ExperimentManifest& m) {
    check_correlation_manifest(m);
    return run_correlation_experiment(m, build_pipeline(m));
}

CorrelationOutput run_correlation_experiment(const ExperimentManifest& m, const DeskPipeline& p) {
    check_correlation_manifest(m);

    std::vector<Scene> scenes;
    for (int i = 0; i < m.n_scenes; ++i)
        scenes.push_back(generate_scene(ScenePreset::Nominal,
                                        mix_seed(m.seed, kTagCorrScene, static_cast<std::uint64_t>(i))));

    CorrelationOutput out;
    out.result = correlation_experiment(p.flow, p.fx, p.det, scenes, resolve_threads(m.threads));
    out.summary = CsvTable({"n-scenes", "n-correct", "n-incorrect", "mean-correct",
                            "mean-incorrect", "correct-to-incorrect-ratio"});
    const auto opt_str = [](const std::optional<double>& v) {
        return v ? fmt_float(*v) : std::string();
    };
    std::string ratio;
    if (out.result.mean_correct && out.result.mean_incorrect && *out.result.mean_incorrect != 0.0)
        ratio = fmt_float(*out.result.mean_correct / *out.result.mean_incorrect);
    out.summary.add_row({std::to_string(m.n_scenes), std::to_string(out.result.n_correct),
                         std::to_string(out.result.n_incorrect), opt_str(out.result.mean_correct),
                         opt_str(out.result.mean_incorrect), ratio});

    if (!m.out_dir.empty()) {
        std::filesystem::create_directories(m.out_dir);
        write_text_file(m.out_dir + "/boxes.csv", out.result.boxes.dump());
        write_text_file(m.out_dir + "/summary.csv", out.summary.dump());
    }
    return out;
}

CameraParams auto_exposure_params(const Scene& scene, std::uint64_t capture_seed) {
    CameraParams params = CameraParams::defaults();
    for (int step = 0; step < 20; ++step) {
        const Image img = capture(scene, params, capture_seed);
        const float l = mean_luma(img);
        if (l >= 0.4f && l <= 0.6f) break;
        const float next = params.exposure + (l < 0.4f ? 0.5f : -0.5f);
        CameraParams adjusted = params;
        adjusted.exposure = next;
        adjusted = CameraParams(adjusted.backlight_compensation, adjusted.brightness,
                                adjusted.contrast, adjusted.exposure, adjusted.gain,
                                adjusted.saturation, adjusted.sharpness);
        if (adjusted.exposure == params.exposure) break;
        params = adjusted;
    }
    return params;
}

namespace {

void check_adaptation_manifest(const ExperimentManifest& m) {
    if (m.kind != "adaptation") throw std::invalid_argument("manifest kind is not \"adaptation\"");
    if (m.adaptation.n_trials < 1) throw std::invalid_argument("adaptation experiment needs trials");
}

}  // namespace

AdaptationResult run_adaptation_experiment(const ExperimentManifest& m) {
    check_adaptation_manifest(m);
    return run_adaptation_experiment(m, build_pipeline(m));
}

AdaptationResult run_adaptation_experiment(const ExperimentManifest& m, const DeskPipeline& p) {
    check_adaptation_manifest(m);
    const int threads = resolve_threads(m.threads);

    auto base_config = [&](std::uint64_t trial_seed) {
        EvolutionConfig ec;
        ec.population_size = m.adaptation.population_size;
        ec.mutation_rate = m.adaptation.mutation_rate;
        ec.iterations = m.adaptation.iterations;
        ec.elite_fraction = m.adaptation.elite_fraction;
        ec.mutation_scale = m.adaptation.mutation_scale;
        ec.seed = trial_seed;
        return ec;
    };

    AdaptationResult result;
    result.per_trial = CsvTable({"trial", "scene-seed", "default", "auto", "neg-log-density",
                                 "roi-gradient", "neg-log-density-fitness", "roi-gradient-fitness",
                                 "monotone"});
    std::array<std::array<int, 4>, kObjectClassCount> per_class{};

    for (int t = 0; t < m.adaptation.n_trials; ++t) {
        const std::uint64_t scene_seed = mix_seed(m.seed, kTagTrialScene, static_cast<std::uint64_t>(t));
        const Scene scene = generate_scene(ScenePreset::BrightLight, scene_seed);
        const std::uint64_t eval_seed = mix_seed(m.seed, kTagTrialEval, static_cast<std::uint64_t>(t));

        const EvolutionConfig ref = base_config(mix_seed(m.seed, kTagTrialEvolve,
                                                         static_cast<std::uint64_t>(t)));
        EvolutionConfig cfg_density = ref;
        cfg_density.objective = AdaptationObjective::NegLogDensity;
        EvolutionConfig cfg_gradient = ref;
        cfg_gradient.objective = AdaptationObjective::RoiGradient;
        if (cfg_density.population_size != cfg_gradient.population_size ||
            cfg_density.mutation_rate != cfg_gradient.mutation_rate ||
            cfg_density.iterations != cfg_gradient.iterations ||
            cfg_density.elite_fraction != cfg_gradient.elite_fraction ||
            cfg_density.mutation_scale != cfg_gradient.mutation_scale ||
            cfg_density.seed != cfg_gradient.seed)
            throw std::logic_error("adaptation conditions diverged beyond the objective");

        const EvolutionResult density_run = evolve(scene, cfg_density, p.flow, p.fx, p.det, threads);
        const EvolutionResult gradient_run = evolve(scene, cfg_gradient, p.flow, p.fx, p.det, threads);
        bool monotone = true;
        for (const EvolutionResult* run : {&density_run, &gradient_run})
            for (std::size_t i = 1; i < run->history.size(); ++i)
                if (run->history[i] > run->history[i - 1]) monotone = false;
        result.histories_monotone = result.histories_monotone && monotone;

        const std::array<CameraParams, 4> condition_params = {
            CameraParams::defaults(),
            auto_exposure_params(scene, mix_seed(m.seed, kTagTrialServo, static_cast<std::uint64_t>(t))),
            density_run.best.params,
            gradient_run.best.params,
        };

        const std::vector<DetectionBox> truths = capture_truth(scene);
        std::array<int, 4> trial_counts{};
        for (std::size_t c = 0; c < condition_params.size(); ++c) {
            const Image img = capture(scene, condition_params[c], eval_seed);
            const MatchReport rep = match(detect(p.det, p.fx, img), truths);
            trial_counts[c] = static_cast<int>(rep.correct.size());
            result.totals[c] += trial_counts[c];
            for (const DetectionBox& b : rep.correct)
                ++per_class[static_cast<std::size_t>(b.label)][c];

            if (!m.out_dir.empty() && m.adaptation.dump_images) {
                char trial_id[32];
                std::snprintf(trial_id, sizeof(trial_id), "trial-%03d", t);
                const std::filesystem::path dir =
                    std::filesystem::path(m.out_dir) / trial_id / kAdaptationConditions[c];
                std::filesystem::create_directories(dir);
                write_ppm((dir / "capture.ppm").string(), img);
                write_pgm16_scaled((dir / "gradient.pgm").string(),
                                   gradient_map(p.flow, p.fx, img).values);
            }
        }

        result.per_trial.add_row(
            {std::to_string(t), std::to_string(scene_seed), std::to_string(trial_counts[0]),
             std::to_string(trial_counts[1]), std::to_string(trial_counts[2]),
             std::to_string(trial_counts[3]), fmt_float(density_run.best.fitness),
             fmt_float(gradient_run.best.fitness), monotone ? "1" : "0"});
    }

    result.per_class = CsvTable({"class", "default", "auto", "neg-log-density", "roi-gradient"});
    for (int label = 0; label < kObjectClassCount; ++label) {
        const auto& row = per_class[static_cast<std::size_t>(label)];
        result.per_class.add_row({object_class_name(label), std::to_string(row[0]),
                                  std::to_string(row[1]), std::to_string(row[2]),
                                  std::to_string(row[3])});
    }
    result.per_class.add_row({"total", std::to_string(result.totals[0]),
                              std::to_string(result.totals[1]), std::to_string(result.totals[2]),
                              std::to_string(result.totals[3])});

    if (!m.out_dir.empty()) {
        std::filesystem::create_directories(m.out_dir);
        write_text_file(m.out_dir + "/adaptation.csv", result.per_class.dump());
        write_text_file(m.out_dir + "/trials.csv", result.per_trial.dump());
    }
    return result;
}

}  // namespace flowlens
