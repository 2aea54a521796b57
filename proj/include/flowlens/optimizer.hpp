// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0
//
// Evolutionary search over camera parameters: a fixed-size population with
// elitism, per-gene Gaussian mutation scaled to each parameter's range, and
// candidate fitness from a fresh capture scored either by the ROI-restricted
// gradient objective or by the negative whole-image log density. Lower
// fitness is better.

#ifndef FLOWLENS_OPTIMIZER_HPP
#define FLOWLENS_OPTIMIZER_HPP

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "flowlens/camsim.hpp"
#include "flowlens/csv.hpp"
#include "flowlens/detector.hpp"
#include "flowlens/features.hpp"
#include "flowlens/flow.hpp"
#include "flowlens/rng.hpp"

namespace flowlens {

enum class AdaptationObjective { RoiGradient, NegLogDensity };

AdaptationObjective parse_objective(const std::string& name);
std::string objective_name(AdaptationObjective objective);

struct Genome {
    CameraParams params;
    double fitness = std::numeric_limits<double>::quiet_NaN();  // NaN until evaluated
};

struct EvolutionConfig {
    int population_size = 50;
    float mutation_rate = 0.20f;
    int iterations = 200;
    float elite_fraction = 0.2f;
    // Mutation sigma as a fraction of each parameter's range width.
    float mutation_scale = 0.10f;
    AdaptationObjective objective = AdaptationObjective::RoiGradient;
    std::uint64_t seed = 0;
};

// Captures the scene under the genome's parameters and scores the image.
// RoiGradient re-runs detection on the candidate image and averages the
// gradient map over the detected boxes (whole image when none). Any failure
// inside the pipeline yields +infinity instead of propagating.
double evaluate(const Genome& genome, const Scene& scene, const FlowModel& model,
                const FeatureExtractor& fx, const Detector& det, std::uint64_t seed,
                AdaptationObjective objective = AdaptationObjective::RoiGradient);

// Each parameter is independently perturbed with probability rate by Gaussian
// noise with sigma = scale * range width, then clamped to its range. The
// returned genome is unevaluated.
Genome mutate(const Genome& genome, float rate, float scale, Rng& rng);

struct EvolutionResult {
    Genome best;
    // Population-best fitness after the initial generation and after each
    // iteration; elites keep their fitness, so this never increases.
    std::vector<double> history;
    // One row per history entry: iteration, best and mean fitness, best
    // parameters.
    CsvTable log = CsvTable({});
};

// Uniform random initial population with the default parameters injected as
// member zero; each iteration keeps the elite slice and refills the rest by
// mutating uniformly chosen elites. Genomes are evaluated once, when created,
// with a seed derived from (config seed, iteration, slot), so the result is
// independent of the evaluation thread count.
EvolutionResult evolve(const Scene& scene, const EvolutionConfig& config, const FlowModel& model,
                       const FeatureExtractor& fx, const Detector& det, int threads = 1);

}  // namespace flowlens

#endif
