// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include "flowlens/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <numeric>
#include <stdexcept>

#include "flowlens/oodscore.hpp"
#include "flowlens/parallel.hpp"

namespace flowlens {

namespace {

constexpr std::uint64_t kInitTag = 0x65766f31ULL;
constexpr std::uint64_t kRefillTag = 0x65766f32ULL;

void check_config(const EvolutionConfig& c) {
    if (c.population_size < 1)
        throw std::invalid_argument("evolve: population_size must be >= 1");
    if (c.iterations < 0) throw std::invalid_argument("evolve: iterations must be >= 0");
    if (!(c.mutation_rate >= 0.0f && c.mutation_rate <= 1.0f))
        throw std::invalid_argument("evolve: mutation_rate must be in [0, 1]");
    if (!(c.elite_fraction > 0.0f && c.elite_fraction < 1.0f))
        throw std::invalid_argument("evolve: elite_fraction must be in (0, 1)");
    if (!(c.mutation_scale >= 0.0f))
        throw std::invalid_argument("evolve: mutation_scale must be >= 0");
}

}  // namespace

AdaptationObjective parse_objective(const std::string& name) {
    if (name == "roi-gradient") return AdaptationObjective::RoiGradient;
    if (name == "neg-log-density") return AdaptationObjective::NegLogDensity;
    throw std::invalid_argument("unknown objective \"" + name +
                                "\" (expected roi-gradient or neg-log-density)");
}

std::string objective_name(AdaptationObjective objective) {
    return objective == AdaptationObjective::RoiGradient ? "roi-gradient" : "neg-log-density";
}

double evaluate(const Genome& genome, const Scene& scene, const FlowModel& model,
                const FeatureExtractor& fx, const Detector& det, std::uint64_t seed,
                AdaptationObjective objective) {
    try {
        const Image img = capture(scene, genome.params, seed);
        if (objective == AdaptationObjective::NegLogDensity)
            return -log_density_score(model, fx, img);
        const std::vector<DetectionBox> boxes = detect(det, fx, img);
        const GradientMap map = gradient_map(model, fx, img);
        return roi_objective(map, boxes);
    } catch (const std::exception&) {
        return std::numeric_limits<double>::infinity();
    }
}

Genome mutate(const Genome& genome, float rate, float scale, Rng& rng) {
    const auto& ranges = CameraParams::ranges();
    std::array<float, 7> v = genome.params.to_array();
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (rng.uniform() >= static_cast<double>(rate)) continue;
        const double width = static_cast<double>(ranges[i].hi) - ranges[i].lo;
        v[i] += static_cast<float>(rng.normal() * scale * width);
    }
    Genome out;
    out.params = CameraParams::from_array(v);
    return out;
}

EvolutionResult evolve(const Scene& scene, const EvolutionConfig& config, const FlowModel& model,
                       const FeatureExtractor& fx, const Detector& det, int threads) {
    check_config(config);
    const int pop_size = config.population_size;
    const int n_elite = std::clamp(
        static_cast<int>(std::lround(static_cast<double>(config.elite_fraction) * pop_size)), 1,
        pop_size);
    const int n_threads = resolve_threads(threads);

    std::vector<Genome> pop(static_cast<std::size_t>(pop_size));
    Rng init_rng(mix_seed(config.seed, kInitTag));
    const auto& ranges = CameraParams::ranges();
    for (Genome& g : pop) {
        std::array<float, 7> v;
        for (std::size_t i = 0; i < v.size(); ++i)
            v[i] = static_cast<float>(init_rng.uniform(ranges[i].lo, ranges[i].hi));
        g.params = CameraParams::from_array(v);
    }
    pop[0].params = CameraParams::defaults();

    std::vector<std::string> columns = {"iteration", "best-fitness", "mean-fitness"};
    for (const auto& r : ranges) columns.push_back(r.name);
    EvolutionResult result;
    result.log = CsvTable(columns);

    auto evaluate_fresh = [&](int iteration) {
        parallel_for(pop_size, n_threads, [&](int slot) {
            Genome& g = pop[static_cast<std::size_t>(slot)];
            if (!std::isnan(g.fitness)) return;
            const std::uint64_t seed =
                mix_seed(config.seed, static_cast<std::uint64_t>(iteration),
                         static_cast<std::uint64_t>(slot));
            g.fitness = evaluate(g, scene, model, fx, det, seed, config.objective);
        });
    };
    auto sorted_order = [&] {
        std::vector<std::size_t> order(pop.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return pop[a].fitness < pop[b].fitness;
        });
        return order;
    };
    auto record = [&](int iteration) {
        const auto order = sorted_order();
        const Genome& best = pop[order[0]];
        double sum = 0.0;
        for (const Genome& g : pop) sum += g.fitness;
        result.history.push_back(best.fitness);
        std::vector<std::string> row = {std::to_string(iteration), fmt_float(best.fitness),
                                        fmt_float(sum / pop_size)};
        for (float v : best.params.to_array()) row.push_back(fmt_float(v));
        result.log.add_row(row);
    };

    evaluate_fresh(0);
    record(0);

    Rng refill_rng(mix_seed(config.seed, kRefillTag));
    for (int it = 1; it <= config.iterations; ++it) {
        const auto order = sorted_order();
        std::vector<Genome> next(pop.size());
        for (int e = 0; e < n_elite; ++e)
            next[static_cast<std::size_t>(e)] = pop[order[static_cast<std::size_t>(e)]];
        for (int slot = n_elite; slot < pop_size; ++slot) {
            const Genome& parent =
                next[static_cast<std::size_t>(refill_rng.below(static_cast<std::uint64_t>(n_elite)))];
            next[static_cast<std::size_t>(slot)] =
                mutate(parent, config.mutation_rate, config.mutation_scale, refill_rng);
        }
        pop = std::move(next);
        evaluate_fresh(it);
        record(it);
    }

    result.best = pop[sorted_order()[0]];
    return result;
}

}  // namespace flowlens
