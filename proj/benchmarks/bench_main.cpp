#include <benchmark/benchmark.h>

#include "exptree/data.hpp"
#include "exptree/expectation.hpp"
#include "exptree/fitting.hpp"
#include "exptree/harness.hpp"

using namespace exptree;

namespace {

struct Setup {
    SynthData data;
    Dataset masked_train;
    Dataset masked_test;
    TreeModel tree;
    ForestModel forest;
    MixtureDensity density;

    explicit Setup(int components) {
        SynthOptions so;
        so.components = components;
        data = generate_synthetic(so);
        masked_train = inject_mcar(data.train, 0.5, 1);
        masked_test = inject_mcar(data.test, 0.5, 2);
        tree = induce_tree(masked_train, {.max_depth = 5, .min_leaf = 1, .lambda = 1.0});
        BoostOptions bo;
        bo.tree = {.max_depth = 3, .min_leaf = 1, .lambda = 1.0};
        bo.rounds = 4;
        forest = induce_boosted_forest(masked_train, bo);
        density = data.density;
    }
};

const Setup& setup(int components) {
    static const Setup s4(4), s16(16);
    return components == 4 ? s4 : s16;
}

void BM_Marginal(benchmark::State& state) {
    const auto& s = setup(static_cast<int>(state.range(0)));
    const auto& t = s.tree;
    for (auto _ : state)
        for (std::size_t l = 0; l < t.leaf_count(); ++l)
            benchmark::DoNotOptimize(marginal(s.density, t.path_constraints(l)));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.tree.leaf_count()));
}
BENCHMARK(BM_Marginal)->Arg(4)->Arg(16);

void BM_ExpectedPrediction(benchmark::State& state) {
    const auto& s = setup(static_cast<int>(state.range(0)));
    for (auto _ : state)
        for (const auto& row : s.masked_test.rows())
            benchmark::DoNotOptimize(expected_prediction(s.tree, s.density, row.x));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.masked_test.size()));
}
BENCHMARK(BM_ExpectedPrediction)->Arg(4)->Arg(16);

void BM_ExpectedPredictionForest(benchmark::State& state) {
    const auto& s = setup(4);
    for (auto _ : state)
        for (const auto& row : s.masked_test.rows())
            benchmark::DoNotOptimize(expected_prediction_forest(s.forest, s.density, row.x));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.masked_test.size()));
}
BENCHMARK(BM_ExpectedPredictionForest);

void BM_RefitTree(benchmark::State& state) {
    const auto& s = setup(static_cast<int>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(refit_tree_mse(s.tree, s.density, s.masked_train, 0.0));
}
BENCHMARK(BM_RefitTree)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_ForestSystem(benchmark::State& state) {
    const auto& s = setup(4);
    for (auto _ : state) {
        const auto sys = build_forest_system(s.forest, s.density, s.masked_train);
        benchmark::DoNotOptimize(solve_forest_system(sys, 0.0));
    }
}
BENCHMARK(BM_ForestSystem)->Unit(benchmark::kMillisecond);

void BM_EmFit(benchmark::State& state) {
    const auto& s = setup(4);
    EmOptions o;
    o.components = static_cast<int>(state.range(0));
    o.max_iters = 20;
    o.rel_tol = 0.0;
    for (auto _ : state) benchmark::DoNotOptimize(em_fit(s.masked_train, o));
}
BENCHMARK(BM_EmFit)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
