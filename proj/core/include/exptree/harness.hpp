#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "exptree/data.hpp"
#include "exptree/density.hpp"
#include "exptree/random.hpp"
#include "exptree/trees.hpp"

namespace exptree {

// ---------------------------------------------------------------------------
// Baselines and metrics

/// Lower median of the observed category indices of each feature.
std::vector<int> median_impute_fit(const Dataset& train);
/// Fills MISSING slots from `fills`; observed slots are untouched.
PartialAssignment impute(const PartialAssignment& x, std::span<const int> fills);

double rmse(std::span<const double> predictions, std::span<const double> targets);

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthOptions {
    std::size_t n_train = 1000;
    std::size_t n_test = 500;
    int features = 8;
    int min_cardinality = 3;
    int max_cardinality = 4;
    int components = 4;
    /// Exponent applied to uniform draws before normalizing tables; larger is peakier.
    double sharpness = 3.0;
    int tree_depth = 4;
    double leaf_scale = 10.0;
    double noise = 1.0;
    std::uint64_t seed = 0;
};

struct SynthData {
    Dataset train;
    Dataset test;
    BinningSpec encoding;
    MixtureDensity density;
    TreeModel planted;
};

/// Samples features from a random mixture and labels from a random planted tree plus
/// Gaussian noise.
SynthData generate_synthetic(const SynthOptions& opts);

/// Draws one complete assignment from the density.
PartialAssignment sample_assignment(const MixtureDensity& d, Rng& rng);

// ---------------------------------------------------------------------------
// Density selection

struct DensityOptions {
    /// Component count; 0 selects by validation log-likelihood over `k_grid`.
    int components = 0;
    std::vector<int> k_grid{1, 2, 4, 8, 16};
    double validation_fraction = 0.2;
    int max_iters = 50;
    double epsilon = 1e-3;
    double rel_tol = 1e-6;
};

struct DensityFit {
    MixtureDensity density;
    int components = 0;
    std::vector<std::pair<int, double>> validation;  // (K, held-out log-likelihood)
};

DensityFit fit_density(const Dataset& train, const DensityOptions& opts, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Experiments

enum class Method { kDefaultBranch, kMedianImpute, kExpectedPrediction, kExpLossExpectedPrediction };

std::string_view method_name(Method m);
Method method_from_name(std::string_view name);

enum class Scenario {
    kDeployment,       // density and model fit on complete training data
    kLearnAndDeploy,   // both see the masked training data
};

enum class ForestRefitMode { kBoosted, kJoint };

struct ModelSource {
    /// When set, the model is read from this dump (needs the encoding).
    std::optional<std::string> dump_path;
    int trees = 1;  // 1: a single induced tree; more: boosted forest with a constant base
    InduceOptions induce{.max_depth = 5, .min_leaf = 1, .lambda = 1.0};
    double learning_rate = 0.3;
};

struct ExperimentConfig {
    std::optional<std::string> train_path, test_path, encoding_path;
    std::string target = "y";
    std::vector<std::string> categorical;
    int max_bins = kMaxBins;
    /// Used when no train/test paths are configured.
    std::optional<SynthOptions> synthetic;

    Scenario scenario = Scenario::kDeployment;
    std::vector<double> pis{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    int trials = 10;
    std::uint64_t seed = 0;
    DensityOptions density;
    ModelSource model;
    std::vector<Method> methods{Method::kDefaultBranch, Method::kMedianImpute,
                                Method::kExpectedPrediction, Method::kExpLossExpectedPrediction};
    double lambda = 0.0;
    ForestRefitMode forest_refit = ForestRefitMode::kBoosted;
    std::optional<std::string> output;

    /// Throws on invalid values.
    void validate() const;
};

/// Reads the JSON config format documented in the README. Relative paths resolve
/// against `base_dir`.
ExperimentConfig config_from_json(std::string_view text, const std::string& base_dir = "");

struct TrialResult {
    Method method;
    double pi = 0.0;
    int trial = 0;
    double rmse = 0.0;
};

struct Summary {
    Method method;
    double pi = 0.0;
    double mean = 0.0;
    double stddev = 0.0;  // population convention
    int trials = 0;
};

struct TrialMeta {
    double pi = 0.0;
    int trial = 0;
    std::uint64_t train_mask_seed = 0;
    std::uint64_t test_mask_seed = 0;
    std::uint64_t density_seed = 0;
    int components = 0;
    std::string model_hash;
    std::string density_hash;
};

struct RunReport {
    std::vector<TrialResult> details;  // ordered by (method, pi, trial)
    std::vector<Summary> summary;      // ordered by (method, pi)
    std::vector<TrialMeta> trials;
    std::vector<std::string> failures;
    std::uint64_t seed = 0;
};

RunReport run_experiment(const ExperimentConfig& cfg);

/// Aggregates detail rows into per-(method, pi) summaries.
std::vector<Summary> summarize(std::span<const TrialResult> details,
                               std::span<const Method> method_order);

std::string detail_csv(const RunReport& report);
std::string summary_csv(const RunReport& report);
std::string meta_json(const RunReport& report);

/// Writes detail.csv, summary.csv and meta.json into `dir` (created if needed).
void emit_report(const RunReport& report, const std::string& dir);

}  // namespace exptree
