#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "exptree/data.hpp"
#include "exptree/density.hpp"
#include "exptree/trees.hpp"

namespace exptree {

/// Mean over rows of E[(y - f(x))^2 | xo] = y^2 - 2y E[f] + E[f^2].
/// Every row needs a target and positive-probability evidence.
double expected_mse(const TreeModel& t, const MixtureDensity& d, const Dataset& ds);
/// Forest version; E[F^2] uses pairwise cross-tree terms.
double expected_mse(const ForestModel& forest, const MixtureDensity& d, const Dataset& ds);

struct LeafRefit {
    int leaf_id = 0;
    double old_theta = 0.0;
    double new_theta = 0.0;
    double denom = 0.0;  // sum over rows of the leaf's conditional weight
};

struct RefitReport {
    std::vector<LeafRefit> leaves;
    double expected_loss_before = 0.0;
    double expected_loss_after = 0.0;
    /// Leaves whose denominator (lambda + weight) is zero; their value is kept.
    std::vector<int> skipped_leaves;
    /// Rows dropped because their target was missing.
    std::size_t dropped_rows = 0;
};

struct TreeRefit {
    TreeModel tree;
    RefitReport report;
};

/// Closed-form minimizer of expected MSE plus lambda * ||theta||^2:
/// theta_l = sum_rows y w_l / (lambda + sum_rows w_l), w_l = p(path_l, xo) / p(xo).
TreeRefit refit_tree_mse(const TreeModel& t, const MixtureDensity& d, const Dataset& ds,
                         double lambda = 0.0);

/// Closed-form leaf values for a new tree added to a fixed forest:
/// theta_l = sum_rows (y w_l - sum_j omega theta_j w_lj) / sum_rows w_l.
TreeRefit refit_boost_tree(const ForestModel& fixed, const TreeModel& t_new, const MixtureDensity& d,
                           const Dataset& ds);
/// Boosting base case: no fixed trees.
TreeRefit refit_boost_tree(const TreeModel& t_new, const MixtureDensity& d, const Dataset& ds);

/// Refits every tree of an additive forest in order, each against the already-refit
/// trees before it. Tree weights are folded into the leaf values.
ForestModel refit_boosted_sequence(const ForestModel& forest, const MixtureDensity& d,
                                   const Dataset& ds);

/// Refits each tree independently with its own density and dataset.
ForestModel refit_bagging(const ForestModel& forest, std::span<const MixtureDensity> densities,
                          std::span<const Dataset> datasets, double lambda = 0.0);

/// Rows drawn uniformly with replacement, same size as the input.
Dataset bootstrap_sample(const Dataset& ds, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Joint forest refit

inline constexpr std::size_t kDefaultMaxSystemLeaves = 512;

struct SystemLeaf {
    std::size_t tree = 0;
    int leaf_id = 0;
};

/// Normal equations M theta = B over every leaf of every tree (tree weights fixed to 1
/// and absorbed into theta). M[i][j] = sum_rows p(path_i, path_j, xo) / p(xo).
struct ForestSystem {
    std::size_t size = 0;
    std::vector<double> m;  // row-major size x size
    std::vector<double> b;
    std::vector<SystemLeaf> leaves;
    std::size_t dropped_rows = 0;

    double at(std::size_t i, std::size_t j) const { return m[i * size + j]; }
};

ForestSystem build_forest_system(const ForestModel& forest, const MixtureDensity& d,
                                 const Dataset& ds,
                                 std::size_t max_leaves = kDefaultMaxSystemLeaves);

struct SystemSolution {
    std::vector<double> theta;
    double lambda_used = 0.0;
    /// The system was singular at lambda = 0 and was solved with a small ridge.
    bool fallback = false;
    /// Leaves with a zero diagonal (no mass); solved as 0.
    std::vector<std::size_t> inactive;
};

/// Solves (M + lambda I) theta = B by Cholesky. At lambda = 0 a singular M falls back
/// to lambda = 1e-8 * trace(M) / size.
SystemSolution solve_forest_system(const ForestSystem& sys, double lambda = 0.0);

struct ForestRefit {
    ForestModel forest;
    SystemSolution solution;
    double expected_loss_before = 0.0;
    double expected_loss_after = 0.0;
};

/// Joint refit of all leaves; inactive leaves keep their value, tree weights become 1.
ForestRefit refit_forest_joint(const ForestModel& forest, const MixtureDensity& d, const Dataset& ds,
                               double lambda = 0.0,
                               std::size_t max_leaves = kDefaultMaxSystemLeaves);

}  // namespace exptree
