#pragma once

#include <vector>

#include "exptree/data.hpp"
#include "exptree/density.hpp"
#include "exptree/trees.hpp"

namespace exptree {

/// Observed evidence as a constraint set together with its probability.
struct Evidence {
    ConstraintSet event;
    double probability = 0.0;
};

/// Throws when the evidence has zero probability under the density.
Evidence make_evidence(const MixtureDensity& d, const PartialAssignment& xo);

struct ExpectationOptions {
    /// Rescale leaf weights to sum to one when some mass falls on no leaf.
    bool renormalize = false;
};

struct LeafWeight {
    int leaf_id = 0;
    double weight = 0.0;  // p(path, evidence) / p(evidence)
};

/// Conditional probability of reaching each leaf given the evidence.
///
/// Leaves reachable only through missing values are left out. `excluded_mass` is
/// the conditional mass that reaches no listed leaf; it is zero for trees whose
/// decision nodes partition every feature.
struct LeafPosterior {
    std::vector<LeafWeight> leaves;
    double excluded_mass = 0.0;
    /// No listed leaf is consistent with the evidence.
    bool unsupported = false;
};

LeafPosterior leaf_posterior(const TreeModel& t, const MixtureDensity& d, const PartialAssignment& xo,
                             const ExpectationOptions& opts = {});

/// Leaf weights in leaf-index order (excluded leaves get 0).
std::vector<double> leaf_weights(const TreeModel& t, const MixtureDensity& d, const Evidence& ev,
                                 const ExpectationOptions& opts = {});

/// Row-major L1 x L2 matrix of p(path_i, path_j, evidence) / p(evidence).
std::vector<double> pair_weights(const TreeModel& t1, const TreeModel& t2, const MixtureDensity& d,
                                 const Evidence& ev);

/// E[f(x) | xo] = sum_l theta_l p(path_l, xo) / p(xo).
double expected_prediction(const TreeModel& t, const MixtureDensity& d, const PartialAssignment& xo,
                           const ExpectationOptions& opts = {});

/// sum_r omega_r E[f_r(x) | xo], summed in tree order.
double expected_prediction_forest(const ForestModel& forest, const MixtureDensity& d,
                                  const PartialAssignment& xo, const ExpectationOptions& opts = {});

/// E[f(x)^2 | xo] = sum_l theta_l^2 p(path_l, xo) / p(xo); distinct leaves never co-occur.
double expected_squared_prediction(const TreeModel& t, const MixtureDensity& d,
                                   const PartialAssignment& xo, const ExpectationOptions& opts = {});

/// E[f1(x) f2(x) | xo] over all leaf pairs of the two trees. O(L1 * L2) marginals.
double expected_cross_prediction(const TreeModel& t1, const TreeModel& t2, const MixtureDensity& d,
                                 const PartialAssignment& xo);

/// E[F(x)^2 | xo] = sum_r sum_s omega_r omega_s E[f_r f_s | xo].
double expected_squared_prediction_forest(const ForestModel& forest, const MixtureDensity& d,
                                          const PartialAssignment& xo);

}  // namespace exptree
