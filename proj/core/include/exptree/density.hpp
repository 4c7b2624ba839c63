#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "exptree/data.hpp"

namespace exptree {

/// Per-feature allowed-value sets, one 64-bit mask per feature.
///
/// An empty mask on any feature makes the whole set contradictory. The set does not
/// store cardinalities; "unconstrained" means every in-range bit is set.
class ConstraintSet {
public:
    using Mask = std::uint64_t;

    ConstraintSet() = default;

    static Mask full_mask(int cardinality) {
        return cardinality >= 64 ? ~Mask{0} : ((Mask{1} << cardinality) - 1);
    }
    static ConstraintSet unconstrained(std::span<const int> cardinalities);
    /// Observed slots become singletons; missing slots stay unconstrained.
    static ConstraintSet from_evidence(const PartialAssignment& x,
                                       std::span<const int> cardinalities);

    std::size_t size() const { return masks_.size(); }
    Mask mask(std::size_t f) const { return masks_[f]; }
    bool allows(std::size_t f, int value) const { return (masks_[f] >> value) & 1U; }
    bool contradictory() const;

    /// Restricts feature f to the given values (intersecting with what is allowed).
    ConstraintSet& restrict(std::size_t f, Mask allowed);
    ConstraintSet& restrict(std::size_t f, std::initializer_list<int> values);

    bool operator==(const ConstraintSet&) const = default;

private:
    std::vector<Mask> masks_;
};

ConstraintSet intersect(const ConstraintSet& a, const ConstraintSet& b);

/// Bit mask of a list of category indices.
ConstraintSet::Mask mask_of(std::initializer_list<int> values);

/// K-component mixture of fully-factorized categorical distributions.
class MixtureDensity {
public:
    MixtureDensity() = default;
    /// `tables[k][f]` is the distribution of feature f in component k. Validates that
    /// weights and every table are non-negative and sum to one within 1e-9.
    MixtureDensity(std::vector<int> cardinalities, std::vector<double> weights,
                   std::vector<std::vector<std::vector<double>>> tables);

    std::size_t components() const { return weights_.size(); }
    std::size_t features() const { return cards_.size(); }
    const std::vector<int>& cardinalities() const { return cards_; }
    const std::vector<double>& weights() const { return weights_; }
    double weight(std::size_t k) const { return weights_[k]; }
    /// Probability of category v of feature f under component k.
    double prob(std::size_t k, std::size_t f, int v) const {
        return params_[k * stride_ + offsets_[f] + static_cast<std::size_t>(v)];
    }
    std::span<const double> table(std::size_t k, std::size_t f) const {
        return {params_.data() + k * stride_ + offsets_[f], static_cast<std::size_t>(cards_[f])};
    }

    /// Mass the component assigns to a constraint set.
    double component_marginal(std::size_t k, const ConstraintSet& c) const;

    bool operator==(const MixtureDensity&) const = default;

private:
    std::vector<int> cards_;
    std::vector<std::size_t> offsets_;
    std::size_t stride_ = 0;
    std::vector<double> weights_;
    std::vector<double> params_;
};

/// Exact probability of a constraint set: sum_k w_k prod_f sum_{v allowed} table[k][f][v].
/// Returns exactly 0 for a contradictory set.
double marginal(const MixtureDensity& d, const ConstraintSet& c);

/// P(event | given). Throws when the evidence has zero probability.
double conditional(const MixtureDensity& d, const ConstraintSet& event, const ConstraintSet& given);

struct EmOptions {
    int components = 1;
    int max_iters = 50;
    std::uint64_t seed = 0;
    double epsilon = 1e-3;     // additive pseudo-count per table cell and per weight
    double rel_tol = 1e-6;     // relative log-likelihood change for early stop
};

struct EmResult {
    MixtureDensity density;
    /// Observed-data log-likelihood after each M-step (first entry: initialization).
    std::vector<double> log_likelihood;
    /// Log-likelihood plus the log of the smoothing prior; EM ascends this exactly.
    std::vector<double> objective;
    int iterations = 0;
    bool converged = false;
    std::vector<std::string> warnings;
};

/// EM on incomplete data: missing slots contribute a factor of one in the E-step.
EmResult em_fit(const Dataset& ds, const EmOptions& opts);

/// Observed-data log-likelihood of every row under the density.
double log_likelihood(const MixtureDensity& d, const Dataset& ds);

}  // namespace exptree
