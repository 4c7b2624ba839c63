#include "exptree/expectation.hpp"

#include <algorithm>

#include "exptree/error.hpp"

namespace exptree {

Evidence make_evidence(const MixtureDensity& d, const PartialAssignment& xo) {
    Evidence ev{ConstraintSet::from_evidence(xo, d.cardinalities()), 0.0};
    ev.probability = marginal(d, ev.event);
    if (!(ev.probability > 0.0)) throw Error("conditioning on zero-probability evidence");
    return ev;
}

namespace {

void check_schema(const TreeModel& t, const MixtureDensity& d) {
    if (t.cardinalities() != d.cardinalities())
        throw Error("tree and density disagree on the feature schema");
}

// Conditional mass not covered by any weight; only trees with coverage gaps can have it.
double residual_mass(const TreeModel& t, const std::vector<double>& w) {
    if (!t.has_gaps()) return 0.0;
    double s = 0.0;
    for (double v : w) s += v;
    return std::max(0.0, 1.0 - s);
}

}  // namespace

std::vector<double> leaf_weights(const TreeModel& t, const MixtureDensity& d, const Evidence& ev,
                                 const ExpectationOptions& opts) {
    check_schema(t, d);
    std::vector<double> w(t.leaf_count(), 0.0);
    for (std::size_t i = 0; i < t.leaf_count(); ++i) {
        if (t.excluded(i)) continue;
        w[i] = marginal(d, intersect(t.path_constraints(i), ev.event)) / ev.probability;
    }
    if (opts.renormalize && t.has_gaps()) {
        double s = 0.0;
        for (double v : w) s += v;
        if (s > 0.0)
            for (double& v : w) v /= s;
    }
    return w;
}

std::vector<double> pair_weights(const TreeModel& t1, const TreeModel& t2, const MixtureDensity& d,
                                 const Evidence& ev) {
    check_schema(t1, d);
    check_schema(t2, d);
    const std::size_t n2 = t2.leaf_count();
    std::vector<double> w(t1.leaf_count() * n2, 0.0);
    for (std::size_t i = 0; i < t1.leaf_count(); ++i) {
        if (t1.excluded(i)) continue;
        const ConstraintSet with_i = intersect(t1.path_constraints(i), ev.event);
        if (with_i.contradictory()) continue;
        for (std::size_t j = 0; j < n2; ++j) {
            if (t2.excluded(j)) continue;
            w[i * n2 + j] = marginal(d, intersect(with_i, t2.path_constraints(j))) / ev.probability;
        }
    }
    return w;
}

LeafPosterior leaf_posterior(const TreeModel& t, const MixtureDensity& d, const PartialAssignment& xo,
                             const ExpectationOptions& opts) {
    const Evidence ev = make_evidence(d, xo);
    const auto w = leaf_weights(t, d, ev, opts);
    LeafPosterior post;
    bool any = false;
    for (std::size_t i = 0; i < t.leaf_count(); ++i) {
        if (t.excluded(i)) continue;
        post.leaves.push_back({t.leaf_ids()[i], w[i]});
        any = any || w[i] > 0.0;
    }
    post.excluded_mass = any ? residual_mass(t, w) : 1.0;
    post.unsupported = !any;
    return post;
}

double expected_prediction(const TreeModel& t, const MixtureDensity& d, const PartialAssignment& xo,
                           const ExpectationOptions& opts) {
    const auto w = leaf_weights(t, d, make_evidence(d, xo), opts);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += t.theta(t.leaf_ids()[i]) * w[i];
    return s;
}

double expected_prediction_forest(const ForestModel& forest, const MixtureDensity& d,
                                  const PartialAssignment& xo, const ExpectationOptions& opts) {
    double s = 0.0;
    for (std::size_t r = 0; r < forest.size(); ++r)
        s += forest.omega(r) * expected_prediction(forest.tree(r), d, xo, opts);
    return s;
}

double expected_squared_prediction(const TreeModel& t, const MixtureDensity& d,
                                   const PartialAssignment& xo, const ExpectationOptions& opts) {
    const auto w = leaf_weights(t, d, make_evidence(d, xo), opts);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double th = t.theta(t.leaf_ids()[i]);
        s += th * th * w[i];
    }
    return s;
}

double expected_cross_prediction(const TreeModel& t1, const TreeModel& t2, const MixtureDensity& d,
                                 const PartialAssignment& xo) {
    const auto w = pair_weights(t1, t2, d, make_evidence(d, xo));
    const auto th1 = t1.thetas();
    const auto th2 = t2.thetas();
    double s = 0.0;
    for (std::size_t i = 0; i < th1.size(); ++i) {
        double inner = 0.0;
        for (std::size_t j = 0; j < th2.size(); ++j) inner += th2[j] * w[i * th2.size() + j];
        s += th1[i] * inner;
    }
    return s;
}

double expected_squared_prediction_forest(const ForestModel& forest, const MixtureDensity& d,
                                          const PartialAssignment& xo) {
    double s = 0.0;
    for (std::size_t r = 0; r < forest.size(); ++r) {
        for (std::size_t q = 0; q < forest.size(); ++q) {
            const double term = r == q ? expected_squared_prediction(forest.tree(r), d, xo)
                                       : expected_cross_prediction(forest.tree(r), forest.tree(q), d, xo);
            s += forest.omega(r) * forest.omega(q) * term;
        }
    }
    return s;
}

}  // namespace exptree
