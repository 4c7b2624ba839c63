#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "exptree/density.hpp"
#include "exptree/error.hpp"
#include "oracle.hpp"

using namespace exptree;
using V = std::vector<std::int32_t>;

namespace {

MixtureDensity two_binary_uniform() {
    return MixtureDensity({2, 2}, {1.0}, {{{0.5, 0.5}, {0.5, 0.5}}});
}

// Weights (0.3, 0.7); p(X1=1) = 0.9 / 0.2; p(X2=1) = 0.5 / 0.5.
MixtureDensity two_component() {
    return MixtureDensity({2, 2}, {0.3, 0.7}, {{{0.1, 0.9}, {0.5, 0.5}}, {{0.8, 0.2}, {0.5, 0.5}}});
}

ConstraintSet point(const std::vector<int>& cards, const PartialAssignment& x) {
    return ConstraintSet::from_evidence(x, cards);
}

}  // namespace

TEST_CASE("constructor validates the parameters") {
    CHECK_THROWS_AS(MixtureDensity({2}, {0.5}, {{{0.5, 0.5}}}), Error);
    CHECK_THROWS_AS(MixtureDensity({2}, {1.0}, {{{0.6, 0.5}}}), Error);
    CHECK_THROWS_AS(MixtureDensity({2}, {1.0}, {{{1.2, -0.2}}}), Error);
    CHECK_THROWS_AS(MixtureDensity({2}, {1.0}, {{{1.0}}}), Error);
    CHECK_THROWS_AS(MixtureDensity({2}, {0.5, 0.5}, {{{0.5, 0.5}}}), Error);
}

TEST_CASE("marginal examples") {
    const auto u = two_binary_uniform();
    CHECK(marginal(u, ConstraintSet::unconstrained(u.cardinalities())) == doctest::Approx(1.0).epsilon(1e-15));
    auto c = ConstraintSet::unconstrained(u.cardinalities());
    c.restrict(0, {1});
    CHECK(marginal(u, c) == 0.5);

    const auto m = two_component();
    auto x1 = ConstraintSet::unconstrained(m.cardinalities());
    x1.restrict(0, {1});
    CHECK(marginal(m, x1) == doctest::Approx(0.41).epsilon(1e-14));
}

TEST_CASE("marginal of a contradictory set is exactly zero") {
    const auto m = two_component();
    auto c = ConstraintSet::unconstrained(m.cardinalities());
    c.restrict(0, {0});
    c.restrict(0, {1});
    CHECK(c.contradictory());
    CHECK(marginal(m, c) == 0.0);
    CHECK_THROWS_AS(marginal(m, ConstraintSet::unconstrained(std::vector<int>{2})), Error);
}

TEST_CASE("conditional examples") {
    const auto u = two_binary_uniform();
    auto x1 = ConstraintSet::unconstrained(u.cardinalities());
    x1.restrict(0, {0});
    auto x2 = ConstraintSet::unconstrained(u.cardinalities());
    x2.restrict(1, {1});
    CHECK(conditional(u, x1, x1) == 1.0);
    CHECK(conditional(u, x2, x1) == doctest::Approx(0.5).epsilon(1e-15));

    const auto m = two_component();
    auto g = ConstraintSet::unconstrained(m.cardinalities());
    g.restrict(0, {1});
    CHECK(conditional(m, x2, g) == doctest::Approx(0.5).epsilon(1e-14));

    auto impossible = ConstraintSet::unconstrained(m.cardinalities());
    impossible.restrict(0, ConstraintSet::Mask{0});
    CHECK_THROWS_WITH_AS(conditional(m, x2, impossible), "conditioning on zero-probability evidence", Error);
}

TEST_CASE("intersect examples") {
    const std::vector<int> cards{2, 2};
    auto b = ConstraintSet::unconstrained(cards);
    b.restrict(0, {1});
    CHECK(intersect(ConstraintSet::unconstrained(cards), b) == b);

    auto a0 = ConstraintSet::unconstrained(cards);
    a0.restrict(0, {0});
    CHECK(intersect(a0, b).contradictory());

    auto a = ConstraintSet::unconstrained(cards);
    a.restrict(0, {0, 1});
    a.restrict(1, {1});
    auto expected = ConstraintSet::unconstrained(cards);
    expected.restrict(0, {1});
    expected.restrict(1, {1});
    CHECK(intersect(a, b) == expected);
}

TEST_CASE("marginal properties against enumeration") {
    Rng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        const auto cards = oracle::random_cards(rng);
        const auto d = oracle::random_density(rng, cards, 1 + rng.index(3));

        double total = 0.0;
        oracle::for_each_completion(cards, PartialAssignment(cards.size()), [&](const PartialAssignment& x) {
            const double p = marginal(d, point(cards, x));
            REQUIRE(p == doctest::Approx(oracle::joint(d, x)).epsilon(1e-13));
            total += p;
        });
        REQUIRE(std::abs(total - 1.0) <= 1e-9);

        // Random allowed-sets: marginal equals the enumerated mass.
        auto c = ConstraintSet::unconstrained(cards);
        for (std::size_t f = 0; f < cards.size(); ++f) c.restrict(f, rng.bits() & ConstraintSet::full_mask(cards[f]));
        const double expected = oracle::probability(d, [&](const PartialAssignment& x) {
            for (std::size_t f = 0; f < cards.size(); ++f)
                if (!c.allows(f, x[f])) return false;
            return true;
        });
        REQUIRE(std::abs(marginal(d, c) - expected) <= 1e-12);
        if (c.contradictory()) REQUIRE(marginal(d, c) == 0.0);

        // Monotone under per-feature supersets.
        auto wider = c;
        const std::size_t f = rng.index(cards.size());
        wider = intersect(ConstraintSet::unconstrained(cards), wider);
        auto sup = ConstraintSet::unconstrained(cards);
        for (std::size_t g = 0; g < cards.size(); ++g)
            sup.restrict(g, g == f ? ConstraintSet::full_mask(cards[g]) : c.mask(g));
        REQUIRE(marginal(d, c) <= marginal(d, sup) + 1e-15);

        // Additivity over a split of one feature's allowed set.
        const auto full = ConstraintSet::full_mask(cards[f]);
        const auto s1 = rng.bits() & full;
        auto c1 = sup, c2 = sup;
        c1.restrict(f, s1);
        c2.restrict(f, full & ~s1);
        REQUIRE(std::abs(marginal(d, c1) + marginal(d, c2) - marginal(d, sup)) <= 1e-12);
    }
}

TEST_CASE("EM: single component on complete data gives smoothed frequencies") {
    const FeatureSchema s({{"a", 3}, {"b", 2}}, "y");
    const Dataset ds(s, {{PartialAssignment(V{0, 1}), 0.0},
                         {PartialAssignment(V{0, 0}), 0.0},
                         {PartialAssignment(V{2, 1}), 0.0},
                         {PartialAssignment(V{0, 1}), 0.0}});
    EmOptions o;
    o.components = 1;
    o.epsilon = 0.01;
    const auto r = em_fit(ds, o);
    const double n = 4.0, eps = 0.01;
    CHECK(r.density.prob(0, 0, 0) == doctest::Approx((3 + eps) / (n + 3 * eps)).epsilon(1e-12));
    CHECK(r.density.prob(0, 0, 1) == doctest::Approx(eps / (n + 3 * eps)).epsilon(1e-12));
    CHECK(r.density.prob(0, 0, 2) == doctest::Approx((1 + eps) / (n + 3 * eps)).epsilon(1e-12));
    CHECK(r.density.prob(0, 1, 1) == doctest::Approx((3 + eps) / (n + 2 * eps)).epsilon(1e-12));
    CHECK(r.density.weight(0) == 1.0);
}

TEST_CASE("EM: a fully missing feature gets uniform tables") {
    Rng rng(5);
    std::vector<Row> rows;
    for (int i = 0; i < 200; ++i)
        rows.push_back({PartialAssignment(V{static_cast<int>(rng.index(2)), kMissing}), 0.0});
    const Dataset ds(FeatureSchema({{"a", 2}, {"b", 4}}, "y"), rows);
    EmOptions o;
    o.components = 3;
    const auto r = em_fit(ds, o);
    for (std::size_t k = 0; k < 3; ++k)
        for (int v = 0; v < 4; ++v) CHECK(r.density.prob(k, 1, v) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("EM: all table entries strictly positive with smoothing") {
    Rng rng(6);
    const std::vector<int> cards{4, 3};
    std::vector<Row> rows;
    for (int i = 0; i < 50; ++i) rows.push_back({PartialAssignment(V{0, static_cast<int>(rng.index(2))}), 0.0});
    const Dataset ds(oracle::schema_for(cards), rows);
    EmOptions o;
    o.components = 2;
    const auto r = em_fit(ds, o);
    for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t f = 0; f < 2; ++f)
            for (double p : r.density.table(k, f)) CHECK(p > 0.0);
}

TEST_CASE("EM: zero iterations returns the smoothed initialization") {
    Rng rng(7);
    const std::vector<int> cards{3, 3};
    const Dataset ds = oracle::random_dataset(rng, cards, 40, 0.7);
    EmOptions o;
    o.components = 2;
    o.max_iters = 0;
    o.seed = 3;
    const auto r = em_fit(ds, o);
    CHECK(r.iterations == 0);
    CHECK(r.log_likelihood.size() == 1);
    CHECK(r.density.components() == 2);
    CHECK(em_fit(ds, o).density == r.density);
}

TEST_CASE("EM: more components than rows warns and proceeds") {
    const Dataset ds(FeatureSchema({{"a", 2}}, "y"), {{PartialAssignment(V{0}), 0.0}, {PartialAssignment(V{1}), 0.0}});
    EmOptions o;
    o.components = 5;
    const auto r = em_fit(ds, o);
    CHECK_FALSE(r.warnings.empty());
    CHECK(r.density.components() == 5);
    CHECK_THROWS_AS(em_fit(Dataset(ds.schema(), {}), o), Error);
    o.components = 0;
    CHECK_THROWS_AS(em_fit(ds, o), Error);
}

TEST_CASE("EM: deterministic given the seed, log-likelihood matches the final model") {
    Rng rng(8);
    const std::vector<int> cards{3, 2, 4};
    const auto truth = oracle::random_density(rng, cards, 2);
    std::vector<Row> rows;
    for (int i = 0; i < 300; ++i) {
        PartialAssignment x(cards.size());
        for (std::size_t f = 0; f < cards.size(); ++f)
            if (rng.uniform() < 0.7) x[f] = static_cast<int>(rng.index(static_cast<std::size_t>(cards[f])));
        rows.push_back({x, 0.0});
    }
    const Dataset ds(oracle::schema_for(cards), rows);
    EmOptions o;
    o.components = 3;
    o.seed = 42;
    const auto a = em_fit(ds, o);
    const auto b = em_fit(ds, o);
    CHECK(a.density == b.density);
    CHECK(a.log_likelihood == b.log_likelihood);
    CHECK(a.log_likelihood.back() == doctest::Approx(log_likelihood(a.density, ds)).epsilon(1e-12));
    for (std::size_t i = 1; i < a.objective.size(); ++i) CHECK(a.objective[i] >= a.objective[i - 1] - 1e-9);
    o.seed = 43;
    CHECK_FALSE(em_fit(ds, o).density == a.density);
}

TEST_CASE("log_likelihood of missing slots marginalizes them") {
    const auto m = two_component();
    const Dataset ds(FeatureSchema({{"a", 2}, {"b", 2}}, "y"), {{PartialAssignment(V{1, kMissing}), 0.0}});
    CHECK(log_likelihood(m, ds) == doctest::Approx(std::log(0.41)).epsilon(1e-14));
}
