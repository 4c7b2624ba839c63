#include <doctest.h>

#include <cmath>
#include <map>

#include "exptree/error.hpp"
#include "exptree/expectation.hpp"
#include "exptree/fitting.hpp"
#include "oracle.hpp"

using namespace exptree;
using V = std::vector<std::int32_t>;

namespace {

TreeModel split_on(int feature, std::vector<int> cards, double left, double right) {
    TreeNode root;
    root.feature = feature;
    root.branches = {mask_of({0}), mask_of({1})};
    root.children = {1, 2};
    TreeNode l, r;
    l.theta = left;
    r.theta = right;
    return TreeModel(std::move(cards), {root, l, r});
}

FeatureSchema one_binary() { return FeatureSchema({{"x0", 2}}, "y"); }

double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

struct Instance {
    std::vector<int> cards;
    MixtureDensity d;
    TreeModel t;
    Dataset ds;
};

Instance random_instance(Rng& rng, std::size_t rows = 12) {
    auto cards = oracle::random_cards(rng);
    auto d = oracle::random_density(rng, cards, 1 + rng.index(3));
    auto t = oracle::random_tree(rng, cards, 3);
    auto ds = oracle::random_dataset(rng, cards, rows);
    return {std::move(cards), std::move(d), std::move(t), std::move(ds)};
}

}  // namespace

TEST_CASE("expected_mse examples") {
    const auto t = split_on(0, {2}, 1.0, 3.0);
    const MixtureDensity quarter({2}, {1.0}, {{{0.75, 0.25}}});
    const Dataset one(one_binary(), {{PartialAssignment(V{kMissing}), 2.0}});
    CHECK(expected_mse(t, quarter, one) == doctest::Approx(1.0).epsilon(1e-14));

    const Dataset full(one_binary(), {{PartialAssignment(V{0}), 2.0}, {PartialAssignment(V{1}), 0.0}});
    CHECK(expected_mse(t, quarter, full) == doctest::Approx((1.0 + 9.0) / 2.0).epsilon(1e-15));

    const auto c = TreeModel::constant({2}, 4.0);
    CHECK(expected_mse(c, quarter, Dataset(one_binary(), {{PartialAssignment(V{kMissing}), 4.0}})) == 0.0);

    const Dataset unlabeled(one_binary(), {{PartialAssignment(V{0}), std::nullopt}});
    CHECK_THROWS_WITH_AS(expected_mse(t, quarter, unlabeled), doctest::Contains("row 0"), Error);
    const MixtureDensity zero({2}, {1.0}, {{{1.0, 0.0}}});
    CHECK_THROWS_WITH_AS(expected_mse(t, zero, Dataset(one_binary(), {{PartialAssignment(V{0}), 1.0},
                                                                         {PartialAssignment(V{1}), 1.0}})),
                         doctest::Contains("row 1"), Error);
}

TEST_CASE("expected_mse matches the oracle for trees and forests") {
    Rng rng(51);
    for (int trial = 0; trial < 100; ++trial) {
        auto in = random_instance(rng);
        const auto t2 = oracle::random_tree(rng, in.cards, 2);
        const ForestModel f({in.t, t2}, {0.7, -1.3});
        const double tree = oracle::expected_mse(in.d, in.ds, [&](const auto& x) { return oracle::value(in.t, x); });
        const double forest = oracle::expected_mse(in.d, in.ds, [&](const auto& x) {
            return 0.7 * oracle::value(in.t, x) - 1.3 * oracle::value(t2, x);
        });
        REQUIRE(std::abs(expected_mse(in.t, in.d, in.ds) - tree) <= 1e-9);
        REQUIRE(std::abs(expected_mse(f, in.d, in.ds) - forest) <= 1e-9);
    }
}

TEST_CASE("refit_tree_mse: hand-computed two-row example") {
    const auto t = split_on(0, {2}, 1.0, 3.0);
    const MixtureDensity half({2}, {1.0}, {{{0.5, 0.5}}});
    const Dataset ds(one_binary(), {{PartialAssignment(V{kMissing}), 0.0}, {PartialAssignment(V{1}), 4.0}});
    const auto r = refit_tree_mse(t, half, ds, 0.0);
    CHECK(r.tree.theta(2) == doctest::Approx(8.0 / 3.0).epsilon(1e-15));
    CHECK(r.tree.theta(1) == 0.0);
    REQUIRE(r.report.leaves.size() == 2);
    CHECK(r.report.leaves[1].denom == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(r.report.leaves[0].old_theta == 1.0);
    CHECK(r.report.expected_loss_after <= r.report.expected_loss_before);

    // A coarse numerical minimization of the oracle loss lands on the same point.
    double best = 1e300, best_l = 0, best_r = 0;
    for (int i = -40; i <= 40; ++i)
        for (int j = -40; j <= 80; ++j) {
            const double l = i / 20.0, rr = j / 20.0;
            const auto cand = t.with_thetas(std::vector<double>{l, rr});
            const double loss = oracle::expected_mse(half, ds, [&](const auto& x) { return oracle::value(cand, x); });
            if (loss < best) {
                best = loss;
                best_l = l;
                best_r = rr;
            }
        }
    CHECK(std::abs(best_l - 0.0) <= 0.05);
    CHECK(std::abs(best_r - 8.0 / 3.0) <= 0.05);
}

TEST_CASE("refit_tree_mse: complete data gives leaf means; large lambda shrinks to zero") {
    Rng rng(52);
    const std::vector<int> cards{3, 2};
    const auto d = oracle::random_density(rng, cards, 2);
    const auto t = oracle::random_tree(rng, cards, 2);
    const Dataset ds = oracle::random_dataset(rng, cards, 80, 1.0);
    const auto r = refit_tree_mse(t, d, ds, 0.0);
    std::map<int, std::pair<double, double>> acc;
    for (const auto& row : ds.rows()) {
        auto& [s, n] = acc[oracle::walk(t, row.x)];
        s += *row.y;
        n += 1.0;
    }
    for (int leaf : t.leaf_ids()) {
        if (acc.count(leaf))
            CHECK(std::abs(r.tree.theta(leaf) - acc[leaf].first / acc[leaf].second) <= 1e-12);
        else
            CHECK(r.tree.theta(leaf) == t.theta(leaf));
    }
    for (double v : refit_tree_mse(t, d, ds, 1e12).tree.thetas()) CHECK(std::abs(v) < 1e-9);
    CHECK_THROWS_AS(refit_tree_mse(t, d, ds, -1.0), Error);
}

TEST_CASE("refit_tree_mse: zero-weight leaves are kept and reported") {
    // Leaf 2 has an empty branch set, so no row can reach it.
    TreeNode root;
    root.feature = 0;
    root.branches = {mask_of({0, 1}), ConstraintSet::Mask{0}};
    root.children = {1, 2};
    TreeNode a, b;
    a.theta = 1.0;
    b.theta = 42.0;
    const TreeModel t({2}, {root, a, b}, Coverage::kAllowGaps);
    const MixtureDensity d({2}, {1.0}, {{{0.5, 0.5}}});
    const Dataset ds(one_binary(), {{PartialAssignment(V{0}), 3.0}, {PartialAssignment(V{kMissing}), 5.0},
                                    {PartialAssignment(V{1}), std::nullopt}});
    const auto r = refit_tree_mse(t, d, ds, 0.0);
    CHECK(r.tree.theta(2) == 42.0);
    CHECK(r.report.skipped_leaves == std::vector<int>{2});
    CHECK(r.report.dropped_rows == 1);
    CHECK(r.tree.theta(1) == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("refit_tree_mse: stationarity, optimality and lambda monotonicity") {
    Rng rng(53);
    for (int trial = 0; trial < 150; ++trial) {
        auto in = random_instance(rng);
        const auto r = refit_tree_mse(in.t, in.d, in.ds, 0.0);
        const auto th = r.tree.thetas();
        const double base = expected_mse(r.tree, in.d, in.ds);
        REQUIRE(base <= expected_mse(in.t, in.d, in.ds) + 1e-9);
        REQUIRE(r.report.expected_loss_after <= r.report.expected_loss_before + 1e-9);
        for (std::size_t i = 0; i < th.size(); ++i) {
            auto up = th, down = th;
            up[i] += 1e-5;
            down[i] -= 1e-5;
            const double grad = (expected_mse(r.tree.with_thetas(up), in.d, in.ds) -
                                 expected_mse(r.tree.with_thetas(down), in.d, in.ds)) / 2e-5;
            REQUIRE(std::abs(grad) <= 1e-6);
            up[i] = th[i] + 0.1;
            down[i] = th[i] - 0.1;
            REQUIRE(base <= expected_mse(r.tree.with_thetas(up), in.d, in.ds) + 1e-12);
            REQUIRE(base <= expected_mse(r.tree.with_thetas(down), in.d, in.ds) + 1e-12);
        }
        double prev = norm2(th);
        for (double lambda : {0.01, 0.1, 1.0, 10.0, 100.0}) {
            const double n = norm2(refit_tree_mse(in.t, in.d, in.ds, lambda).tree.thetas());
            REQUIRE(n <= prev + 1e-12);
            prev = n;
        }
    }
}

TEST_CASE("forest system: singleton forest, structure of M") {
    Rng rng(54);
    for (int trial = 0; trial < 100; ++trial) {
        auto in = random_instance(rng);
        const auto sys = build_forest_system(ForestModel(in.t), in.d, in.ds);
        for (std::size_t i = 0; i < sys.size; ++i)
            for (std::size_t j = 0; j < sys.size; ++j)
                if (i != j) REQUIRE(sys.at(i, j) == 0.0);
        const auto sol = solve_forest_system(sys, 0.0);
        const auto ref = refit_tree_mse(in.t, in.d, in.ds, 0.0).tree.thetas();
        for (std::size_t i = 0; i < sys.size; ++i) {
            if (sys.at(i, i) == 0.0) continue;
            REQUIRE(std::abs(sol.theta[i] - ref[i]) <= 1e-8);
        }
        const auto ridge = solve_forest_system(sys, 0.5);
        for (std::size_t i = 0; i < sys.size; ++i)
            REQUIRE(ridge.theta[i] == doctest::Approx(sys.b[i] / (sys.at(i, i) + 0.5)).epsilon(1e-12));
    }
}

TEST_CASE("forest system: two trees") {
    Rng rng(55);
    for (int trial = 0; trial < 60; ++trial) {
        auto in = random_instance(rng);
        const auto t2 = oracle::random_tree(rng, in.cards, 2);
        const ForestModel f({in.t, t2}, {1.0, 1.0});
        const auto sys = build_forest_system(f, in.d, in.ds);
        REQUIRE(sys.size == in.t.leaf_count() + t2.leaf_count());
        for (std::size_t i = 0; i < sys.size; ++i)
            for (std::size_t j = 0; j < sys.size; ++j) {
                REQUIRE(std::abs(sys.at(i, j) - sys.at(j, i)) <= 1e-12);
                REQUIRE(sys.at(i, j) >= 0.0);
                if (i != j && sys.leaves[i].tree == sys.leaves[j].tree) REQUIRE(sys.at(i, j) == 0.0);
            }
        // Diagonal equals the summed leaf weights; off-diagonal blocks the oracle pair mass.
        for (std::size_t i = 0; i < sys.size; ++i) {
            const auto& ti = f.tree(sys.leaves[i].tree);
            double diag = 0.0, b = 0.0;
            for (const auto& row : in.ds.rows()) {
                const double w = oracle::conditional_expectation(in.d, row.x, [&](const auto& x) {
                    return oracle::walk(ti, x) == sys.leaves[i].leaf_id ? 1.0 : 0.0;
                });
                diag += w;
                b += *row.y * w;
            }
            REQUIRE(std::abs(sys.at(i, i) - diag) <= 1e-10);
            REQUIRE(std::abs(sys.b[i] - b) <= 1e-10);
            for (std::size_t j = 0; j < sys.size; ++j) {
                if (sys.leaves[i].tree == sys.leaves[j].tree) continue;
                const auto& tj = f.tree(sys.leaves[j].tree);
                double pair = 0.0;
                for (const auto& row : in.ds.rows())
                    pair += oracle::conditional_expectation(in.d, row.x, [&](const auto& x) {
                        return oracle::walk(ti, x) == sys.leaves[i].leaf_id &&
                                       oracle::walk(tj, x) == sys.leaves[j].leaf_id
                                   ? 1.0
                                   : 0.0;
                    });
                REQUIRE(std::abs(sys.at(i, j) - pair) <= 1e-10);
            }
        }
        // The joint refit is at least as good as the original and as any per-tree refit.
        const auto joint = refit_forest_joint(f, in.d, in.ds, 0.0);
        REQUIRE(joint.expected_loss_after <= joint.expected_loss_before + 1e-9);
        REQUIRE(joint.expected_loss_after == doctest::Approx(expected_mse(joint.forest, in.d, in.ds)).epsilon(1e-12));
        const auto seq = refit_boosted_sequence(f, in.d, in.ds);
        REQUIRE(joint.expected_loss_after <= expected_mse(seq, in.d, in.ds) + 1e-7);
    }
}

TEST_CASE("forest system: two constant trees are rank deficient") {
    const std::vector<int> cards{2};
    const MixtureDensity d({2}, {1.0}, {{{0.3, 0.7}}});
    const Dataset ds(one_binary(), {{PartialAssignment(V{0}), 1.0}, {PartialAssignment(V{kMissing}), 3.0},
                                    {PartialAssignment(V{1}), 8.0}});
    const ForestModel f({TreeModel::constant(cards, 0.0), TreeModel::constant(cards, 0.0)}, {1.0, 1.0});
    const auto sys = build_forest_system(f, d, ds);
    REQUIRE(sys.size == 2);
    for (double v : sys.m) CHECK(v == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(sys.b[0] == doctest::Approx(12.0).epsilon(1e-15));

    const auto ridge = solve_forest_system(sys, 1e-6);
    CHECK(ridge.theta[0] == doctest::Approx(2.0).epsilon(1e-5));
    CHECK(ridge.theta[1] == doctest::Approx(2.0).epsilon(1e-5));
    CHECK_FALSE(ridge.fallback);

    const auto singular = solve_forest_system(sys, 0.0);
    CHECK(singular.fallback);
    CHECK(singular.lambda_used == doctest::Approx(1e-8 * 6.0 / 2.0).epsilon(1e-12));
    CHECK(singular.theta[0] + singular.theta[1] == doctest::Approx(4.0).epsilon(1e-6));

    for (double v : solve_forest_system(sys, 1e15).theta) CHECK(std::abs(v) < 1e-12);

    auto bad = sys;
    bad.m[1] = std::nan("");
    CHECK_THROWS_AS(solve_forest_system(bad, 0.0), Error);
    CHECK_THROWS_AS(solve_forest_system(sys, -1.0), Error);
}

TEST_CASE("forest system size guard") {
    Rng rng(56);
    auto in = random_instance(rng);
    const ForestModel f({in.t, in.t}, {1.0, 1.0});
    CHECK_THROWS_AS(build_forest_system(f, in.d, in.ds, 1), Error);
}

TEST_CASE("refit_boost_tree") {
    Rng rng(57);
    for (int trial = 0; trial < 100; ++trial) {
        auto in = random_instance(rng);
        // Base case is exact.
        const auto plain = refit_tree_mse(in.t, in.d, in.ds, 0.0);
        const auto base = refit_boost_tree(in.t, in.d, in.ds);
        REQUIRE(base.tree == plain.tree);
        REQUIRE(base.report.leaves.size() == plain.report.leaves.size());

        // A constant fixed tree equals refitting residuals.
        const double c = rng.normal() * 3.0;
        std::vector<Row> residual;
        for (const auto& row : in.ds.rows()) residual.push_back({row.x, *row.y - c});
        const Dataset shifted(in.ds.schema(), residual);
        const auto boosted = refit_boost_tree(ForestModel(TreeModel::constant(in.cards, c)), in.t, in.d, in.ds);
        const auto on_residuals = refit_tree_mse(in.t, in.d, shifted, 0.0);
        for (int leaf : in.t.leaf_ids())
            REQUIRE(std::abs(boosted.tree.theta(leaf) - on_residuals.tree.theta(leaf)) <= 1e-10);

        // Stationarity of the new tree's values given a random fixed tree.
        const auto fixed_tree = oracle::random_tree(rng, in.cards, 2);
        const ForestModel fixed(fixed_tree);
        const auto r = refit_boost_tree(fixed, in.t, in.d, in.ds);
        const auto th = r.tree.thetas();
        for (std::size_t i = 0; i < th.size(); ++i) {
            auto up = th, down = th;
            up[i] += 1e-5;
            down[i] -= 1e-5;
            const double g = (expected_mse(ForestModel({fixed_tree, r.tree.with_thetas(up)}, {1.0, 1.0}), in.d, in.ds) -
                              expected_mse(ForestModel({fixed_tree, r.tree.with_thetas(down)}, {1.0, 1.0}), in.d, in.ds)) /
                             2e-5;
            REQUIRE(std::abs(g) <= 1e-6);
        }
    }
}

TEST_CASE("refit_boost_tree on complete data gives residual means") {
    Rng rng(58);
    const std::vector<int> cards{3, 3};
    const auto d = oracle::random_density(rng, cards, 2);
    const auto first = oracle::random_tree(rng, cards, 2);
    const auto second = oracle::random_tree(rng, cards, 2);
    const Dataset ds = oracle::random_dataset(rng, cards, 100, 1.0);
    const auto r = refit_boost_tree(ForestModel(first), second, d, ds);
    std::map<int, std::pair<double, double>> acc;
    for (const auto& row : ds.rows()) {
        auto& [s, n] = acc[oracle::walk(second, row.x)];
        s += *row.y - oracle::value(first, row.x);
        n += 1.0;
    }
    for (const auto& [leaf, sn] : acc) CHECK(std::abs(r.tree.theta(leaf) - sn.first / sn.second) <= 1e-12);
}

TEST_CASE("refit_boosted_sequence folds weights and lowers the loss") {
    Rng rng(59);
    auto in = random_instance(rng, 30);
    const auto t2 = oracle::random_tree(rng, in.cards, 2);
    const ForestModel f({in.t, t2}, {0.5, 2.0});
    const auto out = refit_boosted_sequence(f, in.d, in.ds);
    REQUIRE(out.size() == 2);
    CHECK(out.omegas() == std::vector<double>{1.0, 1.0});
    auto folded = in.t.thetas();
    for (double& v : folded) v *= 0.5;
    CHECK(out.tree(0) == refit_tree_mse(in.t.with_thetas(folded), in.d, in.ds, 0.0).tree);
    CHECK(expected_mse(out, in.d, in.ds) <= expected_mse(f, in.d, in.ds) + 1e-9);
}

TEST_CASE("refit_bagging and bootstrap") {
    Rng rng(60);
    auto in = random_instance(rng, 20);
    const ForestModel single(in.t);
    const std::vector<MixtureDensity> ds1{in.d};
    const std::vector<Dataset> data1{in.ds};
    CHECK(refit_bagging(single, ds1, data1).tree(0) == refit_tree_mse(in.t, in.d, in.ds).tree);

    const auto t2 = oracle::random_tree(rng, in.cards, 2);
    const ForestModel two({in.t, t2}, {0.5, 0.5});
    const std::vector<MixtureDensity> dens{in.d, in.d};
    const auto b1 = bootstrap_sample(in.ds, 7);
    const auto b2 = bootstrap_sample(in.ds, 8);
    CHECK(bootstrap_sample(in.ds, 7) == b1);
    CHECK(b1.size() == in.ds.size());
    const std::vector<Dataset> boots{b1, b2};
    const auto bag = refit_bagging(two, dens, boots, 0.1);
    CHECK(bag.tree(0) == refit_tree_mse(in.t, in.d, b1, 0.1).tree);
    CHECK(bag.tree(1) == refit_tree_mse(t2, in.d, b2, 0.1).tree);
    CHECK(bag.omegas() == two.omegas());
    CHECK(refit_bagging(two, dens, boots, 0.1) == bag);

    const std::vector<Dataset> same{in.ds, in.ds};
    const auto iso = refit_bagging(two, dens, same);
    CHECK(iso.tree(1) == refit_tree_mse(t2, in.d, in.ds).tree);
    CHECK_THROWS_AS(refit_bagging(two, ds1, data1), Error);
}
