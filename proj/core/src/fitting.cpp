#include "exptree/fitting.hpp"

#include <cmath>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "exptree/error.hpp"
#include "exptree/expectation.hpp"
#include "exptree/random.hpp"

namespace exptree {

namespace {

Evidence row_evidence(const MixtureDensity& d, const Dataset& ds, std::size_t i) {
    try {
        return make_evidence(d, ds[i].x);
    } catch (const Error& e) {
        throw Error("row " + std::to_string(i) + ": " + e.what());
    }
}

double row_target(const Dataset& ds, std::size_t i) {
    if (!ds[i].y) throw Error("row " + std::to_string(i) + ": missing target");
    return *ds[i].y;
}

void check_rows(const Dataset& ds) {
    if (ds.empty()) throw Error("expected loss needs at least one row");
}

// Tree weights folded into leaf values.
TreeModel scaled(const TreeModel& t, double omega) {
    if (omega == 1.0) return t;
    auto th = t.thetas();
    for (double& v : th) v *= omega;
    return t.with_thetas(th);
}

// Shared closed form for plain and boosted refits. With no fixed trees the cross term
// is exactly 0.0, so the boosted base case reproduces the plain refit bit for bit.
TreeRefit refit_core(const TreeModel& t, std::span<const TreeModel> fixed,
                     std::span<const double> omegas, const MixtureDensity& d, const Dataset& input,
                     double lambda) {
    if (!(lambda >= 0.0)) throw Error("lambda must be non-negative");
    auto [ds, dropped] = input.with_targets();
    check_rows(ds);

    const std::size_t L = t.leaf_count();
    std::vector<double> num(L, 0.0), den(L, 0.0);
    std::vector<std::vector<double>> fixed_thetas;
    for (const auto& f : fixed) fixed_thetas.push_back(f.thetas());

    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double y = *ds[i].y;
        const Evidence ev = row_evidence(d, ds, i);
        const auto w = leaf_weights(t, d, ev);
        std::vector<double> cross(L, 0.0);
        for (std::size_t r = 0; r < fixed.size(); ++r) {
            const auto pw = pair_weights(t, fixed[r], d, ev);
            const auto& th = fixed_thetas[r];
            for (std::size_t l = 0; l < L; ++l) {
                double s = 0.0;
                for (std::size_t j = 0; j < th.size(); ++j) s += th[j] * pw[l * th.size() + j];
                cross[l] += omegas[r] * s;
            }
        }
        for (std::size_t l = 0; l < L; ++l) {
            num[l] += y * w[l] - cross[l];
            den[l] += w[l];
        }
    }

    TreeRefit out;
    out.report.dropped_rows = dropped;
    auto thetas = t.thetas();
    for (std::size_t l = 0; l < L; ++l) {
        const int id = t.leaf_ids()[l];
        LeafRefit leaf{id, thetas[l], thetas[l], den[l]};
        if (lambda + den[l] > 0.0) {
            leaf.new_theta = num[l] / (lambda + den[l]);
        } else {
            out.report.skipped_leaves.push_back(id);
        }
        thetas[l] = leaf.new_theta;
        out.report.leaves.push_back(leaf);
    }
    out.tree = t.with_thetas(thetas);

    if (fixed.empty()) {
        out.report.expected_loss_before = expected_mse(t, d, ds);
        out.report.expected_loss_after = expected_mse(out.tree, d, ds);
    } else {
        std::vector<TreeModel> trees(fixed.begin(), fixed.end());
        std::vector<double> w(omegas.begin(), omegas.end());
        trees.push_back(t);
        w.push_back(1.0);
        out.report.expected_loss_before = expected_mse(ForestModel(trees, w), d, ds);
        trees.back() = out.tree;
        out.report.expected_loss_after = expected_mse(ForestModel(trees, w), d, ds);
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------

double expected_mse(const TreeModel& t, const MixtureDensity& d, const Dataset& ds) {
    check_rows(ds);
    const auto th = t.thetas();
    double total = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double y = row_target(ds, i);
        const auto w = leaf_weights(t, d, row_evidence(d, ds, i));
        double e1 = 0.0, e2 = 0.0;
        for (std::size_t l = 0; l < th.size(); ++l) {
            e1 += th[l] * w[l];
            e2 += th[l] * th[l] * w[l];
        }
        total += y * y - 2.0 * y * e1 + e2;
    }
    return total / static_cast<double>(ds.size());
}

double expected_mse(const ForestModel& forest, const MixtureDensity& d, const Dataset& ds) {
    check_rows(ds);
    double total = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double y = row_target(ds, i);
        row_evidence(d, ds, i);
        const double e1 = expected_prediction_forest(forest, d, ds[i].x);
        const double e2 = expected_squared_prediction_forest(forest, d, ds[i].x);
        total += y * y - 2.0 * y * e1 + e2;
    }
    return total / static_cast<double>(ds.size());
}

TreeRefit refit_tree_mse(const TreeModel& t, const MixtureDensity& d, const Dataset& ds,
                         double lambda) {
    return refit_core(t, {}, {}, d, ds, lambda);
}

TreeRefit refit_boost_tree(const ForestModel& fixed, const TreeModel& t_new, const MixtureDensity& d,
                           const Dataset& ds) {
    return refit_core(t_new, fixed.trees(), fixed.omegas(), d, ds, 0.0);
}

TreeRefit refit_boost_tree(const TreeModel& t_new, const MixtureDensity& d, const Dataset& ds) {
    return refit_core(t_new, {}, {}, d, ds, 0.0);
}

ForestModel refit_boosted_sequence(const ForestModel& forest, const MixtureDensity& d,
                                   const Dataset& ds) {
    std::vector<TreeModel> done;
    std::vector<double> ones;
    for (std::size_t r = 0; r < forest.size(); ++r) {
        const TreeModel t = scaled(forest.tree(r), forest.omega(r));
        auto fit = refit_core(t, done, ones, d, ds, 0.0);
        done.push_back(std::move(fit.tree));
        ones.push_back(1.0);
    }
    return ForestModel(std::move(done), std::move(ones));
}

ForestModel refit_bagging(const ForestModel& forest, std::span<const MixtureDensity> densities,
                          std::span<const Dataset> datasets, double lambda) {
    if (densities.size() != forest.size() || datasets.size() != forest.size())
        throw Error("bagging refit needs one density and one dataset per tree");
    std::vector<TreeModel> trees;
    for (std::size_t r = 0; r < forest.size(); ++r)
        trees.push_back(refit_tree_mse(forest.tree(r), densities[r], datasets[r], lambda).tree);
    return ForestModel(std::move(trees), forest.omegas());
}

Dataset bootstrap_sample(const Dataset& ds, std::uint64_t seed) {
    if (ds.empty()) throw Error("cannot bootstrap an empty dataset");
    Rng rng(seed);
    std::vector<Row> rows;
    rows.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) rows.push_back(ds[rng.index(ds.size())]);
    return Dataset(ds.schema(), std::move(rows));
}

// ---------------------------------------------------------------------------

ForestSystem build_forest_system(const ForestModel& forest, const MixtureDensity& d,
                                 const Dataset& input, std::size_t max_leaves) {
    if (forest.total_leaves() > max_leaves)
        throw Error("forest has " + std::to_string(forest.total_leaves()) +
                    " leaves, above the joint-refit limit of " + std::to_string(max_leaves));
    auto [ds, dropped] = input.with_targets();
    check_rows(ds);

    ForestSystem sys;
    sys.dropped_rows = dropped;
    std::vector<std::size_t> offset;
    for (std::size_t r = 0; r < forest.size(); ++r) {
        offset.push_back(sys.leaves.size());
        for (int id : forest.tree(r).leaf_ids()) sys.leaves.push_back({r, id});
    }
    const std::size_t n = sys.leaves.size();
    sys.size = n;
    sys.m.assign(n * n, 0.0);
    sys.b.assign(n, 0.0);

    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double y = *ds[i].y;
        const Evidence ev = row_evidence(d, ds, i);
        for (std::size_t r = 0; r < forest.size(); ++r) {
            const auto& tr = forest.tree(r);
            const auto w = leaf_weights(tr, d, ev);
            for (std::size_t l = 0; l < w.size(); ++l) {
                sys.m[(offset[r] + l) * n + offset[r] + l] += w[l];
                sys.b[offset[r] + l] += y * w[l];
            }
            for (std::size_t q = r + 1; q < forest.size(); ++q) {
                const auto& tq = forest.tree(q);
                const auto pw = pair_weights(tr, tq, d, ev);
                for (std::size_t a = 0; a < tr.leaf_count(); ++a) {
                    for (std::size_t c = 0; c < tq.leaf_count(); ++c) {
                        const double v = pw[a * tq.leaf_count() + c];
                        sys.m[(offset[r] + a) * n + offset[q] + c] += v;
                        sys.m[(offset[q] + c) * n + offset[r] + a] += v;
                    }
                }
            }
        }
    }
    return sys;
}

SystemSolution solve_forest_system(const ForestSystem& sys, double lambda) {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error("lambda must be finite and non-negative");
    const std::size_t n = sys.size;
    if (sys.m.size() != n * n || sys.b.size() != n) throw Error("malformed forest system");
    for (double v : sys.m)
        if (!std::isfinite(v)) throw Error("forest system has non-finite entries");
    for (double v : sys.b)
        if (!std::isfinite(v)) throw Error("forest system has non-finite entries");

    SystemSolution out;
    out.theta.assign(n, 0.0);
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < n; ++i) {
        if (sys.at(i, i) > 0.0)
            active.push_back(i);
        else
            out.inactive.push_back(i);
    }
    out.lambda_used = lambda;
    if (active.empty()) return out;

    const auto k = static_cast<Eigen::Index>(active.size());
    Eigen::MatrixXd m(k, k);
    Eigen::VectorXd b(k);
    double trace = 0.0, max_diag = 0.0;
    for (Eigen::Index a = 0; a < k; ++a) {
        b(a) = sys.b[active[a]];
        for (Eigen::Index c = 0; c < k; ++c) m(a, c) = sys.at(active[a], active[c]);
        trace += m(a, a);
        max_diag = std::max(max_diag, m(a, a));
    }

    auto factor = [&](double lam) {
        Eigen::MatrixXd shifted = m;
        shifted.diagonal().array() += lam;
        return Eigen::LLT<Eigen::MatrixXd>(shifted);
    };
    auto llt = factor(lambda);
    bool singular = llt.info() != Eigen::Success;
    if (!singular && lambda == 0.0) {
        const Eigen::VectorXd diag = llt.matrixL().toDenseMatrix().diagonal();
        singular = diag.array().square().minCoeff() <= 1e-12 * max_diag;
    }
    if (singular) {
        if (lambda > 0.0) throw Error("forest system is not positive definite");
        out.lambda_used = 1e-8 * trace / static_cast<double>(k);
        out.fallback = true;
        llt = factor(out.lambda_used);
        if (llt.info() != Eigen::Success) throw Error("forest system could not be factored");
    }
    const Eigen::VectorXd x = llt.solve(b);
    for (Eigen::Index a = 0; a < k; ++a) out.theta[active[a]] = x(a);
    return out;
}

ForestRefit refit_forest_joint(const ForestModel& forest, const MixtureDensity& d, const Dataset& ds,
                               double lambda, std::size_t max_leaves) {
    const auto sys = build_forest_system(forest, d, ds, max_leaves);
    ForestRefit out;
    out.solution = solve_forest_system(sys, lambda);

    std::vector<TreeModel> trees;
    std::vector<std::vector<double>> thetas;
    for (std::size_t r = 0; r < forest.size(); ++r) {
        trees.push_back(scaled(forest.tree(r), forest.omega(r)));
        thetas.push_back(trees.back().thetas());
    }
    std::vector<char> inactive(sys.size, 0);
    for (auto i : out.solution.inactive) inactive[i] = 1;
    for (std::size_t i = 0; i < sys.size; ++i) {
        if (inactive[i]) continue;
        const auto& leaf = sys.leaves[i];
        thetas[leaf.tree][trees[leaf.tree].leaf_index(leaf.leaf_id)] = out.solution.theta[i];
    }
    for (std::size_t r = 0; r < trees.size(); ++r) trees[r] = trees[r].with_thetas(thetas[r]);

    auto [labeled, dropped] = ds.with_targets();
    out.forest = ForestModel(std::move(trees), std::vector<double>(forest.size(), 1.0));
    out.expected_loss_before = expected_mse(forest, d, labeled);
    out.expected_loss_after = expected_mse(out.forest, d, labeled);
    return out;
}

}  // namespace exptree
