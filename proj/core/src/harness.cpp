#include "exptree/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "exptree/error.hpp"
#include "exptree/expectation.hpp"
#include "exptree/fitting.hpp"
#include "exptree/io.hpp"

namespace exptree {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Baselines and metrics

std::vector<int> median_impute_fit(const Dataset& train) {
    const auto& schema = train.schema();
    std::vector<int> fills(schema.size(), 0);
    for (std::size_t f = 0; f < schema.size(); ++f) {
        std::vector<std::size_t> counts(static_cast<std::size_t>(schema[f].cardinality), 0);
        std::size_t n = 0;
        for (const auto& row : train.rows()) {
            if (!row.x.observed(f)) continue;
            ++counts[static_cast<std::size_t>(row.x[f])];
            ++n;
        }
        if (n == 0) throw Error("feature '" + schema[f].name + "' has no observed training value");
        // Lower median: the value at sorted position (n - 1) / 2.
        const std::size_t target = (n - 1) / 2;
        std::size_t seen = 0;
        for (std::size_t v = 0; v < counts.size(); ++v) {
            seen += counts[v];
            if (seen > target) {
                fills[f] = static_cast<int>(v);
                break;
            }
        }
    }
    return fills;
}

PartialAssignment impute(const PartialAssignment& x, std::span<const int> fills) {
    if (fills.size() != x.size()) throw Error("fill vector does not match the assignment");
    PartialAssignment out = x;
    for (std::size_t f = 0; f < x.size(); ++f)
        if (!x.observed(f)) out[f] = fills[f];
    return out;
}

double rmse(std::span<const double> predictions, std::span<const double> targets) {
    if (predictions.size() != targets.size()) throw Error("rmse: length mismatch");
    if (predictions.empty()) throw Error("rmse: no predictions");
    double s = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double e = predictions[i] - targets[i];
        s += e * e;
    }
    return std::sqrt(s / static_cast<double>(predictions.size()));
}

// ---------------------------------------------------------------------------
// Synthetic data

PartialAssignment sample_assignment(const MixtureDensity& d, Rng& rng) {
    auto pick = [&](std::span<const double> probs) {
        const double u = rng.uniform();
        double acc = 0.0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) return static_cast<int>(i);
        }
        return static_cast<int>(probs.size() - 1);
    };
    const auto k = static_cast<std::size_t>(pick(d.weights()));
    PartialAssignment x(d.features());
    for (std::size_t f = 0; f < d.features(); ++f) x[f] = pick(d.table(k, f));
    return x;
}

namespace {

std::vector<double> random_distribution(Rng& rng, int n, double sharpness) {
    std::vector<double> p(static_cast<std::size_t>(n));
    double s = 0.0;
    for (double& v : p) {
        v = std::pow(rng.uniform(), sharpness) + 1e-3;
        s += v;
    }
    for (double& v : p) v /= s;
    return p;
}

void plant(Rng& rng, const std::vector<int>& cards, int depth, double scale,
           std::vector<TreeNode>& nodes) {
    const int self = static_cast<int>(nodes.size());
    nodes.emplace_back();
    if (depth == 0) {
        nodes[self].theta = scale * (2.0 * rng.uniform() - 1.0);
        return;
    }
    TreeNode nd;
    nd.feature = static_cast<int>(rng.index(cards.size()));
    const int card = cards[static_cast<std::size_t>(nd.feature)];
    const auto full = ConstraintSet::full_mask(card);
    // Category 0 on the left; at least one other category on the right.
    ConstraintSet::Mask left = 1;
    for (int v = 1; v < card; ++v)
        if (rng.uniform() < 0.5) left |= ConstraintSet::Mask{1} << v;
    if (left == full) left &= ~(ConstraintSet::Mask{1} << (1 + rng.index(card - 1)));
    nd.branches = {left, full & ~left};
    nd.children.push_back(static_cast<int>(nodes.size()));
    plant(rng, cards, depth - 1, scale, nodes);
    nd.children.push_back(static_cast<int>(nodes.size()));
    plant(rng, cards, depth - 1, scale, nodes);
    nodes[self] = std::move(nd);
}

}  // namespace

SynthData generate_synthetic(const SynthOptions& opts) {
    if (opts.features < 1 || opts.components < 1 || opts.min_cardinality < 2 ||
        opts.max_cardinality < opts.min_cardinality || opts.max_cardinality > kMaxCardinality ||
        opts.tree_depth < 0 || opts.n_train == 0)
        throw Error("invalid synthetic data options");
    Rng rng(opts.seed);

    BinningSpec enc;
    enc.target_name = "y";
    std::vector<int> cards;
    for (int f = 0; f < opts.features; ++f) {
        const int span = opts.max_cardinality - opts.min_cardinality + 1;
        const int card = opts.min_cardinality + static_cast<int>(rng.index(static_cast<std::size_t>(span)));
        cards.push_back(card);
        ColumnEncoding c;
        c.name = "x" + std::to_string(f);
        c.kind = ColumnKind::kCategorical;
        c.cardinality = card;
        for (int v = 0; v < card; ++v) c.categories.push_back(std::to_string(v));
        enc.columns.push_back(std::move(c));
    }

    std::vector<double> weights = random_distribution(rng, opts.components, 1.0);
    std::vector<std::vector<std::vector<double>>> tables(static_cast<std::size_t>(opts.components));
    for (auto& comp : tables)
        for (int card : cards) comp.push_back(random_distribution(rng, card, opts.sharpness));
    MixtureDensity density(cards, std::move(weights), std::move(tables));

    std::vector<TreeNode> nodes;
    plant(rng, cards, opts.tree_depth, opts.leaf_scale, nodes);
    TreeModel planted(cards, std::move(nodes));

    auto draw = [&](std::size_t n) {
        std::vector<Row> rows;
        rows.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            auto x = sample_assignment(density, rng);
            const double y = evaluate(planted, x, MissingPolicy::kError) + opts.noise * rng.normal();
            rows.push_back({std::move(x), y});
        }
        return Dataset(enc.schema(), std::move(rows));
    };
    Dataset train = draw(opts.n_train);
    Dataset test = draw(opts.n_test);
    return {std::move(train), std::move(test), std::move(enc), std::move(density), std::move(planted)};
}

// ---------------------------------------------------------------------------
// Density selection

DensityFit fit_density(const Dataset& train, const DensityOptions& opts, std::uint64_t seed) {
    auto em = [&](const Dataset& ds, int k) {
        EmOptions o;
        o.components = k;
        o.max_iters = opts.max_iters;
        o.epsilon = opts.epsilon;
        o.rel_tol = opts.rel_tol;
        o.seed = seed;
        return em_fit(ds, o).density;
    };

    DensityFit out;
    if (opts.components > 0) {
        out.components = opts.components;
        out.density = em(train, opts.components);
        return out;
    }
    if (opts.k_grid.empty()) throw Error("empty component grid");

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(seed, 0x5eed));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    const auto n_val = static_cast<std::size_t>(opts.validation_fraction * static_cast<double>(train.size()));
    if (n_val == 0 || n_val >= train.size()) throw Error("training set too small for K selection");
    std::vector<Row> fit_rows, val_rows;
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < n_val ? val_rows : fit_rows).push_back(train[order[i]]);
    const Dataset fit_ds(train.schema(), std::move(fit_rows));
    const Dataset val_ds(train.schema(), std::move(val_rows));

    double best = -std::numeric_limits<double>::infinity();
    for (int k : opts.k_grid) {
        const double ll = log_likelihood(em(fit_ds, k), val_ds);
        out.validation.emplace_back(k, ll);
        if (ll > best) {
            best = ll;
            out.components = k;
        }
    }
    out.density = em(train, out.components);
    return out;
}

// ---------------------------------------------------------------------------
// Config

std::string_view method_name(Method m) {
    switch (m) {
        case Method::kDefaultBranch: return "default_branch";
        case Method::kMedianImpute: return "median_impute";
        case Method::kExpectedPrediction: return "expected_prediction";
        case Method::kExpLossExpectedPrediction: return "exploss_expected_prediction";
    }
    return "unknown";
}

Method method_from_name(std::string_view name) {
    for (Method m : {Method::kDefaultBranch, Method::kMedianImpute, Method::kExpectedPrediction,
                     Method::kExpLossExpectedPrediction})
        if (method_name(m) == name) return m;
    throw Error("unknown method '" + std::string(name) + "'");
}

void ExperimentConfig::validate() const {
    for (double p : pis)
        if (!(p >= 0.0 && p <= 1.0)) throw Error("missingness level " + format_double(p) + " not in [0, 1]");
    if (trials < 1) throw Error("trials must be at least 1");
    if (!(lambda >= 0.0)) throw Error("lambda must be non-negative");
    if (train_path.has_value() != test_path.has_value())
        throw Error("train and test paths must be given together");
    if (!train_path && !synthetic) throw Error("config needs train/test paths or a synthetic block");
    if (model.dump_path && !train_path && !synthetic) throw Error("a dump needs an encoding");
    if (!model.dump_path && model.trees < 1) throw Error("model.trees must be at least 1");
}

namespace {

std::string resolve(const std::string& base, const std::string& p) {
    if (base.empty() || std::filesystem::path(p).is_absolute()) return p;
    return (std::filesystem::path(base) / p).string();
}

}  // namespace

ExperimentConfig config_from_json(std::string_view text, const std::string& base_dir) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(std::string("config is not valid JSON: ") + e.what());
    }
    ExperimentConfig cfg;
    try {
        if (doc.contains("train")) cfg.train_path = resolve(base_dir, doc.at("train").get<std::string>());
        if (doc.contains("test")) cfg.test_path = resolve(base_dir, doc.at("test").get<std::string>());
        if (doc.contains("encoding"))
            cfg.encoding_path = resolve(base_dir, doc.at("encoding").get<std::string>());
        cfg.target = doc.value("target", cfg.target);
        cfg.categorical = doc.value("categorical", cfg.categorical);
        cfg.max_bins = doc.value("max_bins", cfg.max_bins);
        if (doc.contains("synthetic")) {
            const auto& j = doc.at("synthetic");
            SynthOptions s;
            s.n_train = j.value("n_train", s.n_train);
            s.n_test = j.value("n_test", s.n_test);
            s.features = j.value("features", s.features);
            s.min_cardinality = j.value("min_cardinality", s.min_cardinality);
            s.max_cardinality = j.value("max_cardinality", s.max_cardinality);
            s.components = j.value("components", s.components);
            s.sharpness = j.value("sharpness", s.sharpness);
            s.tree_depth = j.value("tree_depth", s.tree_depth);
            s.leaf_scale = j.value("leaf_scale", s.leaf_scale);
            s.noise = j.value("noise", s.noise);
            s.seed = j.value("seed", s.seed);
            cfg.synthetic = s;
        }
        const auto scenario = doc.value("scenario", std::string("deployment"));
        if (scenario == "deployment")
            cfg.scenario = Scenario::kDeployment;
        else if (scenario == "learn_and_deploy")
            cfg.scenario = Scenario::kLearnAndDeploy;
        else
            throw Error("unknown scenario '" + scenario + "'");
        cfg.pis = doc.value("pi", cfg.pis);
        cfg.trials = doc.value("trials", cfg.trials);
        cfg.seed = doc.value("seed", cfg.seed);
        if (doc.contains("density")) {
            const auto& j = doc.at("density");
            if (j.contains("k")) {
                const auto& k = j.at("k");
                cfg.density.components = k.is_string() && k.get<std::string>() == "auto" ? 0 : k.get<int>();
            }
            cfg.density.k_grid = j.value("k_grid", cfg.density.k_grid);
            cfg.density.validation_fraction = j.value("validation_fraction", cfg.density.validation_fraction);
            cfg.density.max_iters = j.value("iters", cfg.density.max_iters);
            cfg.density.epsilon = j.value("epsilon", cfg.density.epsilon);
            cfg.density.rel_tol = j.value("tol", cfg.density.rel_tol);
        }
        if (doc.contains("model")) {
            const auto& j = doc.at("model");
            if (j.contains("dump")) cfg.model.dump_path = resolve(base_dir, j.at("dump").get<std::string>());
            cfg.model.trees = j.value("trees", cfg.model.trees);
            cfg.model.induce.max_depth = j.value("max_depth", cfg.model.induce.max_depth);
            cfg.model.induce.min_leaf = j.value("min_leaf", cfg.model.induce.min_leaf);
            cfg.model.induce.lambda = j.value("lambda", cfg.model.induce.lambda);
            cfg.model.learning_rate = j.value("learning_rate", cfg.model.learning_rate);
        }
        if (doc.contains("methods")) {
            cfg.methods.clear();
            for (const auto& m : doc.at("methods")) cfg.methods.push_back(method_from_name(m.get<std::string>()));
        }
        cfg.lambda = doc.value("lambda", cfg.lambda);
        const auto refit = doc.value("forest_refit", std::string("boosted"));
        if (refit == "boosted")
            cfg.forest_refit = ForestRefitMode::kBoosted;
        else if (refit == "joint")
            cfg.forest_refit = ForestRefitMode::kJoint;
        else
            throw Error("unknown forest_refit '" + refit + "'");
        if (doc.contains("output")) cfg.output = resolve(base_dir, doc.at("output").get<std::string>());
    } catch (const json::exception& e) {
        throw Error(std::string("malformed config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Experiment

namespace {

struct Inputs {
    Dataset train;
    Dataset test;
    BinningSpec encoding;
};

Inputs load_inputs(const ExperimentConfig& cfg) {
    if (!cfg.train_path) {
        auto s = generate_synthetic(*cfg.synthetic);
        return {std::move(s.train), std::move(s.test), std::move(s.encoding)};
    }
    const RawTable train_raw = load_raw_csv(*cfg.train_path);
    BinningSpec enc;
    Dataset train;
    if (cfg.encoding_path) {
        enc = encoding_from_json(read_file(*cfg.encoding_path));
        train = apply_encoding(train_raw, enc);
    } else {
        std::set<std::string> cats(cfg.categorical.begin(), cfg.categorical.end());
        std::tie(train, enc) = discretize(train_raw, cfg.target, cfg.max_bins, cats);
    }
    Dataset test = apply_encoding(load_raw_csv(*cfg.test_path), enc);
    return {std::move(train), std::move(test), std::move(enc)};
}

ForestModel obtain_model(const ExperimentConfig& cfg, const Dataset& train, const BinningSpec& enc) {
    if (cfg.model.dump_path) return parse_dump(read_file(*cfg.model.dump_path), enc).forest;
    if (cfg.model.trees == 1) return ForestModel(induce_tree(train, cfg.model.induce));
    BoostOptions b;
    b.tree = cfg.model.induce;
    b.rounds = cfg.model.trees - 1;
    b.learning_rate = cfg.model.learning_rate;
    return induce_boosted_forest(train, b);
}

ForestModel expected_loss_refit(const ExperimentConfig& cfg, const ForestModel& model,
                                const MixtureDensity& d, const Dataset& train) {
    if (model.size() == 1) {
        TreeModel t = model.tree(0);
        if (model.omega(0) != 1.0) {
            auto th = t.thetas();
            for (double& v : th) v *= model.omega(0);
            t = t.with_thetas(th);
        }
        return ForestModel(refit_tree_mse(t, d, train, cfg.lambda).tree);
    }
    if (cfg.forest_refit == ForestRefitMode::kJoint) return refit_forest_joint(model, d, train, cfg.lambda).forest;
    return refit_boosted_sequence(model, d, train);
}

struct Fitted {
    MixtureDensity density;
    int components = 0;
    ForestModel model;
    std::optional<ForestModel> refit;
    std::vector<int> fills;
};

Fitted fit_all(const ExperimentConfig& cfg, const Dataset& train, const BinningSpec& enc,
               std::uint64_t density_seed) {
    auto dfit = fit_density(train, cfg.density, density_seed);
    Fitted out{std::move(dfit.density), dfit.components, obtain_model(cfg, train, enc), std::nullopt,
               median_impute_fit(train)};
    if (std::find(cfg.methods.begin(), cfg.methods.end(), Method::kExpLossExpectedPrediction) !=
        cfg.methods.end())
        out.refit = expected_loss_refit(cfg, out.model, out.density, train);
    return out;
}

double predict(Method m, const Fitted& fit, const PartialAssignment& x) {
    switch (m) {
        case Method::kDefaultBranch:
            return evaluate_forest(fit.model, x, MissingPolicy::kDefaultBranch);
        case Method::kMedianImpute:
            return evaluate_forest(fit.model, impute(x, fit.fills), MissingPolicy::kDefaultBranch);
        case Method::kExpectedPrediction:
            return expected_prediction_forest(fit.model, fit.density, x);
        case Method::kExpLossExpectedPrediction:
            return expected_prediction_forest(*fit.refit, fit.density, x);
    }
    throw Error("unknown method");
}

}  // namespace

std::vector<Summary> summarize(std::span<const TrialResult> details, std::span<const Method> method_order) {
    std::vector<Summary> out;
    for (Method m : method_order) {
        std::vector<double> pis;
        for (const auto& d : details)
            if (d.method == m && std::find(pis.begin(), pis.end(), d.pi) == pis.end()) pis.push_back(d.pi);
        for (double pi : pis) {
            std::vector<double> v;
            for (const auto& d : details)
                if (d.method == m && d.pi == pi) v.push_back(d.rmse);
            const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
            double ss = 0.0;
            for (double x : v) ss += (x - mean) * (x - mean);
            out.push_back({m, pi, mean, std::sqrt(ss / static_cast<double>(v.size())),
                           static_cast<int>(v.size())});
        }
    }
    return out;
}

RunReport run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const Inputs in = load_inputs(cfg);
    auto [test_full, test_dropped] = in.test.with_targets();
    if (test_full.empty()) throw Error("test set has no labeled rows");
    std::vector<double> targets;
    for (const auto& r : test_full.rows()) targets.push_back(*r.y);

    RunReport report;
    report.seed = cfg.seed;
    std::map<Method, std::vector<TrialResult>> by_method;

    const std::uint64_t shared_density_seed = mix_seed(cfg.seed, 0xde5);
    std::optional<Fitted> shared;
    if (cfg.scenario == Scenario::kDeployment) shared = fit_all(cfg, in.train, in.encoding, shared_density_seed);

    for (std::size_t pi_index = 0; pi_index < cfg.pis.size(); ++pi_index) {
        const double pi = cfg.pis[pi_index];
        for (int trial = 0; trial < cfg.trials; ++trial) {
            const std::uint64_t base = mix_seed(cfg.seed, pi_index * 1000003ULL + static_cast<std::uint64_t>(trial));
            TrialMeta meta{pi, trial, mix_seed(base, 1), mix_seed(base, 2),
                           shared ? shared_density_seed : mix_seed(base, 3), 0, {}, {}};
            try {
                std::optional<Fitted> local;
                if (!shared) {
                    const Dataset train = inject_mcar(in.train, pi, meta.train_mask_seed);
                    local = fit_all(cfg, train, in.encoding, meta.density_seed);
                }
                const Fitted& fit = shared ? *shared : *local;
                meta.components = fit.components;
                meta.model_hash = fingerprint(model_to_json(fit.model));
                meta.density_hash = fingerprint(density_to_json(fit.density));

                const Dataset test = inject_mcar(test_full, pi, meta.test_mask_seed);
                std::vector<TrialResult> results;
                for (Method m : cfg.methods) {
                    std::vector<double> preds;
                    preds.reserve(test.size());
                    for (const auto& row : test.rows()) preds.push_back(predict(m, fit, row.x));
                    results.push_back({m, pi, trial, rmse(preds, targets)});
                }
                for (const auto& r : results) by_method[r.method].push_back(r);
            } catch (const Error& e) {
                report.failures.push_back("pi=" + format_double(pi) + " trial=" + std::to_string(trial) +
                                          ": " + e.what());
            }
            report.trials.push_back(std::move(meta));
        }
    }
    for (Method m : cfg.methods) {
        auto& v = by_method[m];
        report.details.insert(report.details.end(), v.begin(), v.end());
    }
    report.summary = summarize(report.details, cfg.methods);
    return report;
}

// ---------------------------------------------------------------------------
// Report files

std::string detail_csv(const RunReport& report) {
    std::ostringstream out;
    out << "method,pi,trial,rmse\n";
    for (const auto& d : report.details)
        out << method_name(d.method) << ',' << format_double(d.pi) << ',' << d.trial << ','
            << format_double(d.rmse) << '\n';
    return out.str();
}

std::string summary_csv(const RunReport& report) {
    std::ostringstream out;
    out << "method,pi,mean,std,trials\n";
    for (const auto& s : report.summary)
        out << method_name(s.method) << ',' << format_double(s.pi) << ',' << format_double(s.mean) << ','
            << format_double(s.stddev) << ',' << s.trials << '\n';
    return out.str();
}

std::string meta_json(const RunReport& report) {
    json trials = json::array();
    for (const auto& t : report.trials)
        trials.push_back({{"pi", t.pi},
                          {"trial", t.trial},
                          {"train_mask_seed", t.train_mask_seed},
                          {"test_mask_seed", t.test_mask_seed},
                          {"density_seed", t.density_seed},
                          {"components", t.components},
                          {"model_hash", t.model_hash},
                          {"density_hash", t.density_hash}});
    json doc{{"format", "exptree-run/1"}, {"seed", report.seed}, {"trials", trials}, {"failures", report.failures}};
    return doc.dump(2) + "\n";
}

void emit_report(const RunReport& report, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::filesystem::path base(dir);
    write_file((base / "detail.csv").string(), detail_csv(report));
    write_file((base / "summary.csv").string(), summary_csv(report));
    write_file((base / "meta.json").string(), meta_json(report));
}

}  // namespace exptree
