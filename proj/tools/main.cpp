#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "exptree/data.hpp"
#include "exptree/density.hpp"
#include "exptree/error.hpp"
#include "exptree/expectation.hpp"
#include "exptree/fitting.hpp"
#include "exptree/harness.hpp"
#include "exptree/io.hpp"
#include "exptree/trees.hpp"

using namespace exptree;
namespace fs = std::filesystem;

namespace {

struct DataArgs {
    std::string csv;
    std::string encoding;
    std::string save_encoding;
    std::string target = "y";
    std::vector<std::string> categorical;
    int max_bins = kMaxBins;

    void add(CLI::App* cmd, const std::string& flag, bool required = true) {
        auto* opt = cmd->add_option(flag, csv, "CSV file");
        if (required) opt->required();
        cmd->add_option("--encoding", encoding, "Encoding JSON; derived from the CSV when omitted");
        cmd->add_option("--save-encoding", save_encoding, "Write the derived encoding here");
        cmd->add_option("--target", target, "Target column")->capture_default_str();
        cmd->add_option("--categorical", categorical, "Columns never binned");
        cmd->add_option("--max-bins", max_bins, "Bin cap for numeric columns")->capture_default_str();
    }

    std::pair<Dataset, BinningSpec> load() const {
        const RawTable raw = load_raw_csv(csv);
        if (!encoding.empty()) {
            BinningSpec spec = encoding_from_json(read_file(encoding));
            return {apply_encoding(raw, spec), spec};
        }
        auto out = discretize(raw, target, max_bins, {categorical.begin(), categorical.end()});
        if (!save_encoding.empty()) write_file(save_encoding, encoding_to_json(out.second));
        return out;
    }
};

struct ModelArgs {
    std::string model;
    std::string dump;

    void add(CLI::App* cmd) {
        auto* m = cmd->add_option("--model", model, "Model JSON");
        auto* d = cmd->add_option("--dump", dump, "Tree dump JSON (needs the encoding)");
        m->excludes(d);
    }

    ForestModel load(const BinningSpec& enc) const {
        if (!model.empty()) return model_from_json(read_file(model));
        if (!dump.empty()) {
            auto r = parse_dump(read_file(dump), enc);
            if (r.excluded_leaves > 0)
                std::cerr << "note: " << r.excluded_leaves << " leaves have contradictory paths and are excluded\n";
            return std::move(r.forest);
        }
        throw Error("one of --model or --dump is required");
    }
};

void emit(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-")
        std::cout << text;
    else
        write_file(path, text);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Expected predictions and expected-loss refits for trees under missing features"};
    app.require_subcommand(1);
    std::string active;

    // gen-synth
    auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic dataset with its true density and planted tree");
    SynthOptions synth;
    std::string gen_out;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--seed", synth.seed)->capture_default_str();
    gen->add_option("--n-train", synth.n_train)->capture_default_str();
    gen->add_option("--n-test", synth.n_test)->capture_default_str();
    gen->add_option("--features", synth.features)->capture_default_str();
    gen->add_option("--components", synth.components)->capture_default_str();
    gen->add_option("--depth", synth.tree_depth)->capture_default_str();
    gen->add_option("--noise", synth.noise)->capture_default_str();

    // fit-density
    auto* fd = app.add_subcommand("fit-density", "Fit a mixture density with EM");
    DataArgs fd_data;
    fd_data.add(fd, "--train");
    DensityOptions fd_opts;
    std::string fd_k = "auto", fd_out;
    std::uint64_t fd_seed = 0;
    fd->add_option("--k", fd_k, "Component count or 'auto'")->capture_default_str();
    fd->add_option("--iters", fd_opts.max_iters)->capture_default_str();
    fd->add_option("--epsilon", fd_opts.epsilon)->capture_default_str();
    fd->add_option("--tol", fd_opts.rel_tol)->capture_default_str();
    fd->add_option("--seed", fd_seed)->capture_default_str();
    fd->add_option("--out", fd_out, "Density JSON (stdout when omitted)");

    // induce
    auto* ind = app.add_subcommand("induce", "Grow a tree or boosted forest on complete or incomplete data");
    DataArgs ind_data;
    ind_data.add(ind, "--train");
    BoostOptions boost;
    int ind_trees = 1;
    std::string ind_out;
    ind->add_option("--trees", ind_trees, "1 for a single tree; more adds boosted rounds")->capture_default_str();
    ind->add_option("--max-depth", boost.tree.max_depth)->capture_default_str();
    ind->add_option("--min-leaf", boost.tree.min_leaf)->capture_default_str();
    boost.tree.lambda = 1.0;
    ind->add_option("--lambda", boost.tree.lambda, "L2 penalty on leaf values")->capture_default_str();
    ind->add_option("--learning-rate", boost.learning_rate)->capture_default_str();
    ind->add_option("--out", ind_out, "Model JSON (stdout when omitted)");

    // refit
    auto* rf = app.add_subcommand("refit", "Refit leaf values by minimizing expected squared error");
    DataArgs rf_data;
    rf_data.add(rf, "--train");
    ModelArgs rf_model;
    rf_model.add(rf);
    std::string rf_density, rf_mode = "auto", rf_out, rf_report;
    double rf_lambda = 0.0;
    rf->add_option("--density", rf_density, "Density JSON")->required();
    rf->add_option("--lambda", rf_lambda)->capture_default_str();
    rf->add_option("--mode", rf_mode, "auto, tree, boosted or joint")
        ->check(CLI::IsMember({"auto", "tree", "boosted", "joint"}))
        ->capture_default_str();
    rf->add_option("--out", rf_out, "Refit model JSON (stdout when omitted)");
    rf->add_option("--report", rf_report, "Refit report JSON (single trees and joint mode)");

    // predict
    auto* pr = app.add_subcommand("predict", "Predict on a CSV that may contain missing cells");
    DataArgs pr_data;
    pr_data.add(pr, "--data");
    ModelArgs pr_model;
    pr_model.add(pr);
    std::string pr_density, pr_method = "expected_prediction", pr_out, pr_fills_from;
    pr->add_option("--density", pr_density, "Density JSON (expected prediction)");
    pr->add_option("--method", pr_method, "default_branch, median_impute or expected_prediction")
        ->check(CLI::IsMember({"default_branch", "median_impute", "expected_prediction"}))
        ->capture_default_str();
    pr->add_option("--impute-from", pr_fills_from, "Training CSV for median fills");
    pr->add_option("--out", pr_out, "Prediction CSV (stdout when omitted)");

    // experiment
    auto* ex = app.add_subcommand("experiment", "Compare methods across missingness levels");
    std::string ex_config, ex_output;
    std::optional<std::uint64_t> ex_seed;
    ex->add_option("--config", ex_config, "Experiment JSON")->required();
    ex->add_option("--seed", ex_seed, "Overrides the config seed");
    ex->add_option("--output", ex_output, "Report directory; overrides the config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << nlohmann::json{{"error", e.what()}, {"kind", "usage"}}.dump() << '\n';
        return 2;
    }

    try {
        if (*gen) {
            active = "gen-synth";
            const SynthData s = generate_synthetic(synth);
            fs::create_directories(gen_out);
            const fs::path dir(gen_out);
            save_csv(s.train, (dir / "train.csv").string());
            save_csv(s.test, (dir / "test.csv").string());
            write_file((dir / "encoding.json").string(), encoding_to_json(s.encoding));
            write_file((dir / "density.json").string(), density_to_json(s.density));
            write_file((dir / "planted.json").string(), model_to_json(ForestModel(s.planted)));
        } else if (*fd) {
            active = "fit-density";
            fd_opts.components = fd_k == "auto" ? 0 : std::stoi(fd_k);
            const auto [train, enc] = fd_data.load();
            const DensityFit fit = fit_density(train, fd_opts, fd_seed);
            std::cerr << "components: " << fit.components << '\n';
            for (const auto& [k, ll] : fit.validation)
                std::cerr << "  K=" << k << " held-out log-likelihood " << format_double(ll) << '\n';
            emit(fd_out, density_to_json(fit.density));
        } else if (*ind) {
            active = "induce";
            const auto [train, enc] = ind_data.load();
            if (ind_trees < 1) throw Error("--trees must be at least 1");
            ForestModel model;
            if (ind_trees == 1) {
                model = ForestModel(induce_tree(train, boost.tree));
            } else {
                boost.rounds = ind_trees - 1;
                model = induce_boosted_forest(train, boost);
            }
            emit(ind_out, model_to_json(model));
        } else if (*rf) {
            active = "refit";
            const auto [train, enc] = rf_data.load();
            const ForestModel model = rf_model.load(enc);
            const MixtureDensity d = density_from_json(read_file(rf_density));
            std::string mode = rf_mode;
            if (mode == "auto") mode = model.size() == 1 ? "tree" : "boosted";
            ForestModel out;
            if (mode == "tree") {
                if (model.size() != 1) throw Error("--mode tree needs a single-tree model");
                auto th = model.tree(0).thetas();
                for (double& v : th) v *= model.omega(0);
                const TreeRefit r = refit_tree_mse(model.tree(0).with_thetas(th), d, train, rf_lambda);
                out = ForestModel(r.tree);
                if (!rf_report.empty()) write_file(rf_report, refit_report_to_json(r.report));
            } else if (mode == "boosted") {
                out = refit_boosted_sequence(model, d, train);
            } else {
                const ForestRefit r = refit_forest_joint(model, d, train, rf_lambda);
                out = r.forest;
                if (r.solution.fallback)
                    std::cerr << "note: singular system, ridge " << format_double(r.solution.lambda_used)
                              << " applied\n";
                if (!rf_report.empty()) {
                    nlohmann::json j{{"expected_loss_before", r.expected_loss_before},
                                     {"expected_loss_after", r.expected_loss_after},
                                     {"lambda_used", r.solution.lambda_used},
                                     {"fallback", r.solution.fallback},
                                     {"inactive", r.solution.inactive}};
                    write_file(rf_report, j.dump(2) + "\n");
                }
            }
            emit(rf_out, model_to_json(out));
        } else if (*pr) {
            active = "predict";
            const auto [data, enc] = pr_data.load();
            const ForestModel model = pr_model.load(enc);
            const Method method = method_from_name(pr_method);
            std::optional<MixtureDensity> d;
            std::vector<int> fills;
            if (method == Method::kExpectedPrediction) {
                if (pr_density.empty()) throw Error("expected_prediction needs --density");
                d = density_from_json(read_file(pr_density));
            } else if (method == Method::kMedianImpute) {
                if (pr_fills_from.empty()) throw Error("median_impute needs --impute-from");
                fills = median_impute_fit(apply_encoding(load_raw_csv(pr_fills_from), enc));
            }
            std::string text = "prediction\n";
            for (const auto& row : data.rows()) {
                double v = 0.0;
                if (method == Method::kExpectedPrediction)
                    v = expected_prediction_forest(model, *d, row.x);
                else if (method == Method::kMedianImpute)
                    v = evaluate_forest(model, impute(row.x, fills), MissingPolicy::kDefaultBranch);
                else
                    v = evaluate_forest(model, row.x, MissingPolicy::kDefaultBranch);
                text += format_double(v) + "\n";
            }
            emit(pr_out, text);
        } else if (*ex) {
            active = "experiment";
            const fs::path cfg_path(ex_config);
            ExperimentConfig cfg = config_from_json(read_file(ex_config), cfg_path.parent_path().string());
            if (ex_seed) cfg.seed = *ex_seed;
            if (!ex_output.empty()) cfg.output = ex_output;
            if (!cfg.output) throw Error("no output directory configured");
            const RunReport report = run_experiment(cfg);
            emit_report(report, *cfg.output);
            for (const auto& f : report.failures) std::cerr << "trial failed: " << f << '\n';
            std::cout << summary_csv(report);
        }
    } catch (const std::exception& e) {
        std::cerr << nlohmann::json{{"error", e.what()}, {"command", active}}.dump() << '\n';
        return 1;
    }
    return 0;
}
