#include "exptree/trees.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>

#include <json.hpp>

#include "exptree/error.hpp"

namespace exptree {

using Mask = ConstraintSet::Mask;

// ---------------------------------------------------------------------------
// TreeModel

TreeModel::TreeModel(std::vector<int> cardinalities, std::vector<TreeNode> nodes, Coverage coverage)
    : cards_(std::move(cardinalities)), nodes_(std::move(nodes)), coverage_(coverage) {
    if (nodes_.empty()) throw Error("malformed tree: no nodes");
    const auto n = static_cast<int>(nodes_.size());

    std::vector<int> parents(nodes_.size(), 0);
    for (int id = 0; id < n; ++id) {
        const auto& nd = nodes_[id];
        if (nd.is_leaf()) {
            if (!nd.children.empty() || !nd.branches.empty())
                throw Error("malformed tree: leaf " + std::to_string(id) + " has children");
            if (!std::isfinite(nd.theta))
                throw Error("malformed tree: leaf " + std::to_string(id) + " has non-finite value");
            continue;
        }
        const std::string where = "malformed tree: node " + std::to_string(id);
        if (nd.feature >= static_cast<int>(cards_.size()))
            throw Error(where + " tests unknown feature " + std::to_string(nd.feature));
        if (nd.branches.empty() || nd.branches.size() != nd.children.size())
            throw Error(where + " needs one child per branch set");
        if (nd.default_branch < 0 || nd.default_branch >= static_cast<int>(nd.branches.size()))
            throw Error(where + " has an out-of-range default branch");
        const Mask full = ConstraintSet::full_mask(cards_[nd.feature]);
        Mask seen = 0;
        for (Mask b : nd.branches) {
            if (b & ~full) throw Error(where + " has a branch value outside the feature's range");
            if (b & seen) throw Error(where + " has overlapping branch sets");
            seen |= b;
        }
        if (coverage_ == Coverage::kPartition && seen != full)
            throw Error(where + " branch sets do not cover every category");
        for (int c : nd.children) {
            if (c <= 0 || c >= n) throw Error(where + " has an invalid child id " + std::to_string(c));
            if (++parents[c] > 1)
                throw Error("malformed tree: node " + std::to_string(c) + " has several parents");
        }
    }

    // Depth-first from the root, recording each leaf's path constraints.
    paths_.resize(nodes_.size());
    std::vector<ConstraintSet> at(nodes_.size());
    std::vector<char> visited(nodes_.size(), 0);
    std::vector<int> stack{0};
    at[0] = ConstraintSet::unconstrained(cards_);
    std::size_t reached = 0;
    while (!stack.empty()) {
        const int id = stack.back();
        stack.pop_back();
        if (visited[id]) throw Error("malformed tree: cycle through node " + std::to_string(id));
        visited[id] = 1;
        ++reached;
        const auto& nd = nodes_[id];
        if (nd.is_leaf()) continue;
        for (std::size_t j = nd.children.size(); j-- > 0;) {
            const int c = nd.children[j];
            at[c] = at[id];
            at[c].restrict(static_cast<std::size_t>(nd.feature), nd.branches[j]);
            stack.push_back(c);
        }
    }
    if (reached != nodes_.size()) throw Error("malformed tree: unreachable nodes");

    paths_.clear();
    for (int id = 0; id < n; ++id) {
        if (!nodes_[id].is_leaf()) continue;
        leaves_.push_back(id);
        paths_.push_back(std::move(at[id]));
    }
}

TreeModel TreeModel::constant(std::vector<int> cardinalities, double theta) {
    TreeNode leaf;
    leaf.theta = theta;
    return TreeModel(std::move(cardinalities), {leaf});
}

std::size_t TreeModel::leaf_index(int leaf_id) const {
    auto it = std::lower_bound(leaves_.begin(), leaves_.end(), leaf_id);
    if (it == leaves_.end() || *it != leaf_id) throw Error("no leaf with id " + std::to_string(leaf_id));
    return static_cast<std::size_t>(it - leaves_.begin());
}

std::vector<double> TreeModel::thetas() const {
    std::vector<double> out;
    out.reserve(leaves_.size());
    for (int id : leaves_) out.push_back(nodes_[id].theta);
    return out;
}

std::size_t TreeModel::excluded_count() const {
    return static_cast<std::size_t>(
        std::count_if(paths_.begin(), paths_.end(), [](const auto& c) { return c.contradictory(); }));
}

TreeModel TreeModel::with_thetas(std::span<const double> thetas) const {
    if (thetas.size() != leaves_.size()) throw Error("leaf parameter count mismatch");
    TreeModel out = *this;
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
        if (!std::isfinite(thetas[i])) throw Error("non-finite leaf parameter");
        out.nodes_[leaves_[i]].theta = thetas[i];
    }
    return out;
}

const ConstraintSet& leaf_constraints(const TreeModel& t, int leaf_id) {
    return t.path_constraints(t.leaf_index(leaf_id));
}

// ---------------------------------------------------------------------------
// ForestModel

ForestModel::ForestModel(std::vector<TreeModel> trees, std::vector<double> omegas)
    : trees_(std::move(trees)), omegas_(std::move(omegas)) {
    if (trees_.empty()) throw Error("forest needs at least one tree");
    if (omegas_.size() != trees_.size()) throw Error("forest needs one weight per tree");
    for (const auto& t : trees_)
        if (t.cardinalities() != trees_.front().cardinalities())
            throw Error("forest trees disagree on the feature schema");
    for (double w : omegas_)
        if (!std::isfinite(w)) throw Error("non-finite forest weight");
}

std::size_t ForestModel::total_leaves() const {
    std::size_t n = 0;
    for (const auto& t : trees_) n += t.leaf_count();
    return n;
}

std::size_t ForestModel::excluded_count() const {
    std::size_t n = 0;
    for (const auto& t : trees_) n += t.excluded_count();
    return n;
}

// ---------------------------------------------------------------------------
// Evaluation

int route(const TreeModel& t, const PartialAssignment& x, MissingPolicy policy) {
    if (x.size() != t.cardinalities().size())
        throw Error("assignment has " + std::to_string(x.size()) + " features, tree expects " +
                    std::to_string(t.cardinalities().size()));
    int id = 0;
    while (!t.node(id).is_leaf()) {
        const auto& nd = t.node(id);
        const auto v = x[static_cast<std::size_t>(nd.feature)];
        int next = -1;
        if (v != kMissing) {
            for (std::size_t j = 0; j < nd.branches.size(); ++j)
                if ((nd.branches[j] >> v) & 1U) next = nd.children[j];
        }
        if (next < 0) {
            if (policy == MissingPolicy::kError)
                throw Error(v == kMissing ? "feature " + std::to_string(nd.feature) +
                                                " is missing at node " + std::to_string(id)
                                          : "value " + std::to_string(v) + " has no branch at node " +
                                                std::to_string(id));
            next = nd.children[static_cast<std::size_t>(nd.default_branch)];
        }
        id = next;
    }
    return id;
}

double evaluate(const TreeModel& t, const PartialAssignment& x, MissingPolicy policy) {
    return t.theta(route(t, x, policy));
}

double evaluate_forest(const ForestModel& forest, const PartialAssignment& x, MissingPolicy policy) {
    double s = 0.0;
    for (std::size_t r = 0; r < forest.size(); ++r)
        s += forest.omega(r) * evaluate(forest.tree(r), x, policy);
    return s;
}

// ---------------------------------------------------------------------------
// Dump ingestion

namespace {

using nlohmann::json;

struct DumpParser {
    const BinningSpec& enc;
    std::vector<int> cards;
    std::map<long long, const json*> by_id;

    std::size_t resolve_feature(const json& split) const {
        if (split.is_number_integer()) {
            auto f = split.get<long long>();
            if (f < 0 || f >= static_cast<long long>(enc.columns.size()))
                throw Error("unknown feature index " + std::to_string(f));
            return static_cast<std::size_t>(f);
        }
        const auto name = split.get<std::string>();
        for (std::size_t f = 0; f < enc.columns.size(); ++f)
            if (enc.columns[f].name == name) return f;
        if (name.size() > 1 && name[0] == 'f' &&
            std::all_of(name.begin() + 1, name.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            auto f = std::stoull(name.substr(1));
            if (f < enc.columns.size()) return static_cast<std::size_t>(f);
        }
        throw Error("unknown feature name '" + name + "'");
    }

    Mask category_mask(std::size_t f, const json& list) const {
        const auto& col = enc.columns[f];
        Mask m = 0;
        for (const auto& c : list) {
            int v = -1;
            if (c.is_number_integer()) {
                v = c.get<int>();
            } else {
                const auto label = c.get<std::string>();
                auto it = std::find(col.categories.begin(), col.categories.end(), label);
                if (it == col.categories.end())
                    throw Error("unknown category '" + label + "' for feature '" + col.name + "'");
                v = static_cast<int>(it - col.categories.begin());
            }
            if (v < 0 || v >= col.cardinality)
                throw Error("category " + std::to_string(v) + " out of range for '" + col.name + "'");
            m |= Mask{1} << v;
        }
        return m;
    }

    // Branch set taken when `x < threshold`.
    Mask threshold_mask(std::size_t f, double t) const {
        const auto& col = enc.columns[f];
        int below = 0;
        if (col.kind == ColumnKind::kContinuous) {
            if (!(t >= col.lo && t <= col.hi))
                throw Error("threshold " + format_double(t) + " outside binned range of '" +
                            col.name + "'");
            below = col.bin(t);
        } else {
            if (!(t >= 0.0 && t <= col.cardinality))
                throw Error("threshold " + format_double(t) + " outside category range of '" +
                            col.name + "'");
            below = static_cast<int>(std::ceil(t));
        }
        return ConstraintSet::full_mask(below);
    }

    void index(const json& node) {
        if (!node.is_object() || !node.contains("nodeid")) throw Error("dump node without nodeid");
        auto id = node.at("nodeid").get<long long>();
        if (!by_id.emplace(id, &node).second)
            throw Error("duplicate nodeid " + std::to_string(id));
        if (node.contains("children"))
            for (const auto& c : node.at("children")) index(c);
    }

    TreeModel build(const json& root, std::size_t& excluded) {
        by_id.clear();
        index(root);
        std::vector<TreeNode> nodes;
        std::map<long long, char> on_path;
        bool gaps = false;
        emit(root.at("nodeid").get<long long>(), nodes, on_path, gaps);
        TreeModel t(cards, std::move(nodes), gaps ? Coverage::kAllowGaps : Coverage::kPartition);
        excluded += t.excluded_count();
        return t;
    }

    int emit(long long id, std::vector<TreeNode>& nodes, std::map<long long, char>& on_path,
             bool& gaps) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw Error("dump references missing nodeid " + std::to_string(id));
        if (on_path[id]) throw Error("cyclic structure at nodeid " + std::to_string(id));
        on_path[id] = 1;
        const json& j = *it->second;

        const int self = static_cast<int>(nodes.size());
        nodes.emplace_back();
        if (j.contains("leaf")) {
            nodes[self].theta = j.at("leaf").get<double>();
            on_path[id] = 0;
            return self;
        }

        const std::size_t f = resolve_feature(j.at("split"));
        const Mask full = ConstraintSet::full_mask(enc.columns[f].cardinality);
        Mask yes = 0, no = 0;
        if (j.contains("categories")) {
            yes = category_mask(f, j.at("categories"));
            no = j.contains("no_categories") ? category_mask(f, j.at("no_categories")) : full & ~yes;
            if ((yes | no) != full) gaps = true;
        } else {
            yes = threshold_mask(f, j.at("split_condition").get<double>());
            no = full & ~yes;
        }
        const auto yes_id = j.at("yes").get<long long>();
        const auto no_id = j.at("no").get<long long>();
        const auto miss_id = j.value("missing", yes_id);
        if (miss_id != yes_id && miss_id != no_id)
            throw Error("missing child of nodeid " + std::to_string(id) + " is neither yes nor no");

        TreeNode nd;
        nd.feature = static_cast<int>(f);
        nd.branches = {yes, no};
        nd.default_branch = miss_id == yes_id ? 0 : 1;
        const int yes_node = emit(yes_id, nodes, on_path, gaps);
        const int no_node = emit(no_id, nodes, on_path, gaps);
        nd.children = {yes_node, no_node};
        nodes[self] = std::move(nd);
        on_path[id] = 0;
        return self;
    }
};

}  // namespace

DumpResult parse_dump(std::string_view json_text, const BinningSpec& encoding) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw Error(std::string("dump is not valid JSON: ") + e.what());
    }

    DumpParser parser{encoding, encoding.schema().cardinalities(), {}};
    std::vector<TreeModel> trees;
    std::vector<double> omegas;
    DumpResult result;
    try {
        const json& list = doc.is_array() ? doc : doc.at("trees");
        for (const auto& entry : list) {
            const bool wrapped = entry.contains("root");
            trees.push_back(parser.build(wrapped ? entry.at("root") : entry, result.excluded_leaves));
            omegas.push_back(wrapped ? entry.value("weight", 1.0) : 1.0);
        }
        if (doc.is_object() && doc.contains("base_score")) {
            trees.push_back(TreeModel::constant(parser.cards, doc.at("base_score").get<double>()));
            omegas.push_back(1.0);
        }
    } catch (const json::exception& e) {
        throw Error(std::string("malformed dump: ") + e.what());
    }
    result.forest = ForestModel(std::move(trees), std::move(omegas));
    return result;
}

// ---------------------------------------------------------------------------
// Induction

namespace {

struct Stats {
    double sum = 0.0;
    double count = 0.0;
    double mean() const { return count > 0.0 ? sum / count : 0.0; }
};

struct Split {
    int feature = -1;
    Mask left = 0;  // branch 0 always holds category 0
    double gain = 0.0;
};

class Inducer {
public:
    Inducer(const Dataset& ds, const InduceOptions& opts)
        : ds_(ds), opts_(opts), cards_(ds.schema().cardinalities()) {}

    TreeModel run() {
        if (!(opts_.lambda >= 0.0)) throw Error("lambda must be non-negative");
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < ds_.size(); ++i)
            if (ds_[i].y) rows.push_back(i);
        if (rows.empty()) throw Error("cannot induce a tree from an empty dataset");
        grow(rows, 0);
        return TreeModel(cards_, std::move(nodes_));
    }

private:
    double y(std::size_t i) const { return *ds_[i].y; }

    Stats stats(const std::vector<std::size_t>& rows) const {
        Stats s;
        for (auto i : rows) {
            s.sum += y(i);
            s.count += 1.0;
        }
        return s;
    }

    int grow(const std::vector<std::size_t>& rows, int depth) {
        const int self = static_cast<int>(nodes_.size());
        nodes_.emplace_back();
        const Stats all = stats(rows);
        nodes_[self].theta = all.sum / (all.count + opts_.lambda);

        if (depth >= opts_.max_depth) return self;
        auto split = best_split(rows);
        if (!split) return self;

        const auto f = static_cast<std::size_t>(split->feature);
        std::vector<std::size_t> part[2], missing;
        for (auto i : rows) {
            const auto v = ds_[i].x[f];
            if (v == kMissing)
                missing.push_back(i);
            else
                part[((split->left >> v) & 1U) ? 0 : 1].push_back(i);
        }
        int def = 0;
        if (!missing.empty()) {
            const Stats m = stats(missing);
            double cost[2];
            for (int b = 0; b < 2; ++b) {
                const Stats c = stats(part[b]);
                const double d = m.mean() - c.mean();
                cost[b] = c.count * m.count / (c.count + m.count) * d * d;
            }
            def = cost[1] < cost[0] ? 1 : 0;
            part[def].insert(part[def].end(), missing.begin(), missing.end());
            std::sort(part[def].begin(), part[def].end());
        }

        TreeNode nd;
        nd.feature = split->feature;
        nd.branches = {split->left, ConstraintSet::full_mask(cards_[f]) & ~split->left};
        nd.default_branch = def;
        nd.children.push_back(grow(part[0], depth + 1));
        nd.children.push_back(grow(part[1], depth + 1));
        nodes_[self] = std::move(nd);
        return self;
    }

    // Best binary partition per feature: categories sorted by mean target, prefixes
    // scanned in order (optimal for squared error).
    std::optional<Split> best_split(const std::vector<std::size_t>& rows) const {
        std::optional<Split> best;
        for (std::size_t f = 0; f < cards_.size(); ++f) {
            const int card = cards_[f];
            std::vector<Stats> per(static_cast<std::size_t>(card));
            Stats avail;
            for (auto i : rows) {
                const auto v = ds_[i].x[f];
                if (v == kMissing) continue;
                per[v].sum += y(i);
                per[v].count += 1.0;
                avail.sum += y(i);
                avail.count += 1.0;
            }
            if (avail.count < 2.0 * opts_.min_leaf) continue;

            std::vector<int> order;
            for (int v = 0; v < card; ++v)
                if (per[v].count > 0.0) order.push_back(v);
            std::stable_sort(order.begin(), order.end(),
                             [&](int a, int b) { return per[a].mean() < per[b].mean(); });

            const double lam = opts_.lambda;
            const double base = avail.sum * avail.sum / (avail.count + lam);
            Stats left;
            Mask left_mask = 0;
            for (std::size_t k = 0; k + 1 < order.size(); ++k) {
                left.sum += per[order[k]].sum;
                left.count += per[order[k]].count;
                left_mask |= Mask{1} << order[k];
                const double rc = avail.count - left.count;
                if (left.count < opts_.min_leaf || rc < opts_.min_leaf) continue;
                const double rs = avail.sum - left.sum;
                const double gain = left.sum * left.sum / (left.count + lam) + rs * rs / (rc + lam) - base;
                if (gain > 1e-12 * std::max(1.0, base) && (!best || gain > best->gain)) {
                    const Mask full = ConstraintSet::full_mask(card);
                    // Unseen categories go with the upper part; branch 0 holds category 0.
                    Mask m = left_mask;
                    if (!(m & 1U)) m = full & ~m;
                    best = Split{static_cast<int>(f), m, gain};
                }
            }
        }
        return best;
    }

    const Dataset& ds_;
    InduceOptions opts_;
    std::vector<int> cards_;
    std::vector<TreeNode> nodes_;
};

}  // namespace

TreeModel induce_tree(const Dataset& ds, const InduceOptions& opts) {
    if (opts.max_depth < 0) throw Error("max_depth must be non-negative");
    if (opts.min_leaf < 1) throw Error("min_leaf must be at least 1");
    return Inducer(ds, opts).run();
}

ForestModel induce_boosted_forest(const Dataset& ds, const BoostOptions& opts) {
    auto [labeled, dropped] = ds.with_targets();
    if (labeled.empty()) throw Error("cannot induce a forest from an empty dataset");
    const auto cards = ds.schema().cardinalities();

    double mean = 0.0;
    for (const auto& r : labeled.rows()) mean += *r.y;
    mean /= static_cast<double>(labeled.size());

    std::vector<TreeModel> trees{TreeModel::constant(cards, mean)};
    std::vector<double> pred(labeled.size(), mean);
    for (int round = 0; round < opts.rounds; ++round) {
        std::vector<Row> residual;
        residual.reserve(labeled.size());
        for (std::size_t i = 0; i < labeled.size(); ++i)
            residual.push_back({labeled[i].x, *labeled[i].y - pred[i]});
        TreeModel t = induce_tree(Dataset(labeled.schema(), std::move(residual)), opts.tree);
        auto th = t.thetas();
        for (double& v : th) v *= opts.learning_rate;
        t = t.with_thetas(th);
        for (std::size_t i = 0; i < labeled.size(); ++i)
            pred[i] += evaluate(t, labeled[i].x, MissingPolicy::kDefaultBranch);
        trees.push_back(std::move(t));
    }
    std::vector<double> omegas(trees.size(), 1.0);
    return ForestModel(std::move(trees), std::move(omegas));
}

}  // namespace exptree
