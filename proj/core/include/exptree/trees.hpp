#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "exptree/data.hpp"
#include "exptree/density.hpp"

namespace exptree {

enum class MissingPolicy { kError, kDefaultBranch };

/// One node of a decision tree. Leaves have `feature < 0`.
///
/// A decision node sends value v of `feature` down branch j when bit v of
/// `branches[j]` is set. Branch sets are disjoint; an empty branch set is legal and
/// makes everything below it reachable only through missing-value routing.
struct TreeNode {
    int feature = -1;
    std::vector<ConstraintSet::Mask> branches;
    std::vector<int> children;
    int default_branch = 0;
    double theta = 0.0;

    bool is_leaf() const { return feature < 0; }
    bool operator==(const TreeNode&) const = default;
};

/// Whether decision nodes must cover every category of their feature.
enum class Coverage { kPartition, kAllowGaps };

/// A rooted decision tree with leaf parameters. Node 0 is the root; leaf ids are
/// node ids and `leaf_ids()` lists them in ascending order.
class TreeModel {
public:
    TreeModel() = default;
    TreeModel(std::vector<int> cardinalities, std::vector<TreeNode> nodes,
              Coverage coverage = Coverage::kPartition);

    static TreeModel constant(std::vector<int> cardinalities, double theta);

    const std::vector<int>& cardinalities() const { return cards_; }
    const std::vector<TreeNode>& nodes() const { return nodes_; }
    const TreeNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

    std::size_t leaf_count() const { return leaves_.size(); }
    const std::vector<int>& leaf_ids() const { return leaves_; }
    /// Position of a leaf id in `leaf_ids()`; throws when the id is not a leaf.
    std::size_t leaf_index(int leaf_id) const;
    double theta(int leaf_id) const { return node(leaf_id).theta; }
    std::vector<double> thetas() const;

    /// Intersection of all branch sets on the path to the leaf, by leaf index.
    const ConstraintSet& path_constraints(std::size_t leaf_index) const {
        return paths_[leaf_index];
    }
    /// True when no fully-observed input reaches the leaf.
    bool excluded(std::size_t leaf_index) const { return paths_[leaf_index].contradictory(); }
    std::size_t excluded_count() const;
    bool has_gaps() const { return coverage_ == Coverage::kAllowGaps; }

    /// Same structure with new leaf parameters, given in leaf-index order.
    TreeModel with_thetas(std::span<const double> thetas) const;

    bool operator==(const TreeModel&) const = default;

private:
    std::vector<int> cards_;
    std::vector<TreeNode> nodes_;
    Coverage coverage_ = Coverage::kPartition;
    std::vector<int> leaves_;
    std::vector<ConstraintSet> paths_;
};

/// Weighted additive ensemble sum_r omega_r f_r(x).
class ForestModel {
public:
    ForestModel() = default;
    ForestModel(std::vector<TreeModel> trees, std::vector<double> omegas);
    explicit ForestModel(TreeModel tree) : ForestModel({std::move(tree)}, {1.0}) {}

    std::size_t size() const { return trees_.size(); }
    const std::vector<TreeModel>& trees() const { return trees_; }
    const TreeModel& tree(std::size_t r) const { return trees_[r]; }
    const std::vector<double>& omegas() const { return omegas_; }
    double omega(std::size_t r) const { return omegas_[r]; }
    const std::vector<int>& cardinalities() const { return trees_.front().cardinalities(); }
    std::size_t total_leaves() const;
    std::size_t excluded_count() const;

    bool operator==(const ForestModel&) const = default;

private:
    std::vector<TreeModel> trees_;
    std::vector<double> omegas_;
};

/// Plain prediction: routes x to its unique leaf.
double evaluate(const TreeModel& t, const PartialAssignment& x, MissingPolicy policy);
double evaluate_forest(const ForestModel& forest, const PartialAssignment& x, MissingPolicy policy);

/// Leaf id reached by x under the policy.
int route(const TreeModel& t, const PartialAssignment& x, MissingPolicy policy);

/// Path constraint set of the leaf with the given id.
const ConstraintSet& leaf_constraints(const TreeModel& t, int leaf_id);

// ---------------------------------------------------------------------------
// External dumps

struct DumpResult {
    ForestModel forest;
    std::size_t excluded_leaves = 0;
};

/// Parses the JSON dump format described in the README: nested nodes with
/// `split`, `split_condition` or `categories`, `yes`/`no`/`missing`, `children`,
/// and `leaf`. Threshold splits on binned columns go through the column's cut points.
DumpResult parse_dump(std::string_view json_text, const BinningSpec& encoding);

// ---------------------------------------------------------------------------
// Induction

struct InduceOptions {
    int max_depth = 5;
    int min_leaf = 1;
    /// L2 penalty on leaf values: theta = sum(y) / (count + lambda). 0 gives leaf means.
    double lambda = 0.0;
};

/// Greedy binary CART-style splitter minimizing squared error. Rows missing the
/// candidate feature are ignored when scoring a split; after the split they follow
/// the branch whose mean fits them best, which becomes the node's default branch.
TreeModel induce_tree(const Dataset& ds, const InduceOptions& opts);

struct BoostOptions {
    InduceOptions tree;
    int rounds = 5;
    double learning_rate = 0.3;
};

/// Constant tree at the target mean followed by `rounds` trees fit to residuals.
/// Residuals for rows with missing values use default-branch predictions.
ForestModel induce_boosted_forest(const Dataset& ds, const BoostOptions& opts);

}  // namespace exptree
