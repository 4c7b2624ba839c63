#include "exptree/io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "exptree/error.hpp"

namespace exptree {

using nlohmann::json;

namespace {

json parse(std::string_view text, const char* format) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(std::string("invalid JSON: ") + e.what());
    }
    if (!doc.is_object() || doc.value("format", std::string{}) != format)
        throw Error(std::string("expected a document with format '") + format + "'");
    return doc;
}

template <class F>
auto guarded(const char* what, F&& f) {
    try {
        return f();
    } catch (const json::exception& e) {
        throw Error(std::string("malformed ") + what + ": " + e.what());
    }
}

json mask_to_json(ConstraintSet::Mask m) {
    json out = json::array();
    for (int v = 0; m; ++v, m >>= 1)
        if (m & 1U) out.push_back(v);
    return out;
}

ConstraintSet::Mask mask_from_json(const json& j) {
    ConstraintSet::Mask m = 0;
    for (const auto& v : j) {
        const int i = v.get<int>();
        if (i < 0 || i >= kMaxCardinality) throw Error("branch category out of range");
        m |= ConstraintSet::Mask{1} << i;
    }
    return m;
}

}  // namespace

std::string encoding_to_json(const BinningSpec& spec) {
    json cols = json::array();
    for (const auto& c : spec.columns) {
        json j{{"name", c.name}, {"cardinality", c.cardinality}};
        if (c.kind == ColumnKind::kContinuous) {
            j["kind"] = "continuous";
            j["cuts"] = c.cuts;
            j["lo"] = c.lo;
            j["hi"] = c.hi;
        } else {
            j["kind"] = "categorical";
            j["categories"] = c.categories;
        }
        cols.push_back(std::move(j));
    }
    json doc{{"format", "exptree-encoding/1"}, {"target", spec.target_name}, {"columns", cols}};
    return doc.dump(2) + "\n";
}

BinningSpec encoding_from_json(std::string_view text) {
    const json doc = parse(text, "exptree-encoding/1");
    return guarded("encoding", [&] {
        BinningSpec spec;
        spec.target_name = doc.at("target").get<std::string>();
        for (const auto& j : doc.at("columns")) {
            ColumnEncoding c;
            c.name = j.at("name").get<std::string>();
            c.cardinality = j.at("cardinality").get<int>();
            const auto kind = j.at("kind").get<std::string>();
            if (kind == "continuous") {
                c.kind = ColumnKind::kContinuous;
                c.cuts = j.at("cuts").get<std::vector<double>>();
                c.lo = j.at("lo").get<double>();
                c.hi = j.at("hi").get<double>();
                if (c.cuts.size() + 1 > static_cast<std::size_t>(kMaxBins))
                    throw Error("column '" + c.name + "' has more than " +
                                std::to_string(kMaxBins) + " bins");
                for (std::size_t i = 1; i < c.cuts.size(); ++i)
                    if (!(c.cuts[i - 1] < c.cuts[i]))
                        throw Error("cut points of '" + c.name + "' are not strictly increasing");
                if (c.cardinality < static_cast<int>(c.cuts.size()) + 1)
                    throw Error("cardinality of '" + c.name + "' is below its bin count");
            } else if (kind == "categorical") {
                c.kind = ColumnKind::kCategorical;
                c.categories = j.at("categories").get<std::vector<std::string>>();
                if (c.cardinality < static_cast<int>(c.categories.size()))
                    throw Error("cardinality of '" + c.name + "' is below its category count");
            } else {
                throw Error("unknown column kind '" + kind + "'");
            }
            spec.columns.push_back(std::move(c));
        }
        spec.schema();  // validates names and cardinalities
        return spec;
    });
}

// ---------------------------------------------------------------------------

std::string density_to_json(const MixtureDensity& d) {
    json tables = json::array();
    for (std::size_t k = 0; k < d.components(); ++k) {
        json comp = json::array();
        for (std::size_t f = 0; f < d.features(); ++f) {
            auto t = d.table(k, f);
            comp.push_back(std::vector<double>(t.begin(), t.end()));
        }
        tables.push_back(std::move(comp));
    }
    json doc{{"format", "exptree-density/1"},
             {"cardinalities", d.cardinalities()},
             {"weights", d.weights()},
             {"tables", tables}};
    return doc.dump(2) + "\n";
}

MixtureDensity density_from_json(std::string_view text) {
    const json doc = parse(text, "exptree-density/1");
    return guarded("density", [&] {
        return MixtureDensity(doc.at("cardinalities").get<std::vector<int>>(),
                              doc.at("weights").get<std::vector<double>>(),
                              doc.at("tables").get<std::vector<std::vector<std::vector<double>>>>());
    });
}

// ---------------------------------------------------------------------------

std::string model_to_json(const ForestModel& forest) {
    json trees = json::array();
    for (std::size_t r = 0; r < forest.size(); ++r) {
        const auto& t = forest.tree(r);
        json nodes = json::array();
        for (std::size_t id = 0; id < t.nodes().size(); ++id) {
            const auto& nd = t.nodes()[id];
            if (nd.is_leaf()) {
                nodes.push_back({{"id", id}, {"leaf", nd.theta}});
                continue;
            }
            json branches = json::array();
            for (auto b : nd.branches) branches.push_back(mask_to_json(b));
            nodes.push_back({{"id", id},
                             {"feature", nd.feature},
                             {"branches", branches},
                             {"children", nd.children},
                             {"default", nd.default_branch}});
        }
        json jt{{"weight", forest.omega(r)}, {"nodes", nodes}};
        if (t.has_gaps()) jt["allow_gaps"] = true;
        trees.push_back(std::move(jt));
    }
    json doc{{"format", "exptree-model/1"}, {"cardinalities", forest.cardinalities()}, {"trees", trees}};
    return doc.dump(2) + "\n";
}

ForestModel model_from_json(std::string_view text) {
    const json doc = parse(text, "exptree-model/1");
    return guarded("model", [&] {
        const auto cards = doc.at("cardinalities").get<std::vector<int>>();
        std::vector<TreeModel> trees;
        std::vector<double> omegas;
        for (const auto& jt : doc.at("trees")) {
            const auto& jn = jt.at("nodes");
            std::vector<TreeNode> nodes(jn.size());
            std::vector<char> seen(jn.size(), 0);
            for (const auto& j : jn) {
                const auto id = j.at("id").get<std::size_t>();
                if (id >= nodes.size() || seen[id])
                    throw Error("node ids must be unique and dense from 0");
                seen[id] = 1;
                TreeNode nd;
                if (j.contains("leaf")) {
                    nd.theta = j.at("leaf").get<double>();
                } else {
                    nd.feature = j.at("feature").get<int>();
                    if (nd.feature < 0) throw Error("negative feature index");
                    for (const auto& b : j.at("branches")) nd.branches.push_back(mask_from_json(b));
                    nd.children = j.at("children").get<std::vector<int>>();
                    nd.default_branch = j.value("default", 0);
                }
                nodes[id] = std::move(nd);
            }
            const auto cov = jt.value("allow_gaps", false) ? Coverage::kAllowGaps : Coverage::kPartition;
            trees.emplace_back(cards, std::move(nodes), cov);
            omegas.push_back(jt.value("weight", 1.0));
        }
        return ForestModel(std::move(trees), std::move(omegas));
    });
}

std::string refit_report_to_json(const RefitReport& report) {
    json leaves = json::array();
    for (const auto& l : report.leaves)
        leaves.push_back({{"leaf_id", l.leaf_id},
                          {"old_theta", l.old_theta},
                          {"new_theta", l.new_theta},
                          {"denom", l.denom}});
    json doc{{"format", "exptree-refit-report/1"},
             {"leaves", leaves},
             {"expected_loss_before", report.expected_loss_before},
             {"expected_loss_after", report.expected_loss_after},
             {"skipped_leaves", report.skipped_leaves},
             {"dropped_rows", report.dropped_rows}};
    return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error("write to '" + path + "' failed");
}

std::string fingerprint(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace exptree
