#include "exptree/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "exptree/error.hpp"
#include "exptree/random.hpp"

namespace exptree {

namespace {

std::optional<double> parse_double(const std::string& s) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    while (first < last && *first == ' ') ++first;
    while (last > first && last[-1] == ' ') --last;
    if (first == last) return std::nullopt;
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last || !std::isfinite(v)) return std::nullopt;
    return v;
}

std::optional<std::int32_t> parse_index(const std::string& s) {
    std::int32_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

// One CSV record. Supports double-quoted fields with "" escapes; an empty unquoted
// field is reported as nullopt.
std::vector<std::optional<std::string>> split_record(const std::string& line) {
    std::vector<std::optional<std::string>> out;
    std::string cur;
    bool quoted = false, was_quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = was_quoted = true;
        } else if (c == ',') {
            out.push_back(cur.empty() && !was_quoted ? std::nullopt : std::optional(cur));
            cur.clear();
            was_quoted = false;
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur.empty() && !was_quoted ? std::nullopt : std::optional(cur));
    return out;
}

bool next_line(std::istream& in, std::string& line) {
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "' for reading");
    return in;
}

std::string quote_if_needed(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q.push_back('"');
        q.push_back(c);
    }
    q.push_back('"');
    return q;
}

}  // namespace

// ---------------------------------------------------------------------------

FeatureSchema::FeatureSchema(std::vector<Feature> features, std::string target_name)
    : features_(std::move(features)), target_name_(std::move(target_name)) {
    std::unordered_set<std::string> seen;
    for (const auto& f : features_) {
        if (f.cardinality < 2)
            throw Error("feature '" + f.name + "' has cardinality " +
                        std::to_string(f.cardinality) + " (< 2)");
        if (f.cardinality > kMaxCardinality)
            throw Error("feature '" + f.name + "' has cardinality " +
                        std::to_string(f.cardinality) + " (> " +
                        std::to_string(kMaxCardinality) + ")");
        if (!seen.insert(f.name).second) throw Error("duplicate feature name '" + f.name + "'");
    }
}

std::vector<int> FeatureSchema::cardinalities() const {
    std::vector<int> out;
    out.reserve(features_.size());
    for (const auto& f : features_) out.push_back(f.cardinality);
    return out;
}

std::optional<std::size_t> FeatureSchema::find(const std::string& name) const {
    for (std::size_t f = 0; f < features_.size(); ++f)
        if (features_[f].name == name) return f;
    return std::nullopt;
}

bool PartialAssignment::fully_observed() const {
    return std::none_of(values_.begin(), values_.end(),
                        [](std::int32_t v) { return v == kMissing; });
}

Dataset::Dataset(FeatureSchema schema, std::vector<Row> rows)
    : schema_(std::move(schema)), rows_(std::move(rows)) {
    for (std::size_t i = 0; i < rows_.size(); ++i) {
        const auto& x = rows_[i].x;
        if (x.size() != schema_.size())
            throw Error("row " + std::to_string(i) + " has " + std::to_string(x.size()) +
                        " features, schema has " + std::to_string(schema_.size()));
        for (std::size_t f = 0; f < x.size(); ++f) {
            if (x[f] == kMissing) continue;
            if (x[f] < 0 || x[f] >= schema_[f].cardinality)
                throw Error("row " + std::to_string(i) + ": value " + std::to_string(x[f]) +
                            " out of range for feature '" + schema_[f].name + "'");
        }
    }
}

std::pair<Dataset, std::size_t> Dataset::with_targets() const {
    std::vector<Row> kept;
    kept.reserve(rows_.size());
    for (const auto& r : rows_)
        if (r.y) kept.push_back(r);
    std::size_t dropped = rows_.size() - kept.size();
    return {Dataset(schema_, std::move(kept)), dropped};
}

// ---------------------------------------------------------------------------

std::optional<std::size_t> RawTable::column(const std::string& name) const {
    for (std::size_t c = 0; c < header.size(); ++c)
        if (header[c] == name) return c;
    return std::nullopt;
}

// Right-closed bins: a value equal to a cut falls in the lower bin.
int ColumnEncoding::bin(double v) const {
    return static_cast<int>(std::lower_bound(cuts.begin(), cuts.end(), v) - cuts.begin());
}

FeatureSchema BinningSpec::schema() const {
    std::vector<Feature> features;
    features.reserve(columns.size());
    for (const auto& c : columns) features.push_back({c.name, c.cardinality});
    return FeatureSchema(std::move(features), target_name);
}

std::vector<double> equal_width_cuts(double lo, double hi, int bins) {
    std::vector<double> cuts;
    if (!(hi > lo)) return cuts;
    const double width = (hi - lo) / bins;
    for (int i = 1; i < bins; ++i) cuts.push_back(lo + i * width);
    return cuts;
}

std::pair<Dataset, BinningSpec> discretize(const RawTable& raw, const std::string& target_name,
                                           int max_bins, const std::set<std::string>& categorical) {
    if (max_bins < 2 || max_bins > kMaxBins)
        throw Error("max_bins must be in [2, " + std::to_string(kMaxBins) + "]");
    if (raw.rows.empty()) throw Error("raw table has no rows");
    auto target_col = raw.column(target_name);
    if (!target_col) throw Error("target column '" + target_name + "' not found");
    for (std::size_t i = 0; i < raw.rows.size(); ++i)
        if (raw.rows[i].size() != raw.header.size())
            throw Error("row " + std::to_string(i + 1) + ": expected " +
                        std::to_string(raw.header.size()) + " fields, got " +
                        std::to_string(raw.rows[i].size()));

    BinningSpec spec;
    spec.target_name = target_name;
    for (std::size_t c = 0; c < raw.header.size(); ++c) {
        if (c == *target_col) continue;
        ColumnEncoding enc;
        enc.name = raw.header[c];

        bool any_observed = false, all_numeric = true;
        double lo = 0.0, hi = 0.0;
        for (const auto& row : raw.rows) {
            const auto& cell = row[c];
            if (!cell) continue;
            auto v = parse_double(*cell);
            if (!v) {
                all_numeric = false;
            } else if (!any_observed) {
                lo = hi = *v;
            } else {
                lo = std::min(lo, *v);
                hi = std::max(hi, *v);
            }
            any_observed = true;
        }
        if (!any_observed) throw Error("column fully missing: '" + enc.name + "'");

        if (all_numeric && !categorical.contains(enc.name)) {
            enc.kind = ColumnKind::kContinuous;
            enc.lo = lo;
            enc.hi = hi;
            enc.cuts = equal_width_cuts(lo, hi, max_bins);
            // A constant column has one bin; the second category stays unused.
            enc.cardinality = std::max<int>(2, static_cast<int>(enc.cuts.size()) + 1);
        } else {
            enc.kind = ColumnKind::kCategorical;
            std::map<std::string, int> index;
            for (const auto& row : raw.rows) {
                const auto& cell = row[c];
                if (cell && index.emplace(*cell, static_cast<int>(enc.categories.size())).second)
                    enc.categories.push_back(*cell);
            }
            enc.cardinality = std::max<int>(2, static_cast<int>(enc.categories.size()));
        }
        spec.columns.push_back(std::move(enc));
    }
    Dataset ds = apply_encoding(raw, spec);
    return {std::move(ds), std::move(spec)};
}

Dataset apply_encoding(const RawTable& raw, const BinningSpec& spec) {
    auto target_col = raw.column(spec.target_name);
    if (!target_col) throw Error("target column '" + spec.target_name + "' not found");

    std::vector<std::size_t> source;
    std::vector<std::map<std::string, int>> lookup(spec.columns.size());
    for (std::size_t f = 0; f < spec.columns.size(); ++f) {
        const auto& enc = spec.columns[f];
        auto c = raw.column(enc.name);
        if (!c) throw Error("column '" + enc.name + "' not found");
        source.push_back(*c);
        for (std::size_t k = 0; k < enc.categories.size(); ++k)
            lookup[f].emplace(enc.categories[k], static_cast<int>(k));
    }

    std::vector<Row> rows;
    rows.reserve(raw.rows.size());
    for (std::size_t i = 0; i < raw.rows.size(); ++i) {
        const auto& cells = raw.rows[i];
        const std::string where = "row " + std::to_string(i + 1);
        if (cells.size() != raw.header.size())
            throw Error(where + ": expected " + std::to_string(raw.header.size()) +
                        " fields, got " + std::to_string(cells.size()));
        Row row{PartialAssignment(spec.columns.size()), std::nullopt};
        for (std::size_t f = 0; f < spec.columns.size(); ++f) {
            const auto& cell = cells[source[f]];
            if (!cell) continue;
            const auto& enc = spec.columns[f];
            if (enc.kind == ColumnKind::kContinuous) {
                auto v = parse_double(*cell);
                if (!v) throw Error(where + ": non-numeric value '" + *cell + "' in '" + enc.name + "'");
                row.x[f] = enc.bin(*v);
            } else {
                auto it = lookup[f].find(*cell);
                if (it == lookup[f].end())
                    throw Error(where + ": unknown category '" + *cell + "' in '" + enc.name + "'");
                row.x[f] = it->second;
            }
        }
        if (const auto& t = cells[*target_col]) {
            auto v = parse_double(*t);
            if (!v) throw Error(where + ": non-numeric target '" + *t + "'");
            row.y = *v;
        }
        rows.push_back(std::move(row));
    }
    return Dataset(spec.schema(), std::move(rows));
}

// ---------------------------------------------------------------------------

Dataset inject_mcar(const Dataset& ds, double pi, std::uint64_t seed) {
    if (!(pi >= 0.0 && pi <= 1.0)) throw Error("missingness probability must be in [0, 1]");
    Rng rng(seed);
    std::vector<Row> rows = ds.rows();
    for (auto& row : rows)
        for (std::size_t f = 0; f < row.x.size(); ++f)
            if (rng.uniform() < pi) row.x[f] = kMissing;
    return Dataset(ds.schema(), std::move(rows));
}

// ---------------------------------------------------------------------------

RawTable read_raw_csv(std::istream& in) {
    RawTable table;
    std::string line;
    if (!next_line(in, line)) throw Error("CSV is empty: header row required");
    for (auto& h : split_record(line)) table.header.push_back(h.value_or(""));
    while (next_line(in, line)) {
        if (line.empty()) continue;
        table.rows.push_back(split_record(line));
    }
    return table;
}

RawTable load_raw_csv(const std::string& path) {
    auto in = open_in(path);
    return read_raw_csv(in);
}

Dataset read_dataset_csv(std::istream& in, const FeatureSchema& schema) {
    std::string line;
    if (!next_line(in, line)) throw Error("CSV is empty: header row required");
    const std::size_t width = schema.size() + 1;
    auto header = split_record(line);
    if (header.size() != width)
        throw Error("header has " + std::to_string(header.size()) + " fields, expected " +
                    std::to_string(width));

    std::vector<Row> rows;
    std::size_t lineno = 1;
    while (next_line(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = "row " + std::to_string(rows.size() + 1) + " (line " +
                                  std::to_string(lineno) + ")";
        auto cells = split_record(line);
        if (cells.size() != width)
            throw Error(where + ": expected " + std::to_string(width) + " fields, got " +
                        std::to_string(cells.size()));
        Row row{PartialAssignment(schema.size()), std::nullopt};
        for (std::size_t f = 0; f < schema.size(); ++f) {
            if (!cells[f]) continue;
            auto v = parse_index(*cells[f]);
            if (!v || *v < 0 || *v >= schema[f].cardinality)
                throw Error(where + ": invalid category '" + *cells[f] + "' for feature '" +
                            schema[f].name + "'");
            row.x[f] = *v;
        }
        if (cells.back()) {
            auto y = parse_double(*cells.back());
            if (!y) throw Error(where + ": non-numeric target '" + *cells.back() + "'");
            row.y = *y;
        }
        rows.push_back(std::move(row));
    }
    return Dataset(schema, std::move(rows));
}

Dataset load_dataset_csv(const std::string& path, const FeatureSchema& schema) {
    auto in = open_in(path);
    return read_dataset_csv(in, schema);
}

void write_dataset_csv(std::ostream& out, const Dataset& ds) {
    const auto& schema = ds.schema();
    for (std::size_t f = 0; f < schema.size(); ++f) out << quote_if_needed(schema[f].name) << ',';
    out << quote_if_needed(schema.target_name()) << '\n';
    for (const auto& row : ds.rows()) {
        for (std::size_t f = 0; f < row.x.size(); ++f) {
            if (row.x.observed(f)) out << row.x[f];
            out << ',';
        }
        if (row.y) out << format_double(*row.y);
        out << '\n';
    }
}

void save_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    write_dataset_csv(out, ds);
    if (!out) throw Error("write to '" + path + "' failed");
}

std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace exptree
