#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace exptree {

/// Sentinel stored in a PartialAssignment slot when the feature is unobserved.
inline constexpr std::int32_t kMissing = -1;

/// Largest category count a feature may have. Allowed-value sets are 64-bit masks.
inline constexpr int kMaxCardinality = 64;

/// Largest bin count produced by equal-width discretization.
inline constexpr int kMaxBins = 10;

struct Feature {
    std::string name;
    int cardinality = 2;

    bool operator==(const Feature&) const = default;
};

class FeatureSchema {
public:
    FeatureSchema() = default;
    FeatureSchema(std::vector<Feature> features, std::string target_name);

    std::size_t size() const { return features_.size(); }
    const Feature& operator[](std::size_t f) const { return features_[f]; }
    const std::vector<Feature>& features() const { return features_; }
    const std::string& target_name() const { return target_name_; }

    std::vector<int> cardinalities() const;
    /// Index of the named feature, or nullopt.
    std::optional<std::size_t> find(const std::string& name) const;

    bool operator==(const FeatureSchema&) const = default;

private:
    std::vector<Feature> features_;
    std::string target_name_;
};

/// Per-feature observed category index or kMissing.
class PartialAssignment {
public:
    PartialAssignment() = default;
    explicit PartialAssignment(std::size_t n) : values_(n, kMissing) {}
    explicit PartialAssignment(std::vector<std::int32_t> values) : values_(std::move(values)) {}

    std::size_t size() const { return values_.size(); }
    std::int32_t operator[](std::size_t f) const { return values_[f]; }
    std::int32_t& operator[](std::size_t f) { return values_[f]; }
    bool observed(std::size_t f) const { return values_[f] != kMissing; }
    bool fully_observed() const;
    std::span<const std::int32_t> values() const { return values_; }

    bool operator==(const PartialAssignment&) const = default;

private:
    std::vector<std::int32_t> values_;
};

struct Row {
    PartialAssignment x;
    std::optional<double> y;

    bool operator==(const Row&) const = default;
};

/// Validates that every observed value fits its feature's cardinality.
class Dataset {
public:
    Dataset() = default;
    Dataset(FeatureSchema schema, std::vector<Row> rows);

    const FeatureSchema& schema() const { return schema_; }
    const std::vector<Row>& rows() const { return rows_; }
    std::size_t size() const { return rows_.size(); }
    bool empty() const { return rows_.empty(); }
    const Row& operator[](std::size_t i) const { return rows_[i]; }

    /// Rows with an observed target, plus how many were dropped.
    std::pair<Dataset, std::size_t> with_targets() const;

    bool operator==(const Dataset&) const = default;

private:
    FeatureSchema schema_;
    std::vector<Row> rows_;
};

// ---------------------------------------------------------------------------
// Raw tables and encoding

/// A CSV read verbatim: header plus string cells, empty cell = missing.
struct RawTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::optional<std::string>>> rows;

    std::optional<std::size_t> column(const std::string& name) const;
};

enum class ColumnKind { kContinuous, kCategorical };

/// How one raw column maps to category indices.
struct ColumnEncoding {
    std::string name;
    ColumnKind kind = ColumnKind::kCategorical;
    std::vector<double> cuts;             // continuous: strictly increasing, <= kMaxBins - 1
    double lo = 0.0, hi = 0.0;            // continuous: observed range at fit time
    std::vector<std::string> categories;  // categorical: index -> label
    int cardinality = 2;

    int bin(double v) const;
    bool operator==(const ColumnEncoding&) const = default;
};

/// Feature encodings computed on a training table, reused for test rows.
struct BinningSpec {
    std::vector<ColumnEncoding> columns;
    std::string target_name;

    FeatureSchema schema() const;
    bool operator==(const BinningSpec&) const = default;
};

/// Equal-width cut points over [lo, hi] for `bins` bins.
std::vector<double> equal_width_cuts(double lo, double hi, int bins);

/// Encodes a raw table. Columns listed in `categorical` are never binned; other
/// columns are continuous when every observed cell parses as a number.
std::pair<Dataset, BinningSpec> discretize(const RawTable& raw, const std::string& target_name,
                                           int max_bins = kMaxBins,
                                           const std::set<std::string>& categorical = {});

/// Encodes a raw table with a previously fitted spec. Unknown categories are an error.
Dataset apply_encoding(const RawTable& raw, const BinningSpec& spec);

// ---------------------------------------------------------------------------
// Missingness

/// Masks each feature slot independently with probability `pi`. Targets untouched.
Dataset inject_mcar(const Dataset& ds, double pi, std::uint64_t seed);

// ---------------------------------------------------------------------------
// CSV

RawTable read_raw_csv(std::istream& in);
RawTable load_raw_csv(const std::string& path);

/// Parses an encoded CSV (category indices, empty = MISSING) against a schema.
Dataset read_dataset_csv(std::istream& in, const FeatureSchema& schema);
Dataset load_dataset_csv(const std::string& path, const FeatureSchema& schema);

void write_dataset_csv(std::ostream& out, const Dataset& ds);
void save_csv(const Dataset& ds, const std::string& path);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace exptree
