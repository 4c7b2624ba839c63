#include "exptree/density.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>

#include "exptree/error.hpp"
#include "exptree/random.hpp"

namespace exptree {

namespace {

constexpr double kSumTolerance = 1e-9;

double log_sum_exp(std::span<const double> v) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

}  // namespace

// ---------------------------------------------------------------------------

ConstraintSet ConstraintSet::unconstrained(std::span<const int> cardinalities) {
    ConstraintSet c;
    c.masks_.reserve(cardinalities.size());
    for (int card : cardinalities) c.masks_.push_back(full_mask(card));
    return c;
}

ConstraintSet ConstraintSet::from_evidence(const PartialAssignment& x,
                                           std::span<const int> cardinalities) {
    if (x.size() != cardinalities.size())
        throw Error("assignment has " + std::to_string(x.size()) + " features, expected " +
                    std::to_string(cardinalities.size()));
    ConstraintSet c = unconstrained(cardinalities);
    for (std::size_t f = 0; f < x.size(); ++f)
        if (x.observed(f)) c.masks_[f] &= Mask{1} << x[f];
    return c;
}

bool ConstraintSet::contradictory() const {
    return std::any_of(masks_.begin(), masks_.end(), [](Mask m) { return m == 0; });
}

ConstraintSet& ConstraintSet::restrict(std::size_t f, Mask allowed) {
    masks_.at(f) &= allowed;
    return *this;
}

ConstraintSet& ConstraintSet::restrict(std::size_t f, std::initializer_list<int> values) {
    return restrict(f, mask_of(values));
}

ConstraintSet::Mask mask_of(std::initializer_list<int> values) {
    ConstraintSet::Mask m = 0;
    for (int v : values) m |= ConstraintSet::Mask{1} << v;
    return m;
}

ConstraintSet intersect(const ConstraintSet& a, const ConstraintSet& b) {
    if (a.size() != b.size()) throw Error("constraint sets over different feature counts");
    ConstraintSet out = a;
    for (std::size_t f = 0; f < a.size(); ++f) out.restrict(f, b.mask(f));
    return out;
}

// ---------------------------------------------------------------------------

MixtureDensity::MixtureDensity(std::vector<int> cardinalities, std::vector<double> weights,
                               std::vector<std::vector<std::vector<double>>> tables)
    : cards_(std::move(cardinalities)), weights_(std::move(weights)) {
    if (weights_.empty()) throw Error("mixture needs at least one component");
    if (tables.size() != weights_.size()) throw Error("one table set per component required");
    double wsum = 0.0;
    for (double w : weights_) {
        if (!(w >= 0.0)) throw Error("mixture weights must be non-negative");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > kSumTolerance) throw Error("mixture weights do not sum to 1");

    offsets_.reserve(cards_.size());
    for (int card : cards_) {
        if (card < 1 || card > kMaxCardinality) throw Error("invalid cardinality in density");
        offsets_.push_back(stride_);
        stride_ += static_cast<std::size_t>(card);
    }
    params_.reserve(stride_ * weights_.size());
    for (std::size_t k = 0; k < tables.size(); ++k) {
        if (tables[k].size() != cards_.size())
            throw Error("component " + std::to_string(k) + " has the wrong feature count");
        for (std::size_t f = 0; f < cards_.size(); ++f) {
            const auto& row = tables[k][f];
            if (row.size() != static_cast<std::size_t>(cards_[f]))
                throw Error("table size mismatch for component " + std::to_string(k) +
                            ", feature " + std::to_string(f));
            double s = 0.0;
            for (double p : row) {
                if (!(p >= 0.0)) throw Error("table entries must be non-negative");
                s += p;
            }
            if (std::abs(s - 1.0) > kSumTolerance)
                throw Error("table for component " + std::to_string(k) + ", feature " +
                            std::to_string(f) + " does not sum to 1");
            params_.insert(params_.end(), row.begin(), row.end());
        }
    }
}

double MixtureDensity::component_marginal(std::size_t k, const ConstraintSet& c) const {
    const double* base = params_.data() + k * stride_;
    double prod = 1.0;
    for (std::size_t f = 0; f < cards_.size(); ++f) {
        ConstraintSet::Mask m = c.mask(f);
        if (m == ConstraintSet::full_mask(cards_[f])) continue;
        const double* t = base + offsets_[f];
        double s = 0.0;
        while (m) {
            s += t[std::countr_zero(m)];
            m &= m - 1;
        }
        prod *= s;
    }
    return prod;
}

double marginal(const MixtureDensity& d, const ConstraintSet& c) {
    if (c.size() != d.features())
        throw Error("constraint set has " + std::to_string(c.size()) + " features, density has " +
                    std::to_string(d.features()));
    if (c.contradictory()) return 0.0;
    double total = 0.0;
    for (std::size_t k = 0; k < d.components(); ++k)
        total += d.weight(k) * d.component_marginal(k, c);
    return std::clamp(total, 0.0, 1.0);
}

double conditional(const MixtureDensity& d, const ConstraintSet& event, const ConstraintSet& given) {
    const double pg = marginal(d, given);
    if (!(pg > 0.0)) throw Error("conditioning on zero-probability evidence");
    return marginal(d, intersect(event, given)) / pg;
}

// ---------------------------------------------------------------------------

namespace {

struct Sufficient {
    std::vector<double> mass;    // K
    std::vector<double> counts;  // K x stride, responsibility-weighted observed counts
};

MixtureDensity m_step(const Sufficient& s, const std::vector<int>& cards, double eps,
                      std::size_t n_rows) {
    const std::size_t K = s.mass.size();
    const std::size_t F = cards.size();
    std::size_t stride = 0;
    for (int c : cards) stride += static_cast<std::size_t>(c);

    std::vector<double> weights(K);
    const double wden = static_cast<double>(n_rows) + eps * static_cast<double>(K);
    for (std::size_t k = 0; k < K; ++k)
        weights[k] = wden > 0.0 ? (s.mass[k] + eps) / wden : 1.0 / static_cast<double>(K);
    // Renormalize so the weights sum to one regardless of rounding in the mass sums.
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    for (double& w : weights) w /= wsum;

    std::vector<std::vector<std::vector<double>>> tables(K, std::vector<std::vector<double>>(F));
    for (std::size_t k = 0; k < K; ++k) {
        std::size_t off = 0;
        for (std::size_t f = 0; f < F; ++f) {
            const int card = cards[f];
            auto& row = tables[k][f];
            row.resize(static_cast<std::size_t>(card));
            double den = 0.0;
            for (int v = 0; v < card; ++v) {
                row[v] = s.counts[k * stride + off + v] + eps;
                den += row[v];
            }
            if (den > 0.0) {
                for (double& p : row) p /= den;
            } else {
                std::fill(row.begin(), row.end(), 1.0 / card);
            }
            off += static_cast<std::size_t>(card);
        }
    }
    return MixtureDensity(cards, std::move(weights), std::move(tables));
}

// Accumulates sufficient statistics for the given responsibilities (row-major N x K).
Sufficient accumulate(const Dataset& ds, const std::vector<double>& resp, std::size_t K,
                      const std::vector<int>& cards) {
    std::size_t stride = 0;
    std::vector<std::size_t> offsets;
    for (int c : cards) {
        offsets.push_back(stride);
        stride += static_cast<std::size_t>(c);
    }
    Sufficient s{std::vector<double>(K, 0.0), std::vector<double>(K * stride, 0.0)};
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& x = ds[i].x;
        for (std::size_t k = 0; k < K; ++k) {
            const double r = resp[i * K + k];
            s.mass[k] += r;
            for (std::size_t f = 0; f < x.size(); ++f) {
                if (!x.observed(f)) continue;
                s.counts[k * stride + offsets[f] + static_cast<std::size_t>(x[f])] += r;
            }
        }
    }
    return s;
}

// E-step: fills responsibilities and returns the observed-data log-likelihood.
double e_step(const MixtureDensity& d, const Dataset& ds, std::vector<double>& resp) {
    const std::size_t K = d.components();
    std::vector<double> logw(K);
    for (std::size_t k = 0; k < K; ++k) logw[k] = std::log(d.weight(k));
    std::vector<double> lp(K);
    double ll = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& x = ds[i].x;
        for (std::size_t k = 0; k < K; ++k) {
            double v = logw[k];
            for (std::size_t f = 0; f < x.size(); ++f)
                if (x.observed(f)) v += std::log(d.prob(k, f, x[f]));
            lp[k] = v;
        }
        const double lse = log_sum_exp(lp);
        ll += lse;
        for (std::size_t k = 0; k < K; ++k)
            resp[i * K + k] = std::isfinite(lse) ? std::exp(lp[k] - lse) : 1.0 / K;
    }
    return ll;
}

double log_prior(const MixtureDensity& d, double eps) {
    if (eps == 0.0) return 0.0;
    double s = 0.0;
    for (std::size_t k = 0; k < d.components(); ++k) {
        s += std::log(d.weight(k));
        for (std::size_t f = 0; f < d.features(); ++f)
            for (double p : d.table(k, f)) s += std::log(p);
    }
    return eps * s;
}

}  // namespace

double log_likelihood(const MixtureDensity& d, const Dataset& ds) {
    std::vector<double> resp(ds.size() * d.components());
    return e_step(d, ds, resp);
}

EmResult em_fit(const Dataset& ds, const EmOptions& opts) {
    if (opts.components < 1) throw Error("EM needs at least one component");
    if (ds.empty()) throw Error("EM needs a non-empty dataset");
    if (!(opts.epsilon >= 0.0)) throw Error("smoothing epsilon must be non-negative");
    const auto K = static_cast<std::size_t>(opts.components);
    const auto cards = ds.schema().cardinalities();

    EmResult result;
    if (K > ds.size())
        result.warnings.push_back("component count " + std::to_string(K) +
                                  " exceeds row count " + std::to_string(ds.size()));

    // Random initial responsibilities.
    Rng rng(opts.seed);
    std::vector<double> resp(ds.size() * K);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            resp[i * K + k] = 1e-3 + rng.uniform();
            s += resp[i * K + k];
        }
        for (std::size_t k = 0; k < K; ++k) resp[i * K + k] /= s;
    }

    MixtureDensity d = m_step(accumulate(ds, resp, K, cards), cards, opts.epsilon, ds.size());
    double ll = e_step(d, ds, resp);
    result.log_likelihood.push_back(ll);
    result.objective.push_back(ll + log_prior(d, opts.epsilon));

    for (int it = 0; it < opts.max_iters; ++it) {
        d = m_step(accumulate(ds, resp, K, cards), cards, opts.epsilon, ds.size());
        const double prev = ll;
        ll = e_step(d, ds, resp);
        result.log_likelihood.push_back(ll);
        result.objective.push_back(ll + log_prior(d, opts.epsilon));
        result.iterations = it + 1;
        if (std::abs(ll - prev) <= opts.rel_tol * std::abs(prev)) {
            result.converged = true;
            break;
        }
    }
    result.density = std::move(d);
    return result;
}

}  // namespace exptree
