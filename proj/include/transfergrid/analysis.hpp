#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "transfergrid/errors.hpp"
#include "transfergrid/rng.hpp"
#include "transfergrid/transfer.hpp"

namespace transfergrid {

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Inverse standard normal CDF: Acklam's rational approximation plus one
// Halley refinement step; absolute error well under 1e-9.
inline double norm_quantile(double p) {
    if (!(p > 0 && p < 1)) throw std::invalid_argument("norm_quantile: p must be in (0,1)");
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,  -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01, -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double p_low = 0.02425, p_high = 1 - p_low;
    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    } else if (p <= p_high) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
    } else {
        const double q = std::sqrt(-2 * std::log(1 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    const double e = norm_cdf(x) - p;
    const double u = e * std::sqrt(2 * std::numbers::pi) * std::exp(x * x / 2);
    return x - u / (1 + x * u / 2);
}

// Rescaled transferability: s_{S,T} = max(a_{S,T} - c_T, 0) / (a_{T,T} - c_T)
// on fold-mean accuracies. Targets whose own reference does not beat chance
// have no defined scale; their column is flagged rather than silently kept.
struct TransferabilityScores {
    std::string arch;
    std::vector<std::string> tasks;
    std::vector<double> scores;        // n*n row-major; NaN where undefined
    std::vector<bool> target_defined;  // per target column

    size_t n() const { return tasks.size(); }
    double at(size_t s, size_t t) const { return scores.at(s * n() + t); }

    void write_csv(std::ostream& os) const {
        os << "source\\target";
        for (const auto& t : tasks) os << "," << t;
        os << "\n";
        char buf[48];
        for (size_t s = 0; s < n(); ++s) {
            os << tasks[s];
            for (size_t t = 0; t < n(); ++t) {
                if (!target_defined[t]) {
                    os << ",nan";
                } else {
                    std::snprintf(buf, sizeof buf, ",%.6f", at(s, t));
                    os << buf;
                }
            }
            os << "\n";
        }
    }
};

inline TransferabilityScores rescale_scores(const TransferMatrix& matrix) {
    TransferabilityScores out;
    out.arch = matrix.arch;
    out.tasks = matrix.tasks;
    const size_t n = matrix.tasks.size();
    out.scores.assign(n * n, std::numeric_limits<double>::quiet_NaN());
    out.target_defined.assign(n, true);
    for (size_t t = 0; t < n; ++t) {
        const double ref = matrix.cell(t, t).mean(), c = matrix.chance[t];
        if (ref <= c) {
            out.target_defined[t] = false;
            std::fprintf(stderr,
                         "warning: target %s reference accuracy %.4f does not beat chance %.4f; "
                         "its score column is undefined\n",
                         matrix.tasks[t].c_str(), ref, c);
            continue;
        }
        for (size_t s = 0; s < n; ++s)
            out.scores[s * n + t] = std::max(matrix.cell(s, t).mean() - c, 0.0) / (ref - c);
    }
    return out;
}

namespace detail {

inline std::string dot_escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        if (ch == '"' || ch == '\\') out += '\\';
        out += ch;
    }
    return out;
}

}  // namespace detail

// Directed transfer graph in DOT form: every task is a node, and S -> T is an
// edge whenever s_{S,T} > threshold (S != T, T defined), with penwidth
// proportional to the score. Layout is left to external tools.
inline std::string emit_transfer_graph(const TransferabilityScores& scores, double threshold) {
    std::string out = "digraph transferability {\n";
    std::vector<std::string> sorted = scores.tasks;
    std::sort(sorted.begin(), sorted.end());
    for (const auto& t : sorted) out += "  \"" + detail::dot_escape(t) + "\";\n";
    char buf[64];
    const size_t n = scores.n();
    for (size_t s = 0; s < n; ++s)
        for (size_t t = 0; t < n; ++t) {
            if (s == t || !scores.target_defined[t]) continue;
            const double v = scores.at(s, t);
            if (!(v > threshold)) continue;
            std::snprintf(buf, sizeof buf, " [penwidth=%.3f];\n", 3.0 * v);
            out += "  \"" + detail::dot_escape(scores.tasks[s]) + "\" -> \"" + detail::dot_escape(scores.tasks[t]) +
                   "\"" + buf;
        }
    out += "}\n";
    return out;
}

struct Dendrogram {
    std::vector<std::string> leaves;
    struct Merge {
        size_t a = 0, b = 0;   // node ids: leaves 0..n-1, merge i creates n+i
        double height = 0;
        size_t size = 0;  // leaves under the merged node
    };
    std::vector<Merge> merges;

    json to_json() const {
        json j;
        j["leaves"] = leaves;
        j["merges"] = json::array();
        for (const auto& m : merges) j["merges"].push_back({{"a", m.a}, {"b", m.b}, {"height", m.height}, {"size", m.size}});
        j["newick"] = newick();
        return j;
    }

    std::string newick() const {
        const size_t n = leaves.size();
        std::vector<std::string> label(n + merges.size());
        std::vector<double> height(n + merges.size(), 0.0);
        for (size_t i = 0; i < n; ++i) label[i] = leaves[i];
        char buf[48];
        auto branch = [&](size_t child, double parent_h) {
            std::snprintf(buf, sizeof buf, ":%.9g", parent_h - height[child]);
            return label[child] + buf;
        };
        for (size_t i = 0; i < merges.size(); ++i) {
            const Merge& m = merges[i];
            label[n + i] = "(" + branch(m.a, m.height) + "," + branch(m.b, m.height) + ")";
            height[n + i] = m.height;
        }
        return (merges.empty() ? (label.empty() ? std::string() : label[0]) : label[n + merges.size() - 1]) + ";";
    }
};

// UPGMA over Euclidean distances between score rows. Merge height is half
// the inter-cluster distance; ties pick the first minimal pair in creation
// order (leaves in task order, then merge order). Undefined target columns
// are dropped from every row vector before computing distances.
inline Dendrogram upgma_cluster(const TransferabilityScores& scores) {
    const size_t n = scores.n();
    if (n < 2) throw DataError("upgma_cluster: need at least 2 tasks");
    std::vector<size_t> cols;
    for (size_t t = 0; t < n; ++t)
        if (scores.target_defined[t]) cols.push_back(t);
    if (cols.empty()) throw DataError("upgma_cluster: every target column is undefined");
    for (size_t s = 0; s < n; ++s)
        for (size_t t : cols)
            if (!std::isfinite(scores.at(s, t))) throw DataError("upgma_cluster: non-finite score row");

    // Active clusters: (node id, leaf count); D holds pairwise distances in
    // the same index order.
    std::vector<size_t> id(n), sz(n, 1);
    for (size_t i = 0; i < n; ++i) id[i] = i;
    std::vector<std::vector<double>> D(n, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            double d2 = 0;
            for (size_t t : cols) {
                const double diff = scores.at(i, t) - scores.at(j, t);
                d2 += diff * diff;
            }
            D[i][j] = D[j][i] = std::sqrt(d2);
        }

    Dendrogram out;
    out.leaves = scores.tasks;
    size_t next_id = n;
    while (id.size() > 1) {
        size_t bi = 0, bj = 1;
        for (size_t i = 0; i < id.size(); ++i)
            for (size_t j = i + 1; j < id.size(); ++j)
                if (D[i][j] < D[bi][bj]) {
                    bi = i;
                    bj = j;
                }
        const double d = D[bi][bj];
        const size_t na = sz[bi], nb = sz[bj];
        Dendrogram::Merge m;
        m.a = std::min(id[bi], id[bj]);
        m.b = std::max(id[bi], id[bj]);
        m.height = d / 2;
        m.size = na + nb;
        if (!out.merges.empty() && m.height < out.merges.back().height - 1e-12)
            throw std::logic_error("upgma_cluster: non-monotone merge heights");
        out.merges.push_back(m);

        // Lance-Williams update for average linkage: d(k, i+j) =
        // (n_i d(k,i) + n_j d(k,j)) / (n_i + n_j); merged cluster replaces
        // slot bi, slot bj removed.
        for (size_t k = 0; k < id.size(); ++k) {
            if (k == bi || k == bj) continue;
            const double dk = (static_cast<double>(na) * D[k][bi] + static_cast<double>(nb) * D[k][bj]) /
                              static_cast<double>(na + nb);
            D[k][bi] = D[bi][k] = dk;
        }
        id[bi] = next_id++;
        sz[bi] = na + nb;
        id.erase(id.begin() + static_cast<ptrdiff_t>(bj));
        sz.erase(sz.begin() + static_cast<ptrdiff_t>(bj));
        for (auto& row : D) row.erase(row.begin() + static_cast<ptrdiff_t>(bj));
        D.erase(D.begin() + static_cast<ptrdiff_t>(bj));
    }
    return out;
}

struct SignedRankResult {
    double p = 1;
    double statistic = 0;  // W: rank sum of positive differences
    size_t n_nonzero = 0;
    bool degenerate = false;  // all differences zero
    bool exhaustive = false;
};

// Wilcoxon signed-rank with a permutation (sign-flip) null: exhaustive over
// all 2^n sign patterns when n <= 12, otherwise seeded Monte Carlo with the
// add-one correction. Two-sided. Zero differences are dropped; tied absolute
// differences get midranks. Ranks are handled in half-units so comparisons
// stay exact integer arithmetic.
inline SignedRankResult permutation_signed_rank(const std::vector<double>& x, const std::vector<double>& y,
                                                size_t n_permutations, uint64_t seed) {
    if (x.size() != y.size()) throw std::invalid_argument("permutation_signed_rank: length mismatch");
    if (x.size() < 2) throw std::invalid_argument("permutation_signed_rank: need at least 2 pairs");

    std::vector<double> diff;
    for (size_t i = 0; i < x.size(); ++i)
        if (x[i] != y[i]) diff.push_back(x[i] - y[i]);

    SignedRankResult res;
    res.n_nonzero = diff.size();
    if (diff.empty()) {
        res.degenerate = true;
        res.p = 1;
        return res;
    }

    const size_t n = diff.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return std::abs(diff[a]) < std::abs(diff[b]); });
    // rank2[i] = 2 * midrank of |diff[i]|
    std::vector<long long> rank2(n);
    for (size_t lo = 0; lo < n;) {
        size_t hi = lo + 1;
        while (hi < n && std::abs(diff[order[hi]]) == std::abs(diff[order[lo]])) ++hi;
        const long long r2 = static_cast<long long>(lo + 1 + hi);  // 2 * avg(lo+1 .. hi)
        for (size_t i = lo; i < hi; ++i) rank2[order[i]] = r2;
        lo = hi;
    }

    long long w2 = 0, total2 = 0;
    for (size_t i = 0; i < n; ++i) {
        total2 += rank2[i];
        if (diff[i] > 0) w2 += rank2[i];
    }
    res.statistic = static_cast<double>(w2) / 2.0;
    // Compare |T - mu| against |W - mu| scaled by 4: with T = t2/2 and
    // mu = total2/4, |4T - 4mu| = |2*t2 - total2|, exact in integers.
    const long long obs4 = std::llabs(2 * w2 - total2);
    auto dev4 = [&](long long t2) { return std::llabs(2 * t2 - total2); };

    if (n <= 12) {
        res.exhaustive = true;
        const size_t total = size_t(1) << n;
        size_t count = 0;
        for (size_t bits = 0; bits < total; ++bits) {
            long long t2 = 0;
            for (size_t i = 0; i < n; ++i)
                if (bits & (size_t(1) << i)) t2 += rank2[i];
            if (dev4(t2) >= obs4) ++count;
        }
        res.p = static_cast<double>(count) / static_cast<double>(total);
    } else {
        if (n_permutations == 0) throw std::invalid_argument("permutation_signed_rank: n_permutations must be > 0");
        Rng rng(derive_seed(seed, "permtest"));
        size_t count = 0;
        for (size_t rep = 0; rep < n_permutations; ++rep) {
            long long t2 = 0;
            uint64_t bits = 0;
            for (size_t i = 0; i < n; ++i) {
                if (i % 64 == 0) bits = rng.next_u64();
                if (bits & 1) t2 += rank2[i];
                bits >>= 1;
            }
            if (dev4(t2) >= obs4) ++count;
        }
        res.p = static_cast<double>(count + 1) / static_cast<double>(n_permutations + 1);
    }
    return res;
}

// Stouffer's method: z_i = Phi^-1(1 - p_i), Z = sum(w_i z_i)/sqrt(sum w_i^2),
// combined p = 1 - Phi(Z). Out-of-range p values are clamped with a warning.
inline double stouffer_combine(const std::vector<double>& p_values, const std::vector<double>& weights) {
    if (p_values.empty()) throw std::invalid_argument("stouffer_combine: no p-values");
    if (p_values.size() != weights.size()) throw std::invalid_argument("stouffer_combine: weight count mismatch");
    double num = 0, den = 0;
    for (size_t i = 0; i < p_values.size(); ++i) {
        if (weights[i] <= 0) throw std::invalid_argument("stouffer_combine: weights must be positive");
        double p = p_values[i];
        if (p < 1e-15 || p > 1 - 1e-15) {
            std::fprintf(stderr, "warning: stouffer_combine clamping p=%.3g into [1e-15, 1-1e-15]\n", p);
            p = std::min(std::max(p, 1e-15), 1 - 1e-15);
        }
        num += weights[i] * norm_quantile(1 - p);
        den += weights[i] * weights[i];
    }
    return 1 - norm_cdf(num / std::sqrt(den));
}

inline std::vector<double> bonferroni_adjust(const std::vector<double>& p_values) {
    const double m = static_cast<double>(p_values.size());
    std::vector<double> out;
    out.reserve(p_values.size());
    for (double p : p_values) out.push_back(std::min(m * p, 1.0));
    return out;
}

struct SmdResult {
    double value = 0;
    bool defined = false;
};

// Paired effect size: mean(x - y) / sd(x - y), sample sd (ddof = 1).
inline SmdResult standardized_mean_difference(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("standardized_mean_difference: length mismatch");
    if (x.size() < 2) throw std::invalid_argument("standardized_mean_difference: need at least 2 pairs");
    const size_t n = x.size();
    double mean = 0;
    for (size_t i = 0; i < n; ++i) mean += x[i] - y[i];
    mean /= static_cast<double>(n);
    double ss = 0;
    for (size_t i = 0; i < n; ++i) {
        const double d = x[i] - y[i] - mean;
        ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    SmdResult res;
    if (sd > 0) {
        res.defined = true;
        res.value = mean / sd;
    }
    return res;
}

}  // namespace transfergrid
