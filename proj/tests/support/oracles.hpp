#pragma once

// Independent reference implementations used only by tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

namespace oracle {

/// Average ranks by counting, O(n^2): rank = #less + (#equal + 1) / 2.
inline std::vector<double> naive_ranks(const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double less = 0, equal = 0;
        for (double w : v) {
            less += w < v[i];
            equal += w == v[i];
        }
        r[i] = less + (equal + 1.0) / 2.0;
    }
    return r;
}

/// Exact two-sided Mann-Whitney p by dynamic programming over subsets of the
/// pooled sample. Doubled ranks are integers even with ties, so the null
/// distribution of 2*R1 is tabulated exactly. Counts splits with
/// |U - n1*n2/2| >= observed.
inline double exact_mwu_dp(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> pooled(a);
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto ranks = naive_ranks(pooled);
    std::vector<int> r2(ranks.size());
    for (std::size_t i = 0; i < ranks.size(); ++i) r2[i] = static_cast<int>(std::lround(2.0 * ranks[i]));
    const int n1 = static_cast<int>(a.size()), n = static_cast<int>(pooled.size());
    const int max_sum = std::accumulate(r2.begin(), r2.end(), 0);
    // dp[k][s]: number of k-subsets with doubled rank sum s.
    std::vector<std::vector<double>> dp(n1 + 1, std::vector<double>(max_sum + 1, 0.0));
    dp[0][0] = 1.0;
    for (int i = 0; i < n; ++i) {
        for (int k = std::min(i + 1, n1); k >= 1; --k) {
            for (int s = max_sum; s >= r2[i]; --s) dp[k][s] += dp[k - 1][s - r2[i]];
        }
    }
    int obs = 0;
    for (int i = 0; i < n1; ++i) obs += r2[i];
    // 2U = 2R1 - n1(n1+1); center 2*mu = n1*n2.
    const long centre2 = static_cast<long>(n1) * (n - n1);
    const auto dev = [&](long s2) { return std::labs(s2 - static_cast<long>(n1) * (n1 + 1) - centre2); };
    const long obs_dev = dev(obs);
    double hit = 0, total = 0;
    for (int s = 0; s <= max_sum; ++s) {
        total += dp[n1][s];
        if (dev(s) >= obs_dev) hit += dp[n1][s];
    }
    return hit / total;
}

/// Pair counting with ties worth one half.
inline double brute_auroc(const std::vector<double>& scores, const std::vector<bool>& labels) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            den += 1;
            num += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
        }
    }
    return num / den;
}

/// Cohen's d written out by hand from the definition.
inline double hand_cohens_d(const std::vector<double>& a, const std::vector<double>& b) {
    double ma = 0, mb = 0;
    for (double x : a) ma += x;
    for (double x : b) mb += x;
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(b.size());
    double sa = 0, sb = 0;
    for (double x : a) sa += (x - ma) * (x - ma);
    for (double x : b) sb += (x - mb) * (x - mb);
    const double pooled = std::sqrt((sa + sb) / static_cast<double>(a.size() + b.size() - 2));
    return (ma - mb) / pooled;
}

/// numpy.percentile(method="linear") written from its definition.
inline double numpy_percentile(std::vector<double> v, double pct) {
    std::sort(v.begin(), v.end());
    const double h = (static_cast<double>(v.size()) - 1.0) * pct / 100.0;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Seeded sample of n values; with ties, values are drawn from a small grid.
inline std::vector<double> sample(std::mt19937_64& rng, int n, bool ties, double shift = 0.0) {
    std::vector<double> v(static_cast<std::size_t>(n));
    std::normal_distribution<double> g(shift, 1.0);
    std::uniform_int_distribution<int> grid(0, 5);
    for (auto& x : v) x = ties ? grid(rng) + (shift > 0 ? (grid(rng) < 2 ? 1 : 0) : 0) : g(rng);
    return v;
}

} // namespace oracle
