#include "qdiss/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "qdiss/io.hpp"
#include "qdiss/parallel.hpp"

namespace qdiss {

namespace {

std::vector<double> widen(std::span<const float> v) { return {v.begin(), v.end()}; }

struct PooledRanks {
    std::vector<double> ranks; ///< ranks of a followed by ranks of b
    double tie_term = 0.0;     ///< sum over tie groups of t^3 - t
};

PooledRanks pooled_ranks(std::span<const double> a, std::span<const double> b) {
    std::vector<double> pooled;
    pooled.reserve(a.size() + b.size());
    pooled.insert(pooled.end(), a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());

    std::vector<std::size_t> order(pooled.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return pooled[i] < pooled[j]; });

    PooledRanks out;
    out.ranks.assign(pooled.size(), 0.0);
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && pooled[order[j + 1]] == pooled[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) out.ranks[order[k]] = avg;
        const double t = static_cast<double>(j - i + 1);
        out.tie_term += t * t * t - t;
        i = j + 1;
    }
    return out;
}

} // namespace

double mean(std::span<const double> v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

std::vector<double> average_ranks(std::span<const double> values) {
    return pooled_ranks(values, std::span<const double>()).ranks;
}

MwuResult mann_whitney_u(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw Error("mann_whitney_u: empty group");
    const double n1 = static_cast<double>(a.size());
    const double n2 = static_cast<double>(b.size());
    const double n = n1 + n2;
    auto pr = pooled_ranks(a, b);
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) rank_sum += pr.ranks[i];

    MwuResult r;
    r.u = rank_sum - n1 * (n1 + 1.0) / 2.0;
    double var = (n1 * n2 / 12.0) * ((n + 1.0) - pr.tie_term / (n * (n - 1.0)));
    if (!(var > 0.0)) {
        r.sigma = 0.0;
        r.p = 1.0;
        return r;
    }
    r.sigma = std::sqrt(var);
    const double dev = std::max(std::abs(r.u - n1 * n2 / 2.0) - 0.5, 0.0);
    r.p = std::min(1.0, std::erfc(dev / r.sigma / std::sqrt(2.0)));
    return r;
}

MwuResult mann_whitney_u(std::span<const float> a, std::span<const float> b) {
    auto wa = widen(a), wb = widen(b);
    return mann_whitney_u(wa, wb);
}

double exact_mwu_p(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw Error("exact_mwu_p: empty group");
    const int n1 = static_cast<int>(a.size());
    const int n = n1 + static_cast<int>(b.size());
    if (n > kExactMwuMaxN) {
        throw Error("exact_mwu_p: n1 + n2 = " + std::to_string(n) + " exceeds enumeration bound " +
                    std::to_string(kExactMwuMaxN));
    }
    // Doubled ranks are integers even with ties, so comparisons stay exact.
    auto pr = pooled_ranks(a, b);
    std::vector<std::int64_t> r2(pr.ranks.size());
    for (std::size_t i = 0; i < r2.size(); ++i) r2[i] = std::llround(2.0 * pr.ranks[i]);

    const std::int64_t offset = static_cast<std::int64_t>(n1) * (n1 + 1); // 2 * n1(n1+1)/2
    const std::int64_t center = static_cast<std::int64_t>(n1) * (n - n1); // 2 * n1*n2/2
    std::int64_t observed = 0;
    for (int i = 0; i < n1; ++i) observed += r2[i];
    const std::int64_t observed_dev = std::llabs((observed - offset) - center);

    std::uint64_t extreme = 0, total = 0;
    std::uint32_t mask = (1u << n1) - 1u;
    const std::uint32_t limit = 1u << n;
    while (mask < limit) {
        std::int64_t s = 0;
        for (std::uint32_t m = mask; m; m &= m - 1) s += r2[static_cast<std::size_t>(__builtin_ctz(m))];
        if (std::llabs((s - offset) - center) >= observed_dev) ++extreme;
        ++total;
        // Gosper's hack: next mask with the same popcount.
        const std::uint32_t c = mask & (~mask + 1u);
        const std::uint32_t r = mask + c;
        if (r == 0) break;
        mask = (((r ^ mask) >> 2) / c) | r;
    }
    return static_cast<double>(extreme) / static_cast<double>(total);
}

CohenD cohens_d(std::span<const double> a, std::span<const double> b) {
    const std::size_t n1 = a.size(), n2 = b.size();
    if (n1 == 0 || n2 == 0 || n1 + n2 < 3) throw Error("cohens_d: need n1 + n2 >= 3 with both groups non-empty");
    const double m1 = mean(a), m2 = mean(b);
    double ss1 = 0.0, ss2 = 0.0;
    for (double x : a) ss1 += (x - m1) * (x - m1);
    for (double x : b) ss2 += (x - m2) * (x - m2);
    const double sp = std::sqrt((ss1 + ss2) / static_cast<double>(n1 + n2 - 2));
    if (sp == 0.0) {
        if (m1 == m2) return {0.0, false};
        return {m1 > m2 ? kDegenerateEffect : -kDegenerateEffect, true};
    }
    return {(m1 - m2) / sp, false};
}

CohenD cohens_d(std::span<const float> a, std::span<const float> b) {
    auto wa = widen(a), wb = widen(b);
    return cohens_d(wa, wb);
}

std::string_view category_name(Category c) {
    switch (c) {
    case Category::PureUncertainty: return "pure_uncertainty";
    case Category::PureIncorrectness: return "pure_incorrectness";
    case Category::Confounded: return "confounded";
    case Category::None: return "none";
    }
    return "none";
}

Category parse_category(std::string_view name) {
    if (name == "pure_uncertainty" || name == "uncertainty") return Category::PureUncertainty;
    if (name == "pure_incorrectness" || name == "incorrectness") return Category::PureIncorrectness;
    if (name == "confounded") return Category::Confounded;
    if (name == "none") return Category::None;
    throw Error("unknown feature category '" + std::string(name) + "'");
}

std::vector<float> LatentMatrix::column(int feature) const {
    const std::size_t n = rows();
    std::vector<float> out(n);
    for (std::size_t r = 0; r < n; ++r) out[r] = values[r * static_cast<std::size_t>(n_features) + feature];
    return out;
}

FeatureStat classify_feature(int layer, int feature, std::span<const float> a, std::span<const float> b,
                             std::span<const float> c, double alpha) {
    FeatureStat st;
    st.layer = layer;
    st.feature = feature;
    auto compare = [&](std::span<const float> group, double& p, double& d) -> bool {
        if (group.empty() || a.empty() || group.size() + a.size() < 3) {
            p = 1.0;
            d = 0.0;
            st.degenerate = true;
            return false;
        }
        p = mann_whitney_u(group, a).p;
        auto cd = cohens_d(group, a);
        d = cd.d;
        st.degenerate = st.degenerate || cd.degenerate;
        return p < alpha && d > 0.0;
    };
    const bool hit_unc = compare(c, st.p_unc, st.d_unc);
    const bool hit_inc = compare(b, st.p_inc, st.d_inc);
    if (hit_unc && hit_inc) {
        st.category = Category::Confounded;
        st.effect = std::min(st.d_unc, st.d_inc);
    } else if (hit_unc) {
        st.category = Category::PureUncertainty;
        st.effect = st.d_unc;
    } else if (hit_inc) {
        st.category = Category::PureIncorrectness;
        st.effect = st.d_inc;
    }
    return st;
}

std::vector<FeatureStat> classify_features(const GroupLatents& groups, double alpha, int jobs) {
    const int m = groups.a.n_features;
    if (groups.b.n_features != m || groups.c.n_features != m) throw Error("classify_features: feature count mismatch");
    std::vector<FeatureStat> out(static_cast<std::size_t>(m));
    parallel_for(static_cast<std::size_t>(m), jobs, [&](std::size_t f) {
        const int fi = static_cast<int>(f);
        auto a = groups.a.column(fi), b = groups.b.column(fi), c = groups.c.column(fi);
        out[f] = classify_feature(groups.layer, fi, a, b, c, alpha);
    });
    return out;
}

std::map<int, std::vector<FeatureStat>> rank_top_k(std::span<const FeatureStat> stats, int k, Category category) {
    if (k < 1) throw Error("rank_top_k: k must be >= 1");
    std::map<int, std::vector<FeatureStat>> out;
    for (const auto& s : stats) {
        if (s.category == category) out[s.layer].push_back(s);
    }
    for (auto& [layer, v] : out) {
        std::sort(v.begin(), v.end(), [](const FeatureStat& x, const FeatureStat& y) {
            if (x.effect != y.effect) return x.effect > y.effect;
            return x.feature < y.feature;
        });
        if (v.size() > static_cast<std::size_t>(k)) v.resize(static_cast<std::size_t>(k));
    }
    return out;
}

double auroc(std::span<const double> scores, std::span<const bool> labels) {
    if (scores.size() != labels.size()) throw Error("auroc: scores and labels differ in length");
    std::size_t n_pos = 0;
    for (bool l : labels) n_pos += l ? 1 : 0;
    const std::size_t n_neg = labels.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw Error("auroc: need both positive and negative labels");
    auto ranks = average_ranks(scores);
    double pos_rank_sum = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i]) pos_rank_sum += ranks[i];
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double auroc(std::span<const double> scores, const std::vector<bool>& labels) {
    std::unique_ptr<bool[]> tmp(new bool[labels.size()]);
    for (std::size_t i = 0; i < labels.size(); ++i) tmp[i] = labels[i];
    return auroc(scores, std::span<const bool>(tmp.get(), labels.size()));
}

double percentile_inclusive(std::vector<double> values, double pct) {
    if (values.empty()) throw Error("percentile of empty sample");
    if (!(pct >= 0.0 && pct <= 100.0)) throw Error("percentile must be within [0, 100]");
    std::sort(values.begin(), values.end());
    const double pos = (static_cast<double>(values.size()) - 1.0) * pct / 100.0;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

std::string stats_csv(std::span<const FeatureStat> stats) {
    std::string out = "layer,feature,p_unc,d_unc,p_inc,d_inc,category,effect,degenerate\n";
    for (const auto& s : stats) {
        out += fmt::format("{},{},{},{},{},{},{},{},{}\n", s.layer, s.feature, s.p_unc, s.d_unc, s.p_inc, s.d_inc,
                           category_name(s.category), s.effect, s.degenerate ? 1 : 0);
    }
    return out;
}

std::vector<FeatureStat> parse_stats_csv(std::string_view text) {
    std::vector<FeatureStat> out;
    std::istringstream in{std::string(text)};
    std::string line;
    bool header_seen = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            header_seen = true;
            continue;
        }
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (cells.size() < 8) throw Error("stats csv line " + std::to_string(lineno) + ": expected 8+ columns");
        FeatureStat s;
        s.layer = std::stoi(cells[0]);
        s.feature = std::stoi(cells[1]);
        s.p_unc = std::stod(cells[2]);
        s.d_unc = std::stod(cells[3]);
        s.p_inc = std::stod(cells[4]);
        s.d_inc = std::stod(cells[5]);
        s.category = parse_category(cells[6]);
        s.effect = std::stod(cells[7]);
        s.degenerate = cells.size() > 8 && cells[8] == "1";
        out.push_back(s);
    }
    return out;
}

} // namespace qdiss
