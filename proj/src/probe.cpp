#include "qdiss/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace qdiss {

namespace {

double sigmoid(double s) {
    if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
    const double e = std::exp(s);
    return e / (1.0 + e);
}

double feature_value(const std::vector<float>& row, int id) {
    if (id < 0 || static_cast<std::size_t>(id) >= row.size()) {
        throw Error(fmt::format("probe: feature {} missing from activation row of width {}", id, row.size()));
    }
    return row[static_cast<std::size_t>(id)];
}

} // namespace

ProbeModel fit_probe(const FeatureRows& acts, const std::vector<bool>& correct, int layer,
                     const std::vector<int>& feature_ids, double l2_weight, std::uint64_t seed) {
    if (acts.size() != correct.size()) throw Error("fit_probe: activations and labels differ in length");
    const std::size_t n = acts.size();
    const auto n_pos = static_cast<std::size_t>(std::count(correct.begin(), correct.end(), true));
    if (n_pos == 0 || n_pos == n) throw Error("fit_probe: labels contain a single class");
    if (l2_weight < 0) throw Error("fit_probe: l2_weight must be >= 0");

    ProbeModel m;
    m.layer = layer;
    m.l2_weight = l2_weight;
    m.seed = seed;
    for (int id : feature_ids) {
        double mu = 0.0;
        for (const auto& row : acts) mu += feature_value(row, id);
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (const auto& row : acts) var += (feature_value(row, id) - mu) * (feature_value(row, id) - mu);
        const double sd = std::sqrt(var / static_cast<double>(n));
        if (sd > 0.0) {
            m.feature_ids.push_back(id);
            m.mean.push_back(mu);
            m.stddev.push_back(sd);
        }
    }
    if (m.feature_ids.empty()) throw Error("fit_probe: every candidate feature has zero variance");

    const std::size_t p = m.feature_ids.size();
    std::vector<double> x(n * p);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < p; ++k)
            x[i * p + k] = (feature_value(acts[i], m.feature_ids[k]) - m.mean[k]) / m.stddev[k];

    // Standardized columns bound the Hessian's top eigenvalue by (p + 1) / 4 + l2 / n.
    const double nd = static_cast<double>(n);
    const double lr = 1.0 / (0.25 * static_cast<double>(p + 1) + l2_weight / nd);
    m.weights.assign(p, 0.0);
    std::vector<double> grad(p);
    for (m.iterations = 0; m.iterations < kProbeMaxIterations; ++m.iterations) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double s = m.bias;
            for (std::size_t k = 0; k < p; ++k) s += m.weights[k] * x[i * p + k];
            const double r = sigmoid(s) - (correct[i] ? 1.0 : 0.0);
            for (std::size_t k = 0; k < p; ++k) grad[k] += r * x[i * p + k];
            gb += r;
        }
        double norm2 = (gb / nd) * (gb / nd);
        for (std::size_t k = 0; k < p; ++k) {
            grad[k] = grad[k] / nd + l2_weight / nd * m.weights[k];
            norm2 += grad[k] * grad[k];
        }
        m.grad_norm = std::sqrt(norm2);
        if (m.grad_norm <= kProbeGradTolerance) break;
        for (std::size_t k = 0; k < p; ++k) m.weights[k] -= lr * grad[k];
        m.bias -= lr * gb / nd;
    }
    return m;
}

std::vector<double> probe_scores(const ProbeModel& model, const FeatureRows& acts) {
    std::vector<double> out;
    out.reserve(acts.size());
    for (const auto& row : acts) {
        double s = model.bias;
        for (std::size_t k = 0; k < model.feature_ids.size(); ++k) {
            s += model.weights[k] * (feature_value(row, model.feature_ids[k]) - model.mean[k]) / model.stddev[k];
        }
        out.push_back(s);
    }
    return out;
}

std::vector<double> predict_p_correct(const ProbeModel& model, const FeatureRows& acts) {
    auto s = probe_scores(model, acts);
    for (double& v : s) v = sigmoid(v);
    return s;
}

SparseSelection select_sparse(const ProbeModel& full, int k, const FeatureRows& acts, const std::vector<bool>& correct) {
    const int available = static_cast<int>(full.feature_ids.size());
    if (k < 1) throw Error("select_sparse: k must be >= 1");
    if (k > available) throw Error(fmt::format("select_sparse: k={} exceeds the {} available features", k, available));
    std::vector<std::size_t> order(full.feature_ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double wa = std::abs(full.weights[a]), wb = std::abs(full.weights[b]);
        if (wa != wb) return wa > wb;
        return full.feature_ids[a] < full.feature_ids[b];
    });
    SparseSelection sel;
    for (int i = 0; i < k; ++i) sel.feature_ids.push_back(full.feature_ids[order[static_cast<std::size_t>(i)]]);
    std::sort(sel.feature_ids.begin(), sel.feature_ids.end());
    sel.refit = fit_probe(acts, correct, full.layer, sel.feature_ids, full.l2_weight, full.seed);
    return sel;
}

std::vector<AbstentionRow> abstention_sweep(const std::vector<double>& p_correct, const std::vector<bool>& correct,
                                            const std::vector<double>& thresholds) {
    if (p_correct.size() != correct.size()) throw Error("abstention_sweep: scores and labels differ in length");
    if (!std::is_sorted(thresholds.begin(), thresholds.end())) throw Error("abstention_sweep: thresholds must be ascending");
    const int total = static_cast<int>(correct.size());
    const int n_correct = static_cast<int>(std::count(correct.begin(), correct.end(), true));
    const double base = total ? static_cast<double>(n_correct) / total : 0.0;
    std::vector<AbstentionRow> rows;
    for (double t : thresholds) {
        AbstentionRow r;
        r.threshold = t;
        int right = 0;
        for (std::size_t i = 0; i < p_correct.size(); ++i) {
            if (p_correct[i] >= t) {
                ++r.answered;
                right += correct[i] ? 1 : 0;
            }
        }
        r.abstained = total - r.answered;
        r.coverage = total ? static_cast<double>(r.answered) / total : 0.0;
        r.accuracy_on_answered = r.answered ? static_cast<double>(right) / r.answered : 0.0;
        r.gain_vs_baseline = r.answered ? 100.0 * (r.accuracy_on_answered - base) : 0.0;
        rows.push_back(r);
    }
    return rows;
}

std::string abstention_csv(std::span<const AbstentionRow> rows) {
    std::string out = "threshold,answered,abstained,coverage,accuracy_on_answered,gain_vs_baseline\n";
    for (const auto& r : rows) {
        out += fmt::format("{:.2f},{},{},{},{},{}\n", r.threshold, r.answered, r.abstained, r.coverage,
                           r.accuracy_on_answered, r.gain_vs_baseline);
    }
    return out;
}

json probe_to_json(const ProbeModel& m) {
    return {{"kind", "probe"},        {"layer", m.layer},         {"feature_ids", m.feature_ids},
            {"weights", m.weights},   {"bias", m.bias},           {"mean", m.mean},
            {"stddev", m.stddev},     {"l2_weight", m.l2_weight}, {"seed", m.seed},
            {"iterations", m.iterations}, {"grad_norm", m.grad_norm}};
}

ProbeModel probe_from_json(const json& j) {
    ProbeModel m;
    m.layer = j.at("layer").get<int>();
    m.feature_ids = j.at("feature_ids").get<std::vector<int>>();
    m.weights = j.at("weights").get<std::vector<double>>();
    m.bias = j.at("bias").get<double>();
    m.mean = j.at("mean").get<std::vector<double>>();
    m.stddev = j.at("stddev").get<std::vector<double>>();
    m.l2_weight = j.value("l2_weight", 1.0);
    m.seed = j.value("seed", std::uint64_t{0});
    m.iterations = j.value("iterations", 0);
    m.grad_norm = j.value("grad_norm", 0.0);
    const auto p = m.feature_ids.size();
    if (m.weights.size() != p || m.mean.size() != p || m.stddev.size() != p) {
        throw Error("probe JSON: feature_ids, weights, mean and stddev lengths differ");
    }
    return m;
}

} // namespace qdiss
