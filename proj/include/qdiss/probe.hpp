#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "qdiss/io.hpp"

namespace qdiss {

/// Rows are samples; each row holds a full latent vector for one layer.
using FeatureRows = std::vector<std::vector<float>>;

struct ProbeModel {
    int layer = 0;
    std::vector<int> feature_ids; // zero-variance candidates are dropped before fitting
    std::vector<double> weights;  // on standardized features
    double bias = 0.0;
    std::vector<double> mean;
    std::vector<double> stddev;
    double l2_weight = 1.0;
    std::uint64_t seed = 0;
    int iterations = 0;
    double grad_norm = 0.0;
};

inline constexpr double kProbeGradTolerance = 1e-8;
inline constexpr int kProbeMaxIterations = 10000;

/// Full-batch gradient descent on mean NLL + l2_weight / (2n) * |w|^2 (bias free),
/// from zero, until the gradient norm is <= 1e-8 or 10^4 iterations.
ProbeModel fit_probe(const FeatureRows& acts, const std::vector<bool>& correct, int layer,
                     const std::vector<int>& feature_ids, double l2_weight = 1.0, std::uint64_t seed = 0);

/// Standardized linear score w . (x - mean) / sd + b.
std::vector<double> probe_scores(const ProbeModel& model, const FeatureRows& acts);
std::vector<double> predict_p_correct(const ProbeModel& model, const FeatureRows& acts);

struct SparseSelection {
    std::vector<int> feature_ids; // sorted
    ProbeModel refit;
};

/// The k features with the largest |standardized weight| (ties to the lower id),
/// refit on the same training data.
SparseSelection select_sparse(const ProbeModel& full, int k, const FeatureRows& acts, const std::vector<bool>& correct);

struct AbstentionRow {
    double threshold = 0.0;
    int answered = 0;
    int abstained = 0;
    double coverage = 0.0;
    double accuracy_on_answered = 0.0; // 0 when nothing is answered
    double gain_vs_baseline = 0.0;     // percentage points
};

inline const std::vector<double> kDefaultAbstentionGrid = {0.30, 0.40, 0.50, 0.60, 0.70};

/// Answer iff p_correct >= t.
std::vector<AbstentionRow> abstention_sweep(const std::vector<double>& p_correct, const std::vector<bool>& correct,
                                            const std::vector<double>& thresholds = kDefaultAbstentionGrid);

std::string abstention_csv(std::span<const AbstentionRow> rows);

json probe_to_json(const ProbeModel& m);
ProbeModel probe_from_json(const json& j);

} // namespace qdiss
