#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qdiss {

struct MwuResult {
    double u = 0.0;       ///< U statistic for the first sample
    double p = 1.0;       ///< two-sided p, tie-corrected normal approximation
    double sigma = 0.0;   ///< standard deviation of U under the null
};

/// Mann-Whitney U with average ranks for ties and a 0.5 continuity correction.
MwuResult mann_whitney_u(std::span<const double> a, std::span<const double> b);
MwuResult mann_whitney_u(std::span<const float> a, std::span<const float> b);

inline constexpr int kExactMwuMaxN = 24;

/// Exact two-sided p by enumerating every split of the pooled sample.
/// Counts splits with |U - n1*n2/2| >= the observed deviation. Requires n1 + n2 <= 24.
double exact_mwu_p(std::span<const double> a, std::span<const double> b);

struct CohenD {
    double d = 0.0;
    bool degenerate = false; ///< pooled SD was zero while the means differ
};

inline constexpr double kDegenerateEffect = 1e6;

/// (mean(a) - mean(b)) / s_p with s_p pooled using (n-1) weights.
CohenD cohens_d(std::span<const double> a, std::span<const double> b);
CohenD cohens_d(std::span<const float> a, std::span<const float> b);

enum class Category { PureUncertainty, PureIncorrectness, Confounded, None };

std::string_view category_name(Category c);
Category parse_category(std::string_view name);
inline constexpr Category kFeatureCategories[] = {Category::PureUncertainty, Category::PureIncorrectness,
                                                   Category::Confounded};

struct FeatureStat {
    int layer = 0;
    int feature = 0;
    double p_unc = 1.0; ///< C vs A
    double d_unc = 0.0;
    double p_inc = 1.0; ///< B vs A
    double d_inc = 0.0;
    Category category = Category::None;
    double effect = 0.0;
    bool degenerate = false;
};

/// Row-major latents for one quadrant group: rows = questions, columns = features.
struct LatentMatrix {
    int n_features = 0;
    std::vector<float> values;

    std::size_t rows() const { return n_features ? values.size() / static_cast<std::size_t>(n_features) : 0; }
    std::vector<float> column(int feature) const;
};

struct GroupLatents {
    int layer = 0;
    LatentMatrix a; ///< confident-correct
    LatentMatrix b; ///< confident-incorrect
    LatentMatrix c; ///< uncertain-correct
};

/// Applies the two-comparison rule to one feature's samples.
FeatureStat classify_feature(int layer, int feature, std::span<const float> a, std::span<const float> b,
                             std::span<const float> c, double alpha);

/// Classifies every feature of a layer; results are ordered by feature index
/// regardless of `jobs`.
std::vector<FeatureStat> classify_features(const GroupLatents& groups, double alpha, int jobs = 1);

/// Per layer, the at most k features of `category` with the largest effect
/// (ties by lower feature index).
std::map<int, std::vector<FeatureStat>> rank_top_k(std::span<const FeatureStat> stats, int k, Category category);

/// Probability that a random positive outscores a random negative; ties count 1/2.
double auroc(std::span<const double> scores, std::span<const bool> labels);
double auroc(std::span<const double> scores, const std::vector<bool>& labels);

/// Average ranks (1-based) of the values; ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

/// Linear interpolation between closest ranks on sorted data (numpy "linear").
double percentile_inclusive(std::vector<double> values, double pct);

double mean(std::span<const double> v);

std::string stats_csv(std::span<const FeatureStat> stats);
std::vector<FeatureStat> parse_stats_csv(std::string_view text);

} // namespace qdiss
