#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qdiss/io.hpp"
#include "qdiss/stats.hpp"

namespace qdiss {

inline constexpr double kProbSumTolerance = 1e-6;

/// Outcome of one forward pass over one question.
struct InferenceRecord {
    std::string question_id;
    std::array<double, 4> probs{};
    int gold = 0;
    int predicted = 0;
    bool correct = false;
    double entropy = 0.0; // nats
    std::map<int, std::vector<float>> activations; // layer -> final-token residual
    std::string dataset;
};

/// -sum p ln p with 0 ln 0 = 0. Throws on negative entries or a bad sum.
double answer_entropy(std::span<const double, 4> probs);

/// Lowest index wins ties.
int argmax4(std::span<const double, 4> probs);

InferenceRecord make_record(std::string question_id, const std::array<double, 4>& probs, int gold,
                            std::string dataset, std::map<int, std::vector<float>> activations = {});

enum class Group { A, B, C, D, Excluded };

char group_letter(Group g);

struct QuadrantAssignment {
    std::string question_id;
    Group group = Group::Excluded;
    double lo_threshold = 0.0;
    double hi_threshold = 0.0;
};

struct QuadrantSplit {
    double lo_threshold = 0.0;
    double hi_threshold = 0.0;
    std::vector<QuadrantAssignment> assignments; // parallel to the input records
    std::array<int, 4> counts{};                 // A, B, C, D
    bool empty_group = false;                    // some group has no members

    int count(Group g) const { return g == Group::Excluded ? 0 : counts[static_cast<int>(g)]; }
};

/// Thresholds are the lo/hi percentiles of the entropies (linear interpolation).
/// Confident means strictly below lo, uncertain strictly above hi.
QuadrantSplit assign_quadrants(std::span<const InferenceRecord> records, double lo_pct, double hi_pct);

/// Both thresholds at the median; records tied with the median are excluded.
QuadrantSplit median_split(std::span<const InferenceRecord> records);

std::string assignments_csv(std::span<const InferenceRecord> records, const QuadrantSplit& split);

struct CategoryRetention {
    int n_strict = 0;  // features in the category under the strict split
    int retained = 0;  // of those, same category under the median split
    std::optional<double> fraction; // empty when n_strict == 0
};

struct RetentionMatrix {
    std::map<Category, CategoryRetention> per_category;
    /// (strict category, median category) -> feature count, over all features.
    std::map<std::pair<Category, Category>, int> migrations;
};

/// Compares two classifications of the same (layer, feature) cells.
RetentionMatrix split_sensitivity(std::span<const FeatureStat> strict_stats, std::span<const FeatureStat> median_stats);

std::string retention_csv(const RetentionMatrix& m);

// records.qdt: meta.records holds the scalar fields, blob "acts.<layer>" holds an
// n x d matrix of captured residuals in record order.
void save_records(const std::filesystem::path& path, std::span<const InferenceRecord> records,
                  const json& extra_meta = json::object());
std::vector<InferenceRecord> load_records(const std::filesystem::path& path, json* meta_out = nullptr);

} // namespace qdiss
