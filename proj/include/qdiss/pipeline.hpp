#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "qdiss/io.hpp"
#include "qdiss/quadrant.hpp"
#include "qdiss/runner.hpp"
#include "qdiss/sae.hpp"
#include "qdiss/stats.hpp"

namespace qdiss {

enum class Criterion { Joint, AccOnly, EntropyOnly };

std::string_view criterion_name(Criterion c);
/// Accepts joint, acc, acc_only, entropy, entropy_only.
Criterion parse_criterion(std::string_view s);

/// Pass rule on deltas against the unsuppressed baseline (percentage points, nats).
bool criterion_passes(Criterion c, double acc_delta, double entropy_delta);

struct SuppressionConfig {
    SuppressionMap features;
    json provenance = json::object(); // source_dataset, criterion, seed

    int total() const;
    bool empty() const { return total() == 0; }
};

json suppression_config_to_json(const SuppressionConfig& c);
SuppressionConfig suppression_config_from_json(const json& j);

struct EvalSummary {
    double accuracy = 0.0;     // fraction
    double mean_entropy = 0.0; // nats
    int n_items = 0;
    std::string suppression_hash; // content hash of the suppression map

    bool operator==(const EvalSummary&) const = default;
};

json eval_summary_to_json(const EvalSummary& s);
EvalSummary eval_summary_from_json(const json& j);

/// A named slice of a dataset. Screening refuses anything but "discovery".
struct Split {
    std::string name;
    std::vector<McqItem> items;
};

struct HalfSplit {
    Split discovery;
    Split validation;
};

/// Seeded uniform shuffle, then cut at the midpoint; discovery gets the odd item.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_half(const std::vector<T>& rows, std::uint64_t seed);

HalfSplit split_items(const std::vector<McqItem>& items, std::uint64_t seed);

/// Throws when any question id appears in both halves.
void assert_disjoint(const Split& a, const Split& b);

/// Forwards all items with capture at `layers` and no suppression.
std::vector<InferenceRecord> infer(Runner& runner, const std::vector<McqItem>& items, const std::vector<int>& layers);

struct DiscoveryResult {
    std::vector<FeatureStat> stats;
    QuadrantSplit split;
    std::map<int, std::map<Category, int>> counts; // per layer
    std::vector<int> degenerate_layers;            // layers with an empty A, B or C group
};

/// Latents of the records at one layer through its SAE, grouped A/B/C.
GroupLatents group_latents(std::span<const InferenceRecord> records, const QuadrantSplit& split, const SaeParams& sae);

DiscoveryResult discover(std::span<const InferenceRecord> records, const std::map<int, SaeParams>& saes, double alpha,
                         double lo_pct, double hi_pct, int jobs = 1);

/// Same classification under the median split.
DiscoveryResult discover_median(std::span<const InferenceRecord> records, const std::map<int, SaeParams>& saes,
                                double alpha, int jobs = 1);

std::string counts_csv(const DiscoveryResult& r);

EvalSummary summarize(const ForwardResult& result, const std::vector<McqItem>& items);

/// Caches unsuppressed baselines by content hash of the items.
class Evaluator {
public:
    explicit Evaluator(Runner& runner, int jobs = 1) : runner_(runner), jobs_(jobs) {}

    EvalSummary baseline(const std::vector<McqItem>& items);
    /// Joint suppression of every layer in `config` in one forward.
    EvalSummary evaluate(const std::vector<McqItem>& items, const SuppressionConfig& config);
    Runner& runner() { return runner_; }
    int jobs() const { return jobs_; }

private:
    Runner& runner_;
    int jobs_;
    std::map<std::string, EvalSummary> cache_;
};

EvalSummary evaluate(Runner& runner, const std::vector<McqItem>& items, const SuppressionConfig& config);

struct ScreenRow {
    int layer = 0;
    int feature = 0;
    double acc_delta = 0.0;     // percentage points
    double entropy_delta = 0.0; // nats
    bool pass = false;
    Criterion criterion = Criterion::Joint;
};

struct ScreenResult {
    std::vector<ScreenRow> rows;
    SuppressionConfig config;
    EvalSummary baseline;
};

/// Candidates: per layer, top-k features of one category (rank_top_k output).
ScreenResult screen(Evaluator& ev, const Split& discovery, const std::map<int, std::vector<FeatureStat>>& candidates,
                    Criterion criterion);

/// Re-applies a different criterion to rows already measured.
SuppressionConfig rescreen(const ScreenResult& r, Criterion criterion);

std::string screen_csv(const ScreenResult& r);

/// Features whose latent is nonzero on at least `threshold` of the records.
std::map<int, std::vector<int>> active_features(std::span<const InferenceRecord> records,
                                                const std::map<int, SaeParams>& saes, double threshold);

struct ControlResult {
    SuppressionConfig sampled;  // count-matched sample before screening
    SuppressionConfig survived; // after the joint screen
    std::vector<int> skipped_layers;
};

ControlResult random_control(Evaluator& ev, const Split& discovery, std::span<const InferenceRecord> discovery_records,
                             const std::map<int, SaeParams>& saes, const SuppressionConfig& to_match,
                             double active_threshold, std::uint64_t seed);

struct TransferResult {
    EvalSummary baseline;
    EvalSummary suppressed;
    double acc_delta = 0.0;     // percentage points
    double entropy_delta = 0.0; // nats
};

/// `widths` maps layer -> SAE dictionary size on the target; checked before any forward.
TransferResult transfer(Evaluator& ev, const std::vector<McqItem>& target, const SuppressionConfig& config,
                        const std::map<int, int>& widths);

struct DepthPoint {
    Category category = Category::None;
    int layer = 0;
    double depth = 0.0; // layer / n_layers
    double max_effect = 0.0;
};

/// Per category and layer, the largest effect; empty categories have no points.
std::vector<DepthPoint> depth_gradient(std::span<const FeatureStat> stats, int n_layers);

std::string depth_csv(std::span<const DepthPoint> pts);

// ---- template definitions ----------------------------------------------------

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_half(const std::vector<T>& rows, std::uint64_t seed) {
    if (rows.size() < 2) throw Error("split_half needs at least 2 rows");
    std::vector<std::size_t> order(rows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    // Fisher-Yates with an explicit generator so the split is reproducible.
    std::mt19937_64 rng(seed);
    for (std::size_t i = order.size() - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
        std::swap(order[i], order[j]);
    }
    const std::size_t cut = (rows.size() + 1) / 2;
    std::pair<std::vector<T>, std::vector<T>> out;
    for (std::size_t i = 0; i < order.size(); ++i) (i < cut ? out.first : out.second).push_back(rows[order[i]]);
    return out;
}

} // namespace qdiss
