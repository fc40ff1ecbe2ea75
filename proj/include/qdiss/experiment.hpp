#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qdiss/pipeline.hpp"
#include "qdiss/probe.hpp"
#include "qdiss/synthworld.hpp"

namespace qdiss {

/// Everything a run needs besides the runner. Serialized as the run config JSON;
/// its content hash stamps every artifact.
struct RunConfig {
    WorldConfig world;
    std::string runner = "synth"; // synth | tcp:<host:port> | stdio:<command>
    int n_questions = 2000;
    std::string dataset = "synth-a";
    std::string transfer_dataset = "synth-b";
    // Empty paths resolve under the output directory: data/<dataset>.jsonl, saes/.
    std::string dataset_path;
    std::string transfer_path;
    std::string sae_dir;
    std::uint64_t seed = 7; // data generation and split
    std::vector<int> layers; // empty: all runner layers
    double alpha = 0.05;
    double lo_pct = 25.0;
    double hi_pct = 75.0;
    Criterion criterion = Criterion::Joint;
    int top_k = 5;
    double active_threshold = 0.01;
    double l2_weight = 1.0;
    int sparse_k = 3;
    std::vector<double> thresholds = kDefaultAbstentionGrid;
    int jobs = 1;

    /// All problems at once; empty when valid.
    std::vector<std::string> problems() const;
};

json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const json& j);
std::string run_config_hash(const RunConfig& c);

struct ProbeLayerResult {
    int layer = 0;
    std::map<Category, double> auroc;        // held-out AUROC per category probe
    std::map<Category, int> n_features;
    double entropy_auroc = 0.0;              // score = -entropy, no probe
};

struct ProbeStudy {
    std::vector<ProbeLayerResult> layers;
    std::map<std::pair<int, Category>, ProbeModel> models;
    double entropy_auroc = 0.5;
    int probe_layer = -1;             // best training AUROC of the confounded probe; -1 when none
    SparseSelection sparse;
    double sparse_auroc = 0.0;
    std::map<int, double> sparse_sweep; // k -> held-out AUROC of the refit
};

inline constexpr int kSparseSweep[] = {1, 3, 5, 10};

/// Per-layer probes on each discovered category, trained on discovery and
/// scored on validation, then the sparse confounded probe at the chosen layer.
ProbeStudy run_probes(const RunConfig& cfg, const std::vector<FeatureStat>& stats,
                      std::span<const InferenceRecord> discovery, std::span<const InferenceRecord> validation,
                      const std::map<int, SaeParams>& saes);

/// Abstention sweep of a probe over records at the probe's layer.
std::vector<AbstentionRow> abstain(const ProbeModel& model, std::span<const InferenceRecord> records,
                                   const SaeParams& sae, const std::vector<double>& thresholds);

struct ExperimentResult {
    HalfSplit split;
    std::vector<InferenceRecord> discovery_records;
    std::vector<InferenceRecord> validation_records;
    DiscoveryResult discovery;
    DiscoveryResult discovery_median;
    RetentionMatrix retention;
    std::map<int, std::vector<FeatureStat>> candidates; // top-k confounded per layer
    ScreenResult screen;                                // measured once, criterion = cfg.criterion
    std::map<Criterion, SuppressionConfig> configs;
    EvalSummary validation_baseline;
    std::map<Criterion, EvalSummary> validation_eval;
    ControlResult control;
    EvalSummary control_eval;
    TransferResult transfer_result;
    std::vector<DepthPoint> depth;
    ProbeStudy probe;
    std::vector<AbstentionRow> abstention;
};

/// Latents of `records` at one layer through its SAE, one row per record.
FeatureRows latent_rows(std::span<const InferenceRecord> records, const SaeParams& sae);
std::vector<bool> correctness(std::span<const InferenceRecord> records);

/// Runs the whole protocol. The SAEs must already be loaded into the runner.
ExperimentResult run_experiment(const RunConfig& cfg, Runner& runner, const std::map<int, SaeParams>& saes,
                                const std::vector<McqItem>& items, const std::vector<McqItem>& transfer_items);

/// Builds the world, its datasets and oracle SAEs, then runs the protocol in process.
ExperimentResult run_synth_experiment(const RunConfig& cfg);

} // namespace qdiss
