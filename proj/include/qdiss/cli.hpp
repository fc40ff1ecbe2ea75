#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "qdiss/experiment.hpp"

namespace qdiss {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRunner = 2;

/// Parses argv-style arguments (without the program name) and runs one
/// subcommand. Never throws; failures map to exit codes 1 (validation) and
/// 2 (runner).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Paths of every artifact a subcommand reads or writes, relative to --out.
namespace artifact {
inline constexpr const char* kRunConfig = "run.json";
inline constexpr const char* kWorld = "world.json";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kRecords = "records.qdt";
inline constexpr const char* kStats = "stats.csv";
inline constexpr const char* kCounts = "counts.csv";
inline constexpr const char* kQuadrants = "quadrants.csv";
inline constexpr const char* kRetention = "retention.csv";
inline constexpr const char* kDepth = "depth.csv";
inline constexpr const char* kScreen = "screen.csv";
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kEval = "eval.json";
inline constexpr const char* kControl = "control.json";
inline constexpr const char* kTransfer = "transfer.json";
inline constexpr const char* kProbe = "probe.json";
inline constexpr const char* kAuroc = "auroc.csv";
inline constexpr const char* kSparse = "sparse.csv";
inline constexpr const char* kAbstain = "abstain.csv";
inline constexpr const char* kTable1 = "tables/table1_feature_counts.csv";
inline constexpr const char* kTable2 = "tables/table2_suppression.csv";
inline constexpr const char* kTable3 = "tables/table3_criteria.csv";
inline constexpr const char* kTable4 = "tables/table4_abstention.csv";
inline constexpr const char* kTable5 = "tables/table5_transfer.csv";
inline constexpr const char* kFigure3 = "figures/figure3_depth.svg";
inline constexpr const char* kFigure4 = "figures/figure4_auroc.svg";
} // namespace artifact

/// config_<criterion>.json, one per screening criterion.
std::string criterion_config_name(Criterion c);

/// The stub world behind the golden protocol transcripts: 2 layers, d = 16.
WorldConfig conformance_world();

/// Request lines of the golden sessions, keyed by transcript file name.
/// Every session but the last ends normally; "version.ndjson" ends on the
/// terminal version error.
std::vector<std::pair<std::string, std::vector<std::string>>> conformance_requests();

/// Transcript text: request and response lines prefixed with "> " and "< ".
std::string render_transcript(const std::vector<std::string>& requests, const std::vector<std::string>& responses);

struct TranscriptLine {
    bool request = false;
    std::string frame;
};
std::vector<TranscriptLine> parse_transcript(std::string_view text);

} // namespace qdiss
