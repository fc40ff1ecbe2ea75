#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "qdiss/io.hpp"
#include "qdiss/sae.hpp"

namespace qdiss {

/// layer -> sorted, unique feature indices to zero.
using SuppressionMap = std::map<int, std::vector<int>>;

struct RunnerCapabilities {
    int n_layers = 0;
    int d_model = 0;
    int max_batch = 0;
    std::string runner_kind;

    bool operator==(const RunnerCapabilities&) const = default;
};

struct ForwardRequest {
    std::vector<McqItem> items;
    std::vector<int> capture_layers;
    SuppressionMap suppress;
};

struct ItemResult {
    std::array<double, 4> probs{};
    std::map<int, std::vector<float>> captured; // pre-suppression residual per captured layer
};

struct ForwardResult {
    std::vector<ItemResult> items;
};

/// Failure reported by a runner. `code` is the protocol error code.
class RunnerError : public Error {
public:
    RunnerError(std::string code, const std::string& message) : Error(message), code_(std::move(code)) {}
    const std::string& code() const { return code_; }

private:
    std::string code_;
};

namespace error_code {
inline constexpr std::string_view kVersion = "version";
inline constexpr std::string_view kBadFrame = "bad_frame";
inline constexpr std::string_view kUnknownOp = "unknown_op";
inline constexpr std::string_view kDimension = "dimension";
inline constexpr std::string_view kUnknownLayer = "unknown_layer";
inline constexpr std::string_view kNoSae = "no_sae";
inline constexpr std::string_view kFeatureRange = "feature_range";
inline constexpr std::string_view kBatch = "batch";
inline constexpr std::string_view kBadItem = "bad_item";
inline constexpr std::string_view kIo = "io";
inline constexpr std::string_view kTransport = "transport";
} // namespace error_code

/// A model that answers 4-way MCQs, exposes final-token residuals, and applies
/// SAE suppression inline at the final token.
class Runner {
public:
    virtual ~Runner() = default;
    virtual RunnerCapabilities hello() = 0;
    /// Replaces any SAE already held for sae.layer.
    virtual void load_sae(const SaeParams& sae) = 0;
    virtual ForwardResult forward(const ForwardRequest& req) = 0;
    /// True when forward() may be called from several threads at once.
    virtual bool concurrent_forwards() const { return false; }
};

/// Checks suppression layers/indices against loaded SAEs and the layer count.
/// `m_at` returns the SAE width at a layer or -1 when none is loaded.
template <typename MAt>
void check_suppression(const SuppressionMap& s, int n_layers, MAt&& m_at);

/// Forwards in chunks of the runner's max_batch.
ForwardResult forward_all(Runner& runner, const ForwardRequest& req);

// ---- protocol v1 -------------------------------------------------------------

inline constexpr int kProtocolVersion = 1;

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);
std::string floats_to_base64(const std::vector<float>& v);
std::vector<float> floats_from_base64(std::string_view text);

/// Deterministic one-line frame text (sorted keys, no trailing newline).
std::string dump_frame(const json& frame);

json make_error_frame(const json& id, std::string_view code, std::string_view message);

json hello_request(std::int64_t id, int version = kProtocolVersion);
json load_sae_request(std::int64_t id, const SaeParams& sae);
json load_sae_path_request(std::int64_t id, int layer, const std::string& path);
json forward_request(std::int64_t id, const ForwardRequest& req);

json capabilities_to_json(const RunnerCapabilities& c);
RunnerCapabilities capabilities_from_json(const json& j);
ForwardRequest forward_request_from_json(const json& frame);
json forward_result_to_json(const ForwardResult& r);
ForwardResult forward_result_from_json(const json& frame);
SaeParams sae_from_frame(const json& frame);

/// Serves one request line. Sets `terminate` when the session must close
/// (version mismatch). Returns the response line without newline.
std::string handle_frame(Runner& runner, std::string_view line, bool& terminate);

/// Reads newline-delimited frames until EOF or a terminal error.
void serve_stream(Runner& runner, std::istream& in, std::ostream& out);

using RunnerFactory = std::function<std::unique_ptr<Runner>()>;

/// Accepts TCP connections on host:port and serves each session in turn.
/// `max_sessions` < 0 serves forever. `on_listening` receives the bound port.
/// This overload shares `runner`, so SAEs loaded by one session stay loaded.
void serve_tcp(Runner& runner, const std::string& host, int port, int max_sessions = -1,
               const std::function<void(int)>& on_listening = {});
/// Gives every session a fresh runner from `make_runner`.
void serve_tcp(const RunnerFactory& make_runner, const std::string& host, int port, int max_sessions = -1,
               const std::function<void(int)>& on_listening = {});

/// Byte-stream link carrying newline-delimited frames.
class Transport {
public:
    virtual ~Transport() = default;
    virtual void write_line(const std::string& line) = 0;
    /// Throws RunnerError(transport) at EOF.
    virtual std::string read_line() = 0;
};

std::unique_ptr<Transport> connect_tcp(const std::string& address); // "host:port"
std::unique_ptr<Transport> spawn_stdio(const std::string& command); // run via /bin/sh -c

/// Client side of protocol v1. One request in flight at a time.
class RemoteRunner : public Runner {
public:
    explicit RemoteRunner(std::unique_ptr<Transport> transport);
    RunnerCapabilities hello() override;
    void load_sae(const SaeParams& sae) override;
    void load_sae_path(int layer, const std::string& path);
    ForwardResult forward(const ForwardRequest& req) override;

    /// Sends a raw frame and returns the matching response frame.
    json call(json frame);

private:
    std::unique_ptr<Transport> transport_;
    std::int64_t next_id_ = 1;
};

// ---- template definitions ----------------------------------------------------

template <typename MAt>
void check_suppression(const SuppressionMap& s, int n_layers, MAt&& m_at) {
    for (const auto& [layer, features] : s) {
        if (layer < 0 || layer >= n_layers) {
            throw RunnerError(std::string(error_code::kUnknownLayer),
                              "suppression at unknown layer " + std::to_string(layer));
        }
        if (features.empty()) continue;
        const int m = m_at(layer);
        if (m < 0) throw RunnerError(std::string(error_code::kNoSae), "no SAE at layer " + std::to_string(layer));
        for (int f : features) {
            if (f < 0 || f >= m) {
                throw RunnerError(std::string(error_code::kFeatureRange),
                                  "feature " + std::to_string(f) + " out of range for SAE at layer " +
                                      std::to_string(layer) + " (m=" + std::to_string(m) + ")");
            }
        }
    }
}

} // namespace qdiss
