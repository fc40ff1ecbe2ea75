#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace qdiss {

using json = nlohmann::json;

/// Base error for everything raised by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A named f32 tensor, row-major.
struct TensorBlob {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<float> data;

    std::size_t element_count() const;
};

struct Container {
    json meta = json::object();
    std::vector<TensorBlob> blobs;

    const TensorBlob* find(std::string_view name) const;
    const TensorBlob& at(std::string_view name) const;
};

inline constexpr std::string_view kContainerMagic = "QDT1";

// QDT1 layout: "QDT1" | u32le header_len | header JSON | payloads.
// Blob offsets in the header are relative to the first payload byte.
std::string encode_container(const json& meta, std::span<const TensorBlob> blobs);
Container decode_container(std::string_view bytes);

void write_container(const std::filesystem::path& path, const json& meta,
                     std::span<const TensorBlob> blobs);
Container read_container(const std::filesystem::path& path);

struct McqItem {
    std::string id;
    std::string question;
    std::array<std::string, 4> choices;
    int gold = 0;
    std::string dataset;
};

McqItem mcq_from_json(const json& j);
json mcq_to_json(const McqItem& item);

/// Parses one item per line; blank lines are skipped. Errors carry the line number.
std::vector<McqItem> load_mcq_jsonl(const std::filesystem::path& path);
void write_mcq_jsonl(const std::filesystem::path& path, std::span<const McqItem> items);

/// First 16 hex digits of the SHA-256 of `text`.
std::string content_hash(std::string_view text);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

} // namespace qdiss
