#include "qdiss/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <openssl/sha.h>

namespace qdiss {

namespace {

void put_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32_le(const char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

void put_f32_le(std::string& out, float f) { put_u32_le(out, std::bit_cast<std::uint32_t>(f)); }

std::int64_t shape_product(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

void validate_blob(const TensorBlob& b) {
    if (b.name.empty()) throw Error("blob with empty name");
    if (b.shape.empty()) throw Error("blob '" + b.name + "': shape must have at least one extent");
    for (auto e : b.shape) {
        if (e < 0) throw Error("blob '" + b.name + "': negative extent");
    }
    auto n = shape_product(b.shape);
    if (static_cast<std::size_t>(n) != b.data.size()) {
        throw Error("blob '" + b.name + "': shape implies " + std::to_string(n) + " floats but " +
                    std::to_string(b.data.size()) + " supplied");
    }
}

} // namespace

std::size_t TensorBlob::element_count() const { return static_cast<std::size_t>(shape_product(shape)); }

const TensorBlob* Container::find(std::string_view name) const {
    for (const auto& b : blobs) {
        if (b.name == name) return &b;
    }
    return nullptr;
}

const TensorBlob& Container::at(std::string_view name) const {
    const auto* b = find(name);
    if (!b) throw Error("container has no blob named '" + std::string(name) + "'");
    return *b;
}

std::string encode_container(const json& meta, std::span<const TensorBlob> blobs) {
    std::set<std::string> names;
    for (const auto& b : blobs) {
        validate_blob(b);
        if (!names.insert(b.name).second) throw Error("duplicate blob name '" + b.name + "'");
    }

    json table = json::array();
    std::uint64_t offset = 0;
    for (const auto& b : blobs) {
        std::uint64_t nbytes = 4ull * b.data.size();
        table.push_back({{"name", b.name}, {"dtype", "f32le"}, {"shape", b.shape}, {"offset", offset},
                         {"nbytes", nbytes}});
        offset += nbytes;
    }
    json header = {{"meta", meta}, {"blobs", table}};
    std::string header_text = header.dump();

    std::string out;
    out.reserve(8 + header_text.size() + offset);
    out.append(kContainerMagic);
    put_u32_le(out, static_cast<std::uint32_t>(header_text.size()));
    out.append(header_text);
    for (const auto& b : blobs) {
        if constexpr (std::endian::native == std::endian::little) {
            const auto* p = reinterpret_cast<const char*>(b.data.data());
            out.append(p, p + 4 * b.data.size());
        } else {
            for (float f : b.data) put_f32_le(out, f);
        }
    }
    return out;
}

Container decode_container(std::string_view bytes) {
    if (bytes.size() < 8) throw Error("truncated header at byte offset 0: file shorter than 8 bytes");
    if (bytes.substr(0, 4) != kContainerMagic) throw Error("bad magic at byte offset 0");
    std::uint32_t header_len = get_u32_le(bytes.data() + 4);
    if (8ull + header_len > bytes.size()) {
        throw Error("truncated header at byte offset 8: header length " + std::to_string(header_len) +
                    " exceeds file size " + std::to_string(bytes.size()));
    }
    json header;
    try {
        header = json::parse(bytes.substr(8, header_len));
    } catch (const json::exception& e) {
        throw Error(std::string("malformed header JSON at byte offset 8: ") + e.what());
    }
    if (!header.is_object() || !header.contains("blobs") || !header["blobs"].is_array()) {
        throw Error("malformed header at byte offset 8: missing blob table");
    }

    const std::size_t payload_start = 8ull + header_len;
    const std::size_t payload_size = bytes.size() - payload_start;

    Container c;
    c.meta = header.value("meta", json::object());
    std::uint64_t expected_offset = 0;
    for (const auto& entry : header["blobs"]) {
        TensorBlob b;
        b.name = entry.at("name").get<std::string>();
        if (entry.value("dtype", std::string()) != "f32le") {
            throw Error("blob '" + b.name + "': unsupported dtype");
        }
        b.shape = entry.at("shape").get<std::vector<std::int64_t>>();
        auto offset = entry.at("offset").get<std::uint64_t>();
        auto nbytes = entry.at("nbytes").get<std::uint64_t>();
        if (b.shape.empty()) throw Error("blob '" + b.name + "': empty shape");
        auto n = shape_product(b.shape);
        if (n < 0 || 4ull * static_cast<std::uint64_t>(n) != nbytes) {
            throw Error("shape/size mismatch for blob '" + b.name + "' at byte offset " +
                        std::to_string(payload_start + offset));
        }
        if (offset != expected_offset) {
            throw Error("blob '" + b.name + "' offset " + std::to_string(offset) +
                        " overlaps or leaves a gap (expected " + std::to_string(expected_offset) + ")");
        }
        if (offset + nbytes > payload_size) {
            throw Error("truncated payload for blob '" + b.name + "' at byte offset " +
                        std::to_string(payload_start + offset) + ": need " + std::to_string(nbytes) +
                        " bytes, " + std::to_string(payload_size > offset ? payload_size - offset : 0) +
                        " available");
        }
        b.data.resize(static_cast<std::size_t>(n));
        const char* p = bytes.data() + payload_start + offset;
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(b.data.data(), p, nbytes);
        } else {
            for (std::size_t i = 0; i < b.data.size(); ++i) {
                b.data[i] = std::bit_cast<float>(get_u32_le(p + 4 * i));
            }
        }
        expected_offset = offset + nbytes;
        c.blobs.push_back(std::move(b));
    }
    if (expected_offset != payload_size) {
        throw Error("trailing bytes after last payload at byte offset " +
                    std::to_string(payload_start + expected_offset));
    }
    return c;
}

void write_container(const std::filesystem::path& path, const json& meta, std::span<const TensorBlob> blobs) {
    // Encoding validates everything before the file is touched.
    auto bytes = encode_container(meta, blobs);
    write_text_file(path, bytes);
}

Container read_container(const std::filesystem::path& path) {
    try {
        return decode_container(read_text_file(path));
    } catch (const Error& e) {
        throw Error(path.string() + ": " + e.what());
    }
}

McqItem mcq_from_json(const json& j) {
    if (!j.is_object()) throw Error("expected a JSON object");
    McqItem item;
    item.id = j.at("id").get<std::string>();
    item.question = j.value("question", std::string());
    const auto& choices = j.at("choices");
    if (!choices.is_array() || choices.size() != 4) throw Error("expected 4 choices");
    for (std::size_t i = 0; i < 4; ++i) item.choices[i] = choices[i].get<std::string>();
    item.gold = j.at("gold").get<int>();
    if (item.gold < 0 || item.gold > 3) throw Error("gold index " + std::to_string(item.gold) + " out of range");
    item.dataset = j.value("dataset", std::string());
    return item;
}

json mcq_to_json(const McqItem& item) {
    json j = {{"id", item.id}, {"question", item.question}, {"choices", item.choices}, {"gold", item.gold}};
    if (!item.dataset.empty()) j["dataset"] = item.dataset;
    return j;
}

std::vector<McqItem> load_mcq_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<McqItem> items;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            items.push_back(mcq_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            throw Error("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return items;
}

void write_mcq_jsonl(const std::filesystem::path& path, std::span<const McqItem> items) {
    std::string out;
    for (const auto& item : items) {
        out += mcq_to_json(item).dump();
        out += '\n';
    }
    write_text_file(path, out);
}

std::string content_hash(std::string_view text) {
    unsigned char digest[SHA256_DIGEST_LENGTH];
    SHA256(reinterpret_cast<const unsigned char*>(text.data()), text.size(), digest);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (int i = 0; i < 8; ++i) {
        out += kHex[digest[i] >> 4];
        out += kHex[digest[i] & 0xf];
    }
    return out;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error("I/O failure writing " + path.string());
}

} // namespace qdiss
