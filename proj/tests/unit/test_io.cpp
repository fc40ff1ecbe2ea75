#include "doctest.h"

#include <cstring>

#include "qdiss/io.hpp"
#include "support/tempdir.hpp"

using namespace qdiss;
using testing_support::TempDir;

namespace {

std::vector<TensorBlob> sample_blobs() {
    TensorBlob a{"acts", {2, 3}, {1.5f, -2.0f, 0.0f, 3.25f, 1e-30f, -7.0f}};
    TensorBlob b{"bias", {4}, {0.1f, 0.2f, 0.3f, 0.4f}};
    TensorBlob e{"empty", {0, 5}, {}};
    return {a, b, e};
}

bool contains(const std::string& haystack, const std::string& needle) { return haystack.find(needle) != std::string::npos; }

std::string error_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST_CASE("QDT1 round trip preserves meta, names, shapes and bits") {
    const auto blobs = sample_blobs();
    const json meta = {{"layer", 2}, {"note", "x"}};
    const auto bytes = encode_container(meta, blobs);
    CHECK(bytes.substr(0, 4) == "QDT1");
    const auto c = decode_container(bytes);
    CHECK(c.meta == meta);
    REQUIRE(c.blobs.size() == blobs.size());
    for (std::size_t i = 0; i < blobs.size(); ++i) {
        CHECK(c.blobs[i].name == blobs[i].name);
        CHECK(c.blobs[i].shape == blobs[i].shape);
        REQUIRE(c.blobs[i].data.size() == blobs[i].data.size());
        if (!blobs[i].data.empty())
            CHECK(std::memcmp(c.blobs[i].data.data(), blobs[i].data.data(), blobs[i].data.size() * sizeof(float)) == 0);
    }
    CHECK(c.at("bias").data[2] == 0.3f);
    CHECK(c.find("missing") == nullptr);
    CHECK_THROWS_AS(c.at("missing"), Error);
    // Encoding is deterministic.
    CHECK(encode_container(meta, blobs) == bytes);
}

TEST_CASE("QDT1 file round trip") {
    TempDir dir;
    const auto blobs = sample_blobs();
    write_container(dir / "x.qdt", {{"k", 1}}, blobs);
    const auto c = read_container(dir / "x.qdt");
    CHECK(c.meta.at("k") == 1);
    CHECK(c.at("acts").data == blobs[0].data);
}

TEST_CASE("QDT1 header length is little-endian u32") {
    const auto bytes = encode_container(json::object(), {});
    const auto len = static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4])) |
                     static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[5])) << 8 |
                     static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[6])) << 16 |
                     static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[7])) << 24;
    CHECK(len == bytes.size() - 8);
    CHECK(json::parse(bytes.substr(8)).is_object());
}

TEST_CASE("QDT1 rejects corrupt input with byte offsets") {
    const auto good = encode_container({{"a", 1}}, sample_blobs());

    auto bad_magic = good;
    bad_magic[0] = 'X';
    CHECK(contains(error_of([&] { decode_container(bad_magic); }), "bad magic at byte offset 0"));

    CHECK(contains(error_of([&] { decode_container(good.substr(0, 5)); }), "truncated header"));
    CHECK(contains(error_of([&] { decode_container(good.substr(0, 20)); }), "truncated header at byte offset 8"));
    CHECK(contains(error_of([&] { decode_container(good.substr(0, good.size() - 2)); }), "truncated payload"));
    CHECK(contains(error_of([&] { decode_container(good + "zz"); }), "trailing bytes"));

    auto bad_json = good;
    bad_json[8] = '!';
    CHECK(contains(error_of([&] { decode_container(bad_json); }), "malformed header"));
}

TEST_CASE("QDT1 encoding validates blobs") {
    std::vector<TensorBlob> wrong = {{"w", {2, 2}, {1, 2, 3}}};
    CHECK_THROWS_AS(encode_container({}, wrong), Error);
    std::vector<TensorBlob> dup = {{"w", {1}, {1}}, {"w", {1}, {2}}};
    CHECK(contains(error_of([&] { encode_container({}, dup); }), "duplicate blob name"));
    std::vector<TensorBlob> unnamed = {{"", {1}, {1}}};
    CHECK_THROWS_AS(encode_container({}, unnamed), Error);
}

TEST_CASE("MCQ JSONL round trip and blank lines") {
    TempDir dir;
    McqItem a{"q1", "What?", {"a", "b", "c", "d"}, 2, "mmlu"};
    McqItem b{"q2", "Why?", {"w", "x", "y", "z"}, 0, ""};
    const std::vector<McqItem> items = {a, b};
    write_mcq_jsonl(dir / "d.jsonl", items);
    write_text_file(dir / "e.jsonl", read_text_file(dir / "d.jsonl") + "\n   \n");
    const auto back = load_mcq_jsonl(dir / "e.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[0].id == "q1");
    CHECK(back[0].choices[3] == "d");
    CHECK(back[0].gold == 2);
    CHECK(back[0].dataset == "mmlu");
    CHECK(back[1].dataset.empty());
    CHECK_FALSE(mcq_to_json(b).contains("dataset"));
}

TEST_CASE("MCQ JSONL errors name the line") {
    TempDir dir;
    const std::string ok = R"({"id":"a","choices":["1","2","3","4"],"gold":1})";
    auto err_for = [&](const std::string& bad) {
        write_text_file(dir / "x.jsonl", ok + "\n\n" + bad + "\n");
        return error_of([&] { load_mcq_jsonl(dir / "x.jsonl"); });
    };
    CHECK(contains(err_for(R"({"id":"b","choices":["1","2","3"],"gold":1})"), "line 3: expected 4 choices"));
    CHECK(contains(err_for(R"({"id":"b","choices":["1","2","3","4"],"gold":4})"), "line 3: gold index 4 out of range"));
    CHECK(contains(err_for("{not json"), "line 3"));
    CHECK(contains(err_for(R"({"choices":["1","2","3","4"],"gold":0})"), "line 3"));
    CHECK(contains(err_for("[1,2]"), "line 3: expected a JSON object"));
    CHECK_THROWS_AS(load_mcq_jsonl(dir / "missing.jsonl"), Error);
}

TEST_CASE("content_hash is the first 16 hex digits of SHA-256") {
    CHECK(content_hash("abc") == "ba7816bf8f01cfea");
    CHECK(content_hash("") == "e3b0c44298fc1c14");
}
