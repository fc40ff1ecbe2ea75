#include "doctest.h"

#include <future>
#include <sstream>
#include <thread>

#include "qdiss/cli.hpp"
#include "qdiss/runner.hpp"
#include "qdiss/synthworld.hpp"
#include "support/tempdir.hpp"

using namespace qdiss;

namespace {

World small_world() { return build_world(conformance_world()); }

std::vector<McqItem> items(const World& w, int n) { return gen_questions(w, n, 7, "t").items; }

json respond(Runner& r, const json& frame, bool* terminate = nullptr) {
    bool t = false;
    auto line = handle_frame(r, dump_frame(frame), t);
    if (terminate) *terminate = t;
    return json::parse(line);
}

// Counts forward calls and their batch sizes.
class CountingRunner : public Runner {
public:
    explicit CountingRunner(Runner& inner) : inner_(inner) {}
    RunnerCapabilities hello() override {
        auto c = inner_.hello();
        c.max_batch = 3;
        return c;
    }
    void load_sae(const SaeParams& s) override { inner_.load_sae(s); }
    ForwardResult forward(const ForwardRequest& r) override {
        sizes.push_back(static_cast<int>(r.items.size()));
        return inner_.forward(r);
    }
    std::vector<int> sizes;

private:
    Runner& inner_;
};

} // namespace

TEST_CASE("base64 round trip and RFC 4648 vectors") {
    CHECK(base64_encode("") == "");
    CHECK(base64_encode("f") == "Zg==");
    CHECK(base64_encode("fo") == "Zm8=");
    CHECK(base64_encode("foobar") == "Zm9vYmFy");
    CHECK(base64_decode("Zm9vYmE=") == "fooba");
    CHECK_THROWS_AS(base64_decode("Zm9"), Error);
    const std::vector<float> v = {1.0f, -0.0f, 3.5e-20f, std::numeric_limits<float>::max()};
    CHECK(floats_from_base64(floats_to_base64(v)) == v);
    CHECK(floats_to_base64({1.0f}) == "AACAPw=="); // little-endian f32
}

TEST_CASE("frames are single lines with sorted keys") {
    const auto s = dump_frame(json{{"op", "x"}, {"b", 1}, {"a", {{"z", 1}, {"y", 2}}}});
    CHECK(s == R"({"a":{"y":2,"z":1},"b":1,"op":"x"})");
    CHECK(dump_frame(make_error_frame(4, "batch", "too big")) ==
          R"({"code":"batch","id":4,"message":"too big","op":"error","v":1})");
}

TEST_CASE("forward request and result survive JSON") {
    const auto w = small_world();
    ForwardRequest req{items(w, 3), {0, 1}, {{1, {0, 2}}}};
    const auto back = forward_request_from_json(forward_request(5, req));
    CHECK(back.items.size() == 3);
    CHECK(back.items[1].id == req.items[1].id);
    CHECK(back.capture_layers == req.capture_layers);
    CHECK(back.suppress == req.suppress);

    SynthRunner r(w);
    r.load_oracle_saes();
    const auto res = r.forward(req);
    json frame = {{"results", forward_result_to_json(res)}};
    const auto res2 = forward_result_from_json(frame);
    REQUIRE(res2.items.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(res2.items[i].probs == res.items[i].probs);
        CHECK(res2.items[i].captured == res.items[i].captured);
    }
}

TEST_CASE("handle_frame maps failures to protocol error codes") {
    SynthRunner r(small_world());
    auto code = [&](const json& f) {
        const auto resp = respond(r, f);
        return resp.at("op") == "error" ? resp.at("code").get<std::string>() : std::string("ok");
    };
    const auto w = small_world();
    CHECK(code(hello_request(1)) == "ok");
    CHECK(code({{"v", 1}, {"op", "frobnicate"}, {"id", 2}}) == "unknown_op");
    CHECK(code({{"v", 1}, {"id", 3}}) == "bad_frame");

    ForwardRequest req{items(w, 1), {}, {{0, {0}}}};
    CHECK(code(forward_request(4, req)) == "no_sae");
    req.suppress = {{9, {0}}};
    CHECK(code(forward_request(5, req)) == "unknown_layer");
    req.suppress = {};
    req.capture_layers = {5};
    CHECK(code(forward_request(6, req)) == "unknown_layer");

    r.load_sae(w.oracle_sae(0));
    req.capture_layers = {};
    req.suppress = {{0, {w.m}}};
    CHECK(code(forward_request(7, req)) == "feature_range");

    auto bad_item = forward_request(8, ForwardRequest{items(w, 1), {}, {}});
    bad_item["items"][0]["choices"] = {"a"};
    CHECK(code(bad_item) == "bad_item");

    auto wrong_d = w.oracle_sae(1);
    wrong_d.d = 8;
    wrong_d.w_enc.resize(static_cast<std::size_t>(8) * wrong_d.m);
    wrong_d.w_dec.resize(static_cast<std::size_t>(8) * wrong_d.m);
    wrong_d.b_pre.resize(8);
    CHECK(code(load_sae_request(9, wrong_d)) == "dimension");
    CHECK(code(load_sae_path_request(10, 0, "/nonexistent/x.qdt")) == "io");

    bool t = false;
    const auto malformed = json::parse(handle_frame(r, "{oops", t));
    CHECK(malformed.at("code") == "bad_frame");
    CHECK(malformed.at("id").is_null());
    CHECK_FALSE(t);
}

TEST_CASE("version mismatch is terminal") {
    SynthRunner r(small_world());
    bool t = false;
    const auto resp = respond(r, hello_request(1, 2), &t);
    CHECK(resp.at("code") == "version");
    CHECK(t);

    std::istringstream in(dump_frame(hello_request(1, 2)) + "\n" + dump_frame(hello_request(2)) + "\n");
    std::ostringstream out;
    serve_stream(r, in, out);
    const auto text = out.str();
    CHECK(std::count(text.begin(), text.end(), '\n') == 1);
}

TEST_CASE("hello is idempotent and does not disturb loaded SAEs") {
    const auto w = small_world();
    SynthRunner r(w);
    r.load_sae(w.oracle_sae(1));
    const auto a = respond(r, hello_request(1));
    const auto b = respond(r, hello_request(2));
    CHECK(a.at("capabilities") == b.at("capabilities"));
    ForwardRequest req{items(w, 2), {}, {{1, {0}}}};
    CHECK(respond(r, forward_request(3, req)).at("op") == "forward");
}

TEST_CASE("forward_all splits into max_batch chunks and keeps order") {
    const auto w = small_world();
    SynthRunner inner(w);
    CountingRunner r(inner);
    ForwardRequest req{items(w, 8), {0}, {}};
    const auto all = forward_all(r, req);
    CHECK(r.sizes == std::vector<int>{3, 3, 2});
    const auto direct = inner.forward(req);
    REQUIRE(all.items.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) CHECK(all.items[i].probs == direct.items[i].probs);
}

TEST_CASE("synth runner rejects batches above max_batch") {
    const auto w = small_world();
    SynthRunner r(w, 1, 2);
    try {
        r.forward(ForwardRequest{items(w, 3), {}, {}});
        FAIL("expected batch error");
    } catch (const RunnerError& e) {
        CHECK(e.code() == "batch");
    }
}

TEST_CASE("RemoteRunner over TCP matches the in-process runner") {
    const auto w = small_world();
    std::promise<int> port;
    std::thread server([&] {
        serve_tcp([&] { return std::make_unique<SynthRunner>(w); }, "127.0.0.1", 0, 2,
                  [&](int p) { port.set_value(p); });
    });
    const int p = port.get_future().get();
    SynthRunner local(w);
    local.load_oracle_saes();
    const ForwardRequest req{items(w, 4), {0, 1}, {{0, w.features_with_role(0, Role::C)}}};
    {
        RemoteRunner remote(connect_tcp("127.0.0.1:" + std::to_string(p)));
        CHECK(remote.hello() == local.hello());
        for (int l = 0; l < w.cfg.n_layers; ++l) remote.load_sae(w.oracle_sae(l));
        const auto a = remote.forward(req), b = local.forward(req);
        REQUIRE(a.items.size() == b.items.size());
        for (std::size_t i = 0; i < a.items.size(); ++i) {
            CHECK(a.items[i].probs == b.items[i].probs);
            CHECK(a.items[i].captured == b.items[i].captured);
        }
    }
    {
        // A fresh session starts without SAEs.
        RemoteRunner remote(connect_tcp("127.0.0.1:" + std::to_string(p)));
        try {
            remote.forward(req);
            FAIL("expected no_sae");
        } catch (const RunnerError& e) {
            CHECK(e.code() == "no_sae");
        }
    }
    server.join();
}

TEST_CASE("RemoteRunner over stdio talks to the serve subcommand") {
    testing_support::TempDir dir;
    const auto w = small_world();
    write_text_file(dir / "world.json", world_config_to_json(w.cfg).dump());
    const std::string cmd = std::string(QDISS_CLI) + " serve --stdio --out " + (dir / "out").string() +
                            " --runner synth:" + (dir / "world.json").string();
    RemoteRunner remote(spawn_stdio(cmd));
    SynthRunner local(w);
    CHECK(remote.hello() == local.hello());
    const ForwardRequest req{items(w, 3), {1}, {}};
    const auto a = remote.forward(req), b = local.forward(req);
    for (std::size_t i = 0; i < 3; ++i) CHECK(a.items[i].probs == b.items[i].probs);
    try {
        remote.call({{"v", 1}, {"op", "nope"}, {"id", 99}});
        FAIL("expected unknown_op");
    } catch (const RunnerError& e) {
        CHECK(e.code() == "unknown_op");
    }
}

TEST_CASE("connecting to a closed port is a transport error") {
    try {
        connect_tcp("127.0.0.1:1");
        FAIL("expected transport error");
    } catch (const RunnerError& e) {
        CHECK(e.code() == "transport");
    }
}
