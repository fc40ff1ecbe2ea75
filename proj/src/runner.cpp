#include "qdiss/runner.hpp"

#include <algorithm>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <istream>
#include <ostream>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fmt/format.h>
#include <openssl/evp.h>

extern char** environ;

namespace qdiss {

ForwardResult forward_all(Runner& runner, const ForwardRequest& req) {
    const int max_batch = std::max(runner.hello().max_batch, 1);
    if (req.items.size() <= static_cast<std::size_t>(max_batch)) return runner.forward(req);
    ForwardResult out;
    out.items.reserve(req.items.size());
    ForwardRequest chunk;
    chunk.capture_layers = req.capture_layers;
    chunk.suppress = req.suppress;
    for (std::size_t i = 0; i < req.items.size(); i += static_cast<std::size_t>(max_batch)) {
        const auto end = std::min(req.items.size(), i + static_cast<std::size_t>(max_batch));
        chunk.items.assign(req.items.begin() + static_cast<std::ptrdiff_t>(i),
                           req.items.begin() + static_cast<std::ptrdiff_t>(end));
        auto part = runner.forward(chunk);
        for (auto& r : part.items) out.items.push_back(std::move(r));
    }
    return out;
}

// ---- encoding helpers --------------------------------------------------------

std::string base64_encode(std::string_view bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::string base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) throw Error(fmt::format("base64 length {} is not a multiple of 4", text.size()));
    std::string out(3 * text.size() / 4, '\0');
    const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
    if (n < 0) throw Error("invalid base64 payload");
    std::size_t len = static_cast<std::size_t>(n);
    // EVP_DecodeBlock keeps the zero bytes produced by padding.
    if (!text.empty() && text.back() == '=') --len;
    if (text.size() >= 2 && text[text.size() - 2] == '=') --len;
    out.resize(len);
    return out;
}

std::string floats_to_base64(const std::vector<float>& v) {
    std::string bytes(v.size() * 4, '\0');
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::uint32_t u;
        std::memcpy(&u, &v[i], 4);
        for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xffu);
    }
    return base64_encode(bytes);
}

std::vector<float> floats_from_base64(std::string_view text) {
    const auto bytes = base64_decode(text);
    if (bytes.size() % 4 != 0) throw Error(fmt::format("f32 payload of {} bytes is not a multiple of 4", bytes.size()));
    std::vector<float> v(bytes.size() / 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
        std::memcpy(&v[i], &u, 4);
    }
    return v;
}

std::string dump_frame(const json& frame) { return frame.dump(); }

json make_error_frame(const json& id, std::string_view code, std::string_view message) {
    return {{"v", kProtocolVersion}, {"op", "error"}, {"id", id}, {"code", code}, {"message", message}};
}

// ---- frame builders ----------------------------------------------------------

json hello_request(std::int64_t id, int version) { return {{"v", version}, {"op", "hello"}, {"id", id}}; }

json load_sae_request(std::int64_t id, const SaeParams& sae) {
    json blobs = json::object();
    for (const auto& b : sae_blobs(sae)) blobs[b.name] = {{"shape", b.shape}, {"data", floats_to_base64(b.data)}};
    return {{"v", kProtocolVersion}, {"op", "load_sae"}, {"id", id}, {"layer", sae.layer},
            {"meta", sae_meta(sae)}, {"blobs", std::move(blobs)}};
}

json load_sae_path_request(std::int64_t id, int layer, const std::string& path) {
    return {{"v", kProtocolVersion}, {"op", "load_sae"}, {"id", id}, {"layer", layer}, {"path", path}};
}

json forward_request(std::int64_t id, const ForwardRequest& req) {
    json items = json::array();
    for (const auto& it : req.items) items.push_back(mcq_to_json(it));
    json suppress = json::object();
    for (const auto& [layer, features] : req.suppress) suppress[std::to_string(layer)] = features;
    return {{"v", kProtocolVersion}, {"op", "forward"}, {"id", id}, {"items", std::move(items)},
            {"capture_layers", req.capture_layers}, {"suppress", std::move(suppress)}};
}

json capabilities_to_json(const RunnerCapabilities& c) {
    return {{"n_layers", c.n_layers}, {"d_model", c.d_model}, {"max_batch", c.max_batch}, {"runner_kind", c.runner_kind}};
}

RunnerCapabilities capabilities_from_json(const json& j) {
    RunnerCapabilities c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.max_batch = j.at("max_batch").get<int>();
    c.runner_kind = j.at("runner_kind").get<std::string>();
    return c;
}

ForwardRequest forward_request_from_json(const json& frame) {
    ForwardRequest req;
    const auto& items = frame.at("items");
    if (!items.is_array()) throw RunnerError(std::string(error_code::kBadItem), "items must be an array");
    for (std::size_t i = 0; i < items.size(); ++i) {
        try {
            req.items.push_back(mcq_from_json(items[i]));
        } catch (const std::exception& e) {
            throw RunnerError(std::string(error_code::kBadItem), fmt::format("item {}: {}", i, e.what()));
        }
    }
    if (frame.contains("capture_layers")) req.capture_layers = frame.at("capture_layers").get<std::vector<int>>();
    if (frame.contains("suppress")) {
        for (const auto& [key, features] : frame.at("suppress").items()) {
            int layer = 0;
            try {
                std::size_t used = 0;
                layer = std::stoi(key, &used);
                if (used != key.size()) throw std::invalid_argument(key);
            } catch (const std::exception&) {
                throw RunnerError(std::string(error_code::kBadFrame), "suppress key '" + key + "' is not a layer index");
            }
            auto v = features.get<std::vector<int>>();
            std::sort(v.begin(), v.end());
            v.erase(std::unique(v.begin(), v.end()), v.end());
            req.suppress[layer] = std::move(v);
        }
    }
    return req;
}

json forward_result_to_json(const ForwardResult& r) {
    json results = json::array();
    for (const auto& item : r.items) {
        json captured = json::object();
        for (const auto& [layer, v] : item.captured) captured[std::to_string(layer)] = floats_to_base64(v);
        results.push_back({{"probs", item.probs}, {"captured", std::move(captured)}});
    }
    return results;
}

ForwardResult forward_result_from_json(const json& frame) {
    ForwardResult r;
    for (const auto& j : frame.at("results")) {
        ItemResult item;
        item.probs = j.at("probs").get<std::array<double, 4>>();
        if (j.contains("captured")) {
            for (const auto& [key, text] : j.at("captured").items()) {
                item.captured[std::stoi(key)] = floats_from_base64(text.get<std::string>());
            }
        }
        r.items.push_back(std::move(item));
    }
    return r;
}

SaeParams sae_from_frame(const json& frame) {
    Container c;
    c.meta = frame.at("meta");
    for (const auto& [name, b] : frame.at("blobs").items()) {
        TensorBlob blob{name, b.at("shape").get<std::vector<std::int64_t>>(),
                        floats_from_base64(b.at("data").get<std::string>())};
        if (blob.element_count() != blob.data.size()) {
            throw RunnerError(std::string(error_code::kDimension),
                              fmt::format("blob '{}' shape implies {} floats but payload has {}", name,
                                          blob.element_count(), blob.data.size()));
        }
        c.blobs.push_back(std::move(blob));
    }
    c.meta["layer"] = frame.at("layer");
    return sae_from_container(c);
}

// ---- server ------------------------------------------------------------------

std::string handle_frame(Runner& runner, std::string_view line, bool& terminate) {
    terminate = false;
    json req;
    try {
        req = json::parse(line);
    } catch (const json::exception&) {
        return dump_frame(make_error_frame(nullptr, error_code::kBadFrame, "malformed JSON"));
    }
    if (!req.is_object() || !req.contains("v") || !req.contains("op")) {
        return dump_frame(make_error_frame(req.is_object() ? req.value("id", json()) : json(), error_code::kBadFrame,
                                           "frame must be an object with v and op"));
    }
    const json id = req.value("id", json());
    if (req.at("v") != kProtocolVersion) {
        terminate = true;
        return dump_frame(make_error_frame(id, error_code::kVersion, "unsupported version " + req.at("v").dump()));
    }
    json resp = {{"v", kProtocolVersion}, {"id", id}};
    try {
        const auto op = req.at("op").get<std::string>();
        resp["op"] = op;
        if (op == "hello") {
            resp["capabilities"] = capabilities_to_json(runner.hello());
        } else if (op == "load_sae") {
            SaeParams sae;
            if (req.contains("path")) {
                try {
                    sae = load_sae_file(req.at("path").get<std::string>());
                } catch (const RunnerError&) {
                    throw;
                } catch (const Error& e) {
                    throw RunnerError(std::string(error_code::kIo), e.what());
                }
                sae.layer = req.at("layer").get<int>();
            } else {
                try {
                    sae = sae_from_frame(req);
                } catch (const RunnerError&) {
                    throw;
                } catch (const Error& e) {
                    throw RunnerError(std::string(error_code::kDimension), e.what());
                }
            }
            runner.load_sae(sae);
            resp["layer"] = sae.layer;
            resp["ok"] = true;
        } else if (op == "forward") {
            resp["results"] = forward_result_to_json(runner.forward(forward_request_from_json(req)));
        } else {
            return dump_frame(make_error_frame(id, error_code::kUnknownOp, "unknown op '" + op + "'"));
        }
    } catch (const RunnerError& e) {
        return dump_frame(make_error_frame(id, e.code(), e.what()));
    } catch (const json::exception& e) {
        return dump_frame(make_error_frame(id, error_code::kBadFrame, e.what()));
    } catch (const Error& e) {
        return dump_frame(make_error_frame(id, error_code::kBadFrame, e.what()));
    }
    return dump_frame(resp);
}

void serve_stream(Runner& runner, std::istream& in, std::ostream& out) {
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        bool terminate = false;
        out << handle_frame(runner, line, terminate) << '\n';
        out.flush();
        if (terminate) return;
    }
}

namespace {

class FdTransport : public Transport {
public:
    FdTransport(int read_fd, int write_fd, pid_t child = -1, bool socket = false)
        : read_fd_(read_fd), write_fd_(write_fd), child_(child), socket_(socket) {}

    ~FdTransport() override {
        if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
        if (read_fd_ >= 0) ::close(read_fd_);
        if (child_ > 0) {
            int status = 0;
            ::waitpid(child_, &status, 0);
        }
    }

    void write_line(const std::string& line) override {
        std::string buf = line + "\n";
        std::size_t done = 0;
        while (done < buf.size()) {
            const ssize_t n = socket_ ? ::send(write_fd_, buf.data() + done, buf.size() - done, MSG_NOSIGNAL)
                                      : ::write(write_fd_, buf.data() + done, buf.size() - done);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw RunnerError(std::string(error_code::kTransport), std::string("write failed: ") + std::strerror(errno));
            }
            done += static_cast<std::size_t>(n);
        }
    }

    std::string read_line() override {
        for (;;) {
            auto nl = buffer_.find('\n');
            if (nl != std::string::npos) {
                std::string line = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                return line;
            }
            char chunk[65536];
            const ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw RunnerError(std::string(error_code::kTransport), std::string("read failed: ") + std::strerror(errno));
            }
            if (n == 0) throw RunnerError(std::string(error_code::kTransport), "connection closed by peer");
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

private:
    int read_fd_;
    int write_fd_;
    pid_t child_;
    bool socket_;
    std::string buffer_;
};

std::pair<std::string, std::string> split_address(const std::string& address) {
    const auto colon = address.rfind(':');
    if (colon == std::string::npos) throw Error("address '" + address + "' must be host:port");
    return {address.substr(0, colon), address.substr(colon + 1)};
}

} // namespace

namespace {

// Shares one runner across sessions.
class BorrowedRunner : public Runner {
public:
    explicit BorrowedRunner(Runner& r) : r_(r) {}
    RunnerCapabilities hello() override { return r_.hello(); }
    void load_sae(const SaeParams& sae) override { r_.load_sae(sae); }
    ForwardResult forward(const ForwardRequest& req) override { return r_.forward(req); }

private:
    Runner& r_;
};

} // namespace

void serve_tcp(Runner& runner, const std::string& host, int port, int max_sessions,
               const std::function<void(int)>& on_listening) {
    serve_tcp([&runner] { return std::make_unique<BorrowedRunner>(runner); }, host, port, max_sessions, on_listening);
}

void serve_tcp(const RunnerFactory& make_runner, const std::string& host, int port, int max_sessions,
               const std::function<void(int)>& on_listening) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw Error(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd);
        throw Error("bad IPv4 listen address '" + host + "'");
    }
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 8) != 0) {
        const std::string msg = std::strerror(errno);
        ::close(fd);
        throw Error(fmt::format("cannot listen on {}:{}: {}", host, port, msg));
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    if (on_listening) on_listening(ntohs(addr.sin_port));

    for (int served = 0; max_sessions < 0 || served < max_sessions; ++served) {
        const int conn = ::accept(fd, nullptr, nullptr);
        if (conn < 0) {
            if (errno == EINTR) continue;
            ::close(fd);
            throw Error(std::string("accept: ") + std::strerror(errno));
        }
        FdTransport t(conn, conn, -1, true);
        const auto runner = make_runner();
        try {
            for (;;) {
                const auto line = t.read_line();
                if (line.empty()) continue;
                bool terminate = false;
                t.write_line(handle_frame(*runner, line, terminate));
                if (terminate) break;
            }
        } catch (const RunnerError&) {
            // peer went away; next session
        }
    }
    ::close(fd);
}

std::unique_ptr<Transport> connect_tcp(const std::string& address) {
    const auto [host, port] = split_address(address);
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0) {
        throw RunnerError(std::string(error_code::kTransport), "resolve " + address + ": " + ::gai_strerror(rc));
    }
    int fd = -1;
    for (auto* p = res; p; p = p->ai_next) {
        fd = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw RunnerError(std::string(error_code::kTransport), "cannot connect to " + address);
    return std::make_unique<FdTransport>(fd, fd, -1, true);
}

std::unique_ptr<Transport> spawn_stdio(const std::string& command) {
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0) throw RunnerError(std::string(error_code::kTransport), "pipe failed");
    if (::pipe(from_child) != 0) {
        ::close(to_child[0]);
        ::close(to_child[1]);
        throw RunnerError(std::string(error_code::kTransport), "pipe failed");
    }
    std::signal(SIGPIPE, SIG_IGN);
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, to_child[0], STDIN_FILENO);
    posix_spawn_file_actions_adddup2(&actions, from_child[1], STDOUT_FILENO);
    posix_spawn_file_actions_addclose(&actions, to_child[1]);
    posix_spawn_file_actions_addclose(&actions, from_child[0]);
    const char* argv[] = {"/bin/sh", "-c", command.c_str(), nullptr};
    pid_t pid = -1;
    const int rc = ::posix_spawn(&pid, "/bin/sh", &actions, nullptr, const_cast<char* const*>(argv), environ);
    posix_spawn_file_actions_destroy(&actions);
    ::close(to_child[0]);
    ::close(from_child[1]);
    if (rc != 0) {
        ::close(to_child[1]);
        ::close(from_child[0]);
        throw RunnerError(std::string(error_code::kTransport), "cannot spawn '" + command + "': " + std::strerror(rc));
    }
    return std::make_unique<FdTransport>(from_child[0], to_child[1], pid);
}

// ---- client ------------------------------------------------------------------

RemoteRunner::RemoteRunner(std::unique_ptr<Transport> transport) : transport_(std::move(transport)) {}

json RemoteRunner::call(json frame) {
    const auto id = frame.value("id", json());
    transport_->write_line(dump_frame(frame));
    json resp;
    try {
        resp = json::parse(transport_->read_line());
    } catch (const json::exception& e) {
        throw RunnerError(std::string(error_code::kBadFrame), std::string("malformed response: ") + e.what());
    }
    if (resp.value("op", "") == "error") {
        throw RunnerError(resp.value("code", std::string(error_code::kBadFrame)), resp.value("message", ""));
    }
    if (resp.value("id", json()) != id) {
        throw RunnerError(std::string(error_code::kBadFrame),
                          fmt::format("response id {} does not match request id {}", resp.value("id", json()).dump(), id.dump()));
    }
    return resp;
}

RunnerCapabilities RemoteRunner::hello() { return capabilities_from_json(call(hello_request(next_id_++)).at("capabilities")); }

void RemoteRunner::load_sae(const SaeParams& sae) { call(load_sae_request(next_id_++, sae)); }

void RemoteRunner::load_sae_path(int layer, const std::string& path) {
    call(load_sae_path_request(next_id_++, layer, path));
}

ForwardResult RemoteRunner::forward(const ForwardRequest& req) {
    return forward_result_from_json(call(forward_request(next_id_++, req)));
}

} // namespace qdiss
