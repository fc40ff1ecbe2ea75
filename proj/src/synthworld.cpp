#include "qdiss/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>
#include <set>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "qdiss/parallel.hpp"

namespace qdiss {

char role_letter(Role r) {
    switch (r) {
    case Role::U: return 'U';
    case Role::I: return 'I';
    case Role::C: return 'C';
    case Role::S: return 'S';
    case Role::B: return 'B';
    }
    return 'B';
}

Role parse_role(char c) {
    switch (c) {
    case 'U': return Role::U;
    case 'I': return Role::I;
    case 'C': return Role::C;
    case 'S': return Role::S;
    case 'B': return Role::B;
    default: throw Error(fmt::format("unknown role '{}'", c));
    }
}

int WorldConfig::features_per_layer() const {
    return dict_size > 0 ? dict_size : n_u + n_i + n_c + n_s + n_b;
}

void WorldConfig::validate() const {
    std::vector<std::string> problems;
    if (d_model < 5) problems.push_back("d_model must be >= 5");
    if (n_layers < 1) problems.push_back("n_layers must be >= 1");
    for (auto [name, v] : {std::pair{"n_u", n_u}, {"n_i", n_i}, {"n_c", n_c}, {"n_s", n_s}, {"n_b", n_b}}) {
        if (v < 0) problems.push_back(fmt::format("{} must be >= 0", name));
    }
    const int planted = n_u + n_i + n_c + n_s + n_b;
    if (dict_size > 0 && dict_size < planted) {
        problems.push_back(fmt::format("dict_size {} is smaller than the {} planted features", dict_size, planted));
    }
    if (features_per_layer() < 1) problems.push_back("dictionary must have at least one feature");
    const long need = static_cast<long>(n_layers) * features_per_layer() + 4;
    if (need > d_model) {
        problems.push_back(fmt::format("capacity exceeded: {} layers x {} features + 4 evidence coordinates = {} > d_model {}",
                                       n_layers, features_per_layer(), need, d_model));
    }
    if (!(p_err >= 0.0 && p_err <= 1.0)) problems.push_back("p_err must lie in [0, 1]");
    if (!(rho >= -1.0 && rho <= 1.0)) problems.push_back("rho must lie in [-1, 1]");
    if (gold_hi < gold_lo) problems.push_back("gold_hi < gold_lo");
    if (err_hi < err_lo) problems.push_back("err_hi < err_lo");
    if (noise < 0 || evidence_noise < 0) problems.push_back("noise scales must be >= 0");
    if (n_s > 0 && !(kappa > 0.0)) problems.push_back("kappa must be > 0 when sink features are planted");
    if (!problems.empty()) {
        std::string msg = "invalid world config:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw Error(msg);
    }
}

#define QDISS_WORLD_FIELDS(X)                                                                                     \
    X(d_model) X(n_layers) X(dict_size) X(n_u) X(n_i) X(n_c) X(n_s) X(n_b) X(seed) X(noise) X(p_err) X(gold_lo) \
    X(gold_hi) X(err_lo) X(err_hi) X(evidence_noise) X(beta) X(u_max) X(u_weight) X(u_noise) X(u_threshold)      \
    X(rho) X(i_weight) X(i_noise) X(i_threshold) X(gamma) X(c_err_weight) X(c_hard_weight) X(c_noise)            \
    X(c_threshold) X(kappa) X(s_err_weight) X(s_amb_weight) X(s_noise) X(s_threshold) X(depth)

json world_config_to_json(const WorldConfig& c) {
    json j;
#define X(f) j[#f] = c.f;
    QDISS_WORLD_FIELDS(X)
#undef X
    return j;
}

WorldConfig world_config_from_json(const json& j) {
    if (!j.is_object()) throw Error("world config must be a JSON object");
    WorldConfig c;
    std::set<std::string> known;
#define X(f)                                                  \
    known.insert(#f);                                         \
    if (j.contains(#f)) j.at(#f).get_to(c.f);
    QDISS_WORLD_FIELDS(X)
#undef X
    std::vector<std::string> unknown;
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) unknown.push_back(k);
    }
    if (!unknown.empty()) {
        std::string msg = "unknown world config keys:";
        for (const auto& k : unknown) msg += " " + k;
        throw Error(msg);
    }
    c.validate();
    return c;
}

#undef QDISS_WORLD_FIELDS

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::mt19937_64 item_rng(std::uint64_t world_seed, std::string_view id, std::uint64_t salt) {
    return std::mt19937_64(splitmix64(fnv1a(id) ^ splitmix64(world_seed + salt)));
}

/// Random k x k orthogonal matrix (Q of a Gaussian QR with sign fix).
Eigen::MatrixXd random_orthogonal(int k, std::mt19937_64& rng) {
    std::normal_distribution<double> n01;
    Eigen::MatrixXd g(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) g(i, j) = n01(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < k; ++j) {
        if (r(j, j) < 0) q.col(j) *= -1.0;
    }
    return q;
}

constexpr std::uint64_t kLatentSalt = 0x4c41544eULL;
constexpr std::uint64_t kGoldSalt = 0x474f4c44ULL;

} // namespace

World build_world(const WorldConfig& cfg) {
    cfg.validate();
    World w;
    w.cfg = cfg;
    w.m = cfg.features_per_layer();
    const int d = cfg.d_model, L = cfg.n_layers, m = w.m;
    std::mt19937_64 rng(splitmix64(cfg.seed));

    // Coordinate blocks: 4 evidence coordinates, a readout block for U/C/S
    // columns, and a null block (never read by W_r) for I/B/dead columns.
    std::vector<int> coords(static_cast<std::size_t>(d));
    std::iota(coords.begin(), coords.end(), 0);
    std::shuffle(coords.begin(), coords.end(), rng);
    for (int k = 0; k < 4; ++k) w.evidence_coord[k] = coords[k];
    const int n_read = L * (cfg.n_u + cfg.n_c + cfg.n_s);
    const int n_null = d - 4 - n_read;
    std::vector<int> read_coords(coords.begin() + 4, coords.begin() + 4 + n_read);
    std::vector<int> null_coords(coords.begin() + 4 + n_read, coords.end());

    // Role layout per layer, shuffled so feature ids carry no role information.
    w.roles.resize(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
        auto& r = w.roles[l];
        r.insert(r.end(), cfg.n_u, Role::U);
        r.insert(r.end(), cfg.n_i, Role::I);
        r.insert(r.end(), cfg.n_c, Role::C);
        r.insert(r.end(), cfg.n_s, Role::S);
        r.insert(r.end(), static_cast<std::size_t>(m - (cfg.n_u + cfg.n_i + cfg.n_c + cfg.n_s)), Role::B);
        std::shuffle(r.begin(), r.end(), rng);
    }

    const Eigen::MatrixXd q_read = random_orthogonal(std::max(n_read, 1), rng);
    const Eigen::MatrixXd q_null = random_orthogonal(std::max(n_null, 1), rng);
    int next_read = 0, next_null = 0;
    w.dict.assign(static_cast<std::size_t>(L), std::vector<float>(static_cast<std::size_t>(d) * m, 0.0f));
    w.readout.assign(static_cast<std::size_t>(4) * d, 0.0f);
    for (int k = 0; k < 4; ++k) w.readout[static_cast<std::size_t>(k) * d + w.evidence_coord[k]] = 1.0f;

    for (int l = 0; l < L; ++l) {
        for (int j = 0; j < m; ++j) {
            const Role role = w.roles[l][j];
            const bool reads = role == Role::U || role == Role::C || role == Role::S;
            const auto& block = reads ? read_coords : null_coords;
            const auto& q = reads ? q_read : q_null;
            const int col = reads ? next_read++ : next_null++;
            for (std::size_t r = 0; r < block.size(); ++r) {
                w.dict[l][static_cast<std::size_t>(block[r]) * m + j] = static_cast<float>(q(static_cast<int>(r), col));
            }
            if (!reads) continue;
            int slot = 3;
            double effect = 0.0;
            if (role == Role::U) effect = cfg.beta;
            if (role == Role::C) {
                slot = 1;
                effect = cfg.gamma;
            }
            if (role == Role::S) effect = -cfg.kappa;
            for (int i : block) {
                auto& wr = w.readout[static_cast<std::size_t>(slot) * d + i];
                wr = static_cast<float>(wr + effect * w.dict[l][static_cast<std::size_t>(i) * m + j]);
            }
        }
    }

    w.base.assign(static_cast<std::size_t>(d), 0.0f);
    std::normal_distribution<double> n01;
    for (int i : null_coords) w.base[i] = static_cast<float>(0.5 * n01(rng));
    return w;
}

ItemLatents World::latents(const std::string& item_id) const {
    auto rng = item_rng(cfg.seed, item_id, kLatentSalt);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> n01;
    const int L = cfg.n_layers, d = cfg.d_model;

    ItemLatents it;
    it.error = unif(rng) < cfg.p_err;
    it.hardness = unif(rng);
    it.ambiguity = unif(rng);
    const double e = it.error ? 1.0 : 0.0;
    const double e_std = (cfg.p_err > 0.0 && cfg.p_err < 1.0) ? (e - cfg.p_err) / std::sqrt(cfg.p_err * (1.0 - cfg.p_err)) : 0.0;
    const double gold_ev = cfg.gold_lo + (cfg.gold_hi - cfg.gold_lo) * unif(rng);
    const double err_ev = cfg.err_lo + (cfg.err_hi - cfg.err_lo) * unif(rng);
    it.evidence = {it.error ? 0.0 : gold_ev, 0.0, it.error ? err_ev : 0.0, 0.0};
    for (double& v : it.evidence) v += cfg.evidence_noise * n01(rng);
    const double shared_i = cfg.rho * e_std + std::sqrt(std::max(0.0, 1.0 - cfg.rho * cfg.rho)) * n01(rng);

    it.z.assign(static_cast<std::size_t>(L), std::vector<float>(static_cast<std::size_t>(m), 0.0f));
    for (int l = 0; l < L; ++l) {
        const double wl = 1.0 + cfg.depth * (L > 1 ? static_cast<double>(l) / (L - 1) : 0.0);
        for (int j = 0; j < m; ++j) {
            const double xi = n01(rng);
            double z = 0.0;
            switch (roles[l][j]) {
            case Role::U:
                z = std::min(std::max(wl * cfg.u_weight * (2.0 * it.ambiguity - 1.0) + cfg.u_noise * xi - cfg.u_threshold, 0.0),
                             cfg.u_max);
                break;
            case Role::I:
                z = std::max(wl * cfg.i_weight * shared_i + cfg.i_noise * xi - cfg.i_threshold, 0.0);
                break;
            case Role::C:
                z = std::max(wl * (cfg.c_err_weight * e_std + cfg.c_hard_weight * (2.0 * it.hardness - 1.0)) +
                                 cfg.c_noise * xi - cfg.c_threshold,
                             0.0);
                break;
            case Role::S:
                z = std::max(wl * (cfg.s_err_weight * e_std + cfg.s_amb_weight * (2.0 * it.ambiguity - 1.0)) +
                                 cfg.s_noise * xi - cfg.s_threshold,
                             0.0);
                it.evidence[3] += cfg.kappa * z;
                break;
            case Role::B: {
                const bool dead = std::count(roles[l].begin(), roles[l].begin() + j + 1, Role::B) > cfg.n_b;
                z = dead ? 0.0 : std::max(xi - 1.0, 0.0);
                break;
            }
            }
            it.z[l][j] = static_cast<float>(z);
        }
    }
    it.noise.resize(static_cast<std::size_t>(d));
    for (auto& v : it.noise) v = static_cast<float>(cfg.noise * n01(rng));
    return it;
}

SaeParams World::oracle_sae(int layer) const {
    if (layer < 0 || layer >= cfg.n_layers) throw Error(fmt::format("oracle_sae: no layer {}", layer));
    const int d = cfg.d_model;
    SaeParams sae;
    sae.layer = layer;
    sae.d = d;
    sae.m = m;
    sae.w_dec = dict[layer];
    sae.w_enc.resize(static_cast<std::size_t>(m) * d);
    for (int j = 0; j < m; ++j)
        for (int i = 0; i < d; ++i) sae.w_enc[static_cast<std::size_t>(j) * d + i] = dict[layer][static_cast<std::size_t>(i) * m + j];
    sae.b_enc.assign(static_cast<std::size_t>(m), 0.0f);
    sae.b_pre = base;
    sae.nonlinearity = Relu{};
    return sae;
}

std::vector<int> World::features_with_role(int layer, Role r) const {
    std::vector<int> out;
    for (int j = 0; j < m; ++j) {
        if (roles.at(layer)[j] == r) out.push_back(j);
    }
    return out;
}

SuppressionMap World::role_config(Role r) const {
    SuppressionMap s;
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto f = features_with_role(l, r);
        if (!f.empty()) s[l] = std::move(f);
    }
    return s;
}

GeneratedSet gen_questions(const World& world, int n, std::uint64_t seed, const std::string& dataset) {
    if (n < 1) throw Error("gen_questions: n must be >= 1");
    GeneratedSet set;
    json roles = json::array();
    for (const auto& layer : world.roles) {
        std::string s;
        for (Role r : layer) s += role_letter(r);
        roles.push_back(s);
    }
    json items = json::array();
    const int L = world.cfg.n_layers;
    for (int l = 0; l < L; ++l) set.planted.push_back({fmt::format("z.{}", l), {n, world.m}, {}});
    for (int i = 0; i < n; ++i) {
        McqItem item;
        item.id = fmt::format("{}-{}-{}", dataset, seed, i);
        auto grng = item_rng(world.cfg.seed, item.id, kGoldSalt);
        item.gold = static_cast<int>(grng() % 4);
        item.question = fmt::format("synthetic question {}", item.id);
        item.choices = {"option A", "option B", "option C", "option D"};
        item.dataset = dataset;
        const auto lat = world.latents(item.id);
        items.push_back({{"id", item.id},
                         {"gold", item.gold},
                         {"error", lat.error},
                         {"hardness", lat.hardness},
                         {"ambiguity", lat.ambiguity},
                         {"filler_evidence", lat.evidence[3]}});
        for (int l = 0; l < L; ++l) set.planted[l].data.insert(set.planted[l].data.end(), lat.z[l].begin(), lat.z[l].end());
        set.items.push_back(std::move(item));
    }
    set.oracle = {{"kind", "oracle"}, {"dataset", dataset}, {"seed", seed}, {"roles", roles}, {"items", items},
                  {"world", world_config_to_json(world.cfg)}};
    return set;
}

void write_oracle(const std::filesystem::path& path, const GeneratedSet& set) {
    write_container(path, set.oracle, set.planted);
}

// ---- runner ------------------------------------------------------------------

SynthRunner::SynthRunner(World world, int jobs, int max_batch)
    : world_(std::move(world)), jobs_(std::max(jobs, 1)), max_batch_(max_batch) {}

RunnerCapabilities SynthRunner::hello() { return {world_.cfg.n_layers, world_.cfg.d_model, max_batch_, "synth"}; }

void SynthRunner::load_sae(const SaeParams& sae) {
    sae.validate();
    if (sae.layer < 0 || sae.layer >= world_.cfg.n_layers) {
        throw RunnerError(std::string(error_code::kUnknownLayer), fmt::format("unknown layer {}", sae.layer));
    }
    if (sae.d != world_.cfg.d_model) {
        throw RunnerError(std::string(error_code::kDimension),
                          fmt::format("SAE width d={} does not match d_model={}", sae.d, world_.cfg.d_model));
    }
    std::unique_lock lock(mutex_);
    saes_[sae.layer] = sae;
}

void SynthRunner::load_oracle_saes() {
    for (int l = 0; l < world_.cfg.n_layers; ++l) load_sae(world_.oracle_sae(l));
}

ForwardResult SynthRunner::forward(const ForwardRequest& req) {
    const int L = world_.cfg.n_layers, d = world_.cfg.d_model, m = world_.m;
    if (req.items.size() > static_cast<std::size_t>(max_batch_)) {
        throw RunnerError(std::string(error_code::kBatch),
                          fmt::format("batch of {} exceeds max_batch {}", req.items.size(), max_batch_));
    }
    std::vector<bool> capture(static_cast<std::size_t>(L), false);
    for (int l : req.capture_layers) {
        if (l < 0 || l >= L) throw RunnerError(std::string(error_code::kUnknownLayer), fmt::format("cannot capture unknown layer {}", l));
        capture[l] = true;
    }
    for (const auto& item : req.items) {
        if (item.gold < 0 || item.gold > 3) {
            throw RunnerError(std::string(error_code::kBadItem), fmt::format("item {}: gold out of range", item.id));
        }
    }
    std::shared_lock lock(mutex_);
    check_suppression(req.suppress, L, [&](int layer) {
        auto it = saes_.find(layer);
        return it == saes_.end() ? -1 : it->second.m;
    });

    ForwardResult out;
    out.items.resize(req.items.size());
    parallel_for(req.items.size(), jobs_, [&](std::size_t idx) {
        const auto& item = req.items[idx];
        const auto lat = world_.latents(item.id);
        std::vector<float> x(static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i) x[i] = world_.base[i] + lat.noise[i];
        for (int k = 0; k < 4; ++k) x[world_.evidence_coord[k]] += static_cast<float>(lat.evidence[k]);
        auto& res = out.items[idx];
        for (int l = 0; l < L; ++l) {
            const auto& D = world_.dict[l];
            const auto& z = lat.z[l];
            for (int r = 0; r < d; ++r) {
                double acc = 0.0;
                for (int j = 0; j < m; ++j) acc += static_cast<double>(D[static_cast<std::size_t>(r) * m + j]) * z[j];
                x[r] += static_cast<float>(acc);
            }
            if (capture[l]) res.captured[l] = x;
            auto s = req.suppress.find(l);
            if (s != req.suppress.end() && !s->second.empty()) {
                const auto delta = suppression_delta(saes_.at(l), x, s->second);
                for (int i = 0; i < d; ++i) x[i] += delta[i];
            }
        }
        std::array<double, 4> canon{};
        for (int k = 0; k < 4; ++k) {
            double acc = 0.0;
            for (int i = 0; i < d; ++i) acc += static_cast<double>(world_.readout[static_cast<std::size_t>(k) * d + i]) * x[i];
            canon[k] = acc;
        }
        const double mx = *std::max_element(canon.begin(), canon.end());
        double sum = 0.0;
        for (double& v : canon) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (int k = 0; k < 4; ++k) res.probs[(item.gold + k) % 4] = canon[k] / sum;
    });
    return out;
}

} // namespace qdiss
