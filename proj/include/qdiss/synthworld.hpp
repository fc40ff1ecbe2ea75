#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <shared_mutex>
#include <string>
#include <vector>

#include "qdiss/io.hpp"
#include "qdiss/runner.hpp"
#include "qdiss/sae.hpp"

namespace qdiss {

/// Planted feature roles. S is the entropy-sink variant of a confounded feature:
/// its decoder cancels filler evidence that grows with its own activation, so
/// suppressing it makes the model confidently wrong.
enum class Role { U, I, C, S, B };

char role_letter(Role r);
Role parse_role(char c);

struct WorldConfig {
    int d_model = 64;
    int n_layers = 3;
    int dict_size = 0; // per layer; 0 means the sum of the role counts
    int n_u = 5;
    int n_i = 5;
    int n_c = 5;
    int n_s = 0;
    int n_b = 5;
    std::uint64_t seed = 1;

    double noise = 0.02;     // isotropic residual noise scale
    double p_err = 0.22;      // P(error latent e = 1)
    double gold_lo = 3.252;    // gold evidence ~ U(gold_lo, gold_hi) when e = 0
    double gold_hi = 5.49;
    double err_lo = 4.307;     // evidence for the error answer ~ U(err_lo, err_hi) when e = 1
    double err_hi = 5.901;
    double evidence_noise = 0.103;

    double beta = 0.105;       // U: filler logit per unit activation
    double u_max = 1.673;      // U activation cap
    double u_weight = 1.78;
    double u_noise = 0.698;
    double u_threshold = 0.518;

    double rho = 0.303;       // I: correlation of the shared I signal with e
    double i_weight = 1.0;
    double i_noise = 0.121;
    double i_threshold = 0.0;

    double gamma = 0.178;      // C: lure logit per unit activation
    double c_err_weight = 0.616;
    double c_hard_weight = 1.557;
    double c_noise = 1.065;
    double c_threshold = -0.07;

    double kappa = 8.0;      // S: filler evidence added and cancelled per unit activation
    double s_err_weight = 0.7;
    double s_amb_weight = 1.5;
    double s_noise = 0.5;
    double s_threshold = 0.4;

    double depth = 0.5;      // activation scale grows as 1 + depth * l / (L - 1)

    int features_per_layer() const;
    void validate() const;
};

json world_config_to_json(const WorldConfig& c);
/// Unknown keys are rejected so typos surface.
WorldConfig world_config_from_json(const json& j);

/// Latent state of one question, fully determined by (world seed, item id).
struct ItemLatents {
    bool error = false;
    double hardness = 0.0;
    double ambiguity = 0.0;
    std::array<double, 4> evidence{}; // canonical slots: gold, lure, error answer, filler
    std::vector<std::vector<float>> z; // per layer, m planted activations
    std::vector<float> noise;          // d_model
};

/// Immutable after build_world.
struct World {
    WorldConfig cfg;
    int m = 0;
    std::vector<std::vector<float>> dict; // per layer, d x m row-major, orthonormal columns
    std::vector<float> base;              // b, d
    std::vector<float> readout;           // W_r, 4 x d row-major in the canonical slot frame
    std::array<int, 4> evidence_coord{};  // coordinate carrying each slot's evidence
    std::vector<std::vector<Role>> roles; // per layer, per feature

    ItemLatents latents(const std::string& item_id) const;
    /// W_enc = D^T, W_dec = D, b_pre = b, b_enc = 0, relu.
    SaeParams oracle_sae(int layer) const;
    std::vector<int> features_with_role(int layer, Role r) const;
    SuppressionMap role_config(Role r) const;
};

World build_world(const WorldConfig& cfg);

struct GeneratedSet {
    std::vector<McqItem> items;
    json oracle; // roles, per-item latent summary
    std::vector<TensorBlob> planted; // "z.<layer>": n x m planted activations
};

/// Item ids are "<dataset>-<seed>-<index>"; gold is drawn from the item hash.
GeneratedSet gen_questions(const World& world, int n, std::uint64_t seed, const std::string& dataset);

void write_oracle(const std::filesystem::path& path, const GeneratedSet& set);

/// In-process runner over a World. Forwards are safe to run concurrently.
class SynthRunner : public Runner {
public:
    explicit SynthRunner(World world, int jobs = 1, int max_batch = 100000);

    RunnerCapabilities hello() override;
    void load_sae(const SaeParams& sae) override;
    ForwardResult forward(const ForwardRequest& req) override;
    bool concurrent_forwards() const override { return true; }

    void load_oracle_saes();
    const World& world() const { return world_; }

private:
    World world_;
    int jobs_;
    int max_batch_;
    mutable std::shared_mutex mutex_;
    std::map<int, SaeParams> saes_;
};

} // namespace qdiss
