#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include "qdiss/io.hpp"

namespace qdiss {

struct Relu {};
struct TopK {
    int k = 1;
};
/// Value v passes iff v > theta[i].
struct JumpRelu {
    std::vector<float> theta;
};

using Nonlinearity = std::variant<Relu, TopK, JumpRelu>;

/// One sparse autoencoder attached to one residual-stream layer.
///
/// Shapes (row-major): w_enc is m x d, w_dec is d x m (column i is feature i's
/// direction in the residual stream), b_enc is m, b_pre is d.
struct SaeParams {
    int layer = 0;
    int d = 0;
    int m = 0;
    std::vector<float> w_enc;
    std::vector<float> b_enc;
    std::vector<float> w_dec;
    std::vector<float> b_pre;
    Nonlinearity nonlinearity = Relu{};

    /// Throws Error when shapes or values break the invariants.
    void validate() const;

    float dec(int row, int feature) const { return w_dec[static_cast<std::size_t>(row) * m + feature]; }
    float enc(int feature, int col) const { return w_enc[static_cast<std::size_t>(feature) * d + col]; }
};

struct FeatureSet {
    int layer = 0;
    std::vector<int> indices; // sorted, unique
};

/// Sorts and deduplicates indices.
FeatureSet make_feature_set(int layer, std::vector<int> indices);

std::vector<float> pre_activations(const SaeParams& sae, std::span<const float> x);
std::vector<float> encode(const SaeParams& sae, std::span<const float> x);
std::vector<float> decode(const SaeParams& sae, std::span<const float> z);

/// decode(z') - decode(z) where z' zeroes `features`, evaluated in closed form as
/// -sum_i z_i * column_i(W_dec). An empty feature list yields an exact zero vector.
std::vector<float> suppression_delta(const SaeParams& sae, std::span<const float> x, std::span<const int> features);
std::vector<float> suppression_delta(const SaeParams& sae, std::span<const float> x, const FeatureSet& fs);

struct TrainOptions {
    double learning_rate = 0.05;
    /// Learning rate decays linearly to this fraction of its initial value.
    double final_lr_fraction = 0.1;
};

struct TrainReport {
    double final_mse = 0.0;
    double final_l0 = 0.0;
    double final_loss = 0.0;
};

/// Reference ReLU SAE trainer: full-batch gradient descent on
/// mean ||x - x_hat||^2 + sparsity_weight * ||z||_1 with unit-norm decoder columns.
SaeParams train_sae(std::span<const std::vector<float>> samples, int m, double sparsity_weight, int epochs,
                    std::uint64_t seed, const TrainOptions& opts = {}, TrainReport* report = nullptr);

/// Mean squared reconstruction error and mean L0 of the latents over samples.
std::pair<double, double> reconstruction_stats(const SaeParams& sae, std::span<const std::vector<float>> samples);

json sae_meta(const SaeParams& sae);
std::vector<TensorBlob> sae_blobs(const SaeParams& sae);
SaeParams sae_from_container(const Container& c);
void save_sae(const std::filesystem::path& path, const SaeParams& sae);
SaeParams load_sae_file(const std::filesystem::path& path);

} // namespace qdiss
