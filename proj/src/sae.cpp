#include "qdiss/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace qdiss {

namespace {

void check_finite(const std::vector<float>& v, const char* what) {
    for (float f : v) {
        if (!std::isfinite(f)) throw Error(std::string("SAE ") + what + " contains non-finite values");
    }
}

} // namespace

void SaeParams::validate() const {
    if (d < 1 || m < 1) throw Error("SAE dimensions must be positive (d=" + std::to_string(d) + ", m=" + std::to_string(m) + ")");
    const auto dm = static_cast<std::size_t>(d) * static_cast<std::size_t>(m);
    if (w_enc.size() != dm) throw Error("w_enc must be m x d");
    if (w_dec.size() != dm) throw Error("w_dec must be d x m");
    if (b_enc.size() != static_cast<std::size_t>(m)) throw Error("b_enc must have length m");
    if (b_pre.size() != static_cast<std::size_t>(d)) throw Error("b_pre must have length d");
    check_finite(w_enc, "w_enc");
    check_finite(w_dec, "w_dec");
    check_finite(b_enc, "b_enc");
    check_finite(b_pre, "b_pre");
    if (const auto* tk = std::get_if<TopK>(&nonlinearity)) {
        if (tk->k < 1 || tk->k > m) throw Error("topk k must be in 1..m");
    }
    if (const auto* jr = std::get_if<JumpRelu>(&nonlinearity)) {
        if (jr->theta.size() != static_cast<std::size_t>(m)) throw Error("jumprelu theta must have length m");
        for (float t : jr->theta) {
            if (!(t >= 0.0f) || !std::isfinite(t)) throw Error("jumprelu thresholds must be finite and non-negative");
        }
    }
}

FeatureSet make_feature_set(int layer, std::vector<int> indices) {
    std::sort(indices.begin(), indices.end());
    indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
    return FeatureSet{layer, std::move(indices)};
}

std::vector<float> pre_activations(const SaeParams& sae, std::span<const float> x) {
    if (x.size() != static_cast<std::size_t>(sae.d)) {
        throw Error("encode: input length " + std::to_string(x.size()) + " != d " + std::to_string(sae.d));
    }
    std::vector<float> u(static_cast<std::size_t>(sae.m));
    for (int i = 0; i < sae.m; ++i) {
        const float* row = sae.w_enc.data() + static_cast<std::size_t>(i) * sae.d;
        double acc = 0.0;
        for (int j = 0; j < sae.d; ++j) acc += static_cast<double>(row[j]) * (static_cast<double>(x[j]) - sae.b_pre[j]);
        u[i] = static_cast<float>(acc + sae.b_enc[i]);
    }
    return u;
}

std::vector<float> encode(const SaeParams& sae, std::span<const float> x) {
    auto z = pre_activations(sae, x);
    std::visit(
        [&](const auto& nl) {
            using T = std::decay_t<decltype(nl)>;
            if constexpr (std::is_same_v<T, Relu>) {
                for (auto& v : z) v = std::max(v, 0.0f);
            } else if constexpr (std::is_same_v<T, TopK>) {
                for (auto& v : z) v = std::max(v, 0.0f);
                std::vector<int> order(z.size());
                std::iota(order.begin(), order.end(), 0);
                std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return z[a] > z[b]; });
                for (std::size_t r = static_cast<std::size_t>(nl.k); r < order.size(); ++r) z[order[r]] = 0.0f;
            } else {
                for (std::size_t i = 0; i < z.size(); ++i) {
                    if (!(z[i] > nl.theta[i])) z[i] = 0.0f;
                }
            }
        },
        sae.nonlinearity);
    return z;
}

std::vector<float> decode(const SaeParams& sae, std::span<const float> z) {
    if (z.size() != static_cast<std::size_t>(sae.m)) {
        throw Error("decode: latent length " + std::to_string(z.size()) + " != m " + std::to_string(sae.m));
    }
    std::vector<float> out(static_cast<std::size_t>(sae.d));
    for (int r = 0; r < sae.d; ++r) {
        const float* row = sae.w_dec.data() + static_cast<std::size_t>(r) * sae.m;
        double acc = 0.0;
        for (int i = 0; i < sae.m; ++i) acc += static_cast<double>(row[i]) * z[i];
        out[r] = static_cast<float>(acc + sae.b_pre[r]);
    }
    return out;
}

std::vector<float> suppression_delta(const SaeParams& sae, std::span<const float> x, std::span<const int> features) {
    for (int f : features) {
        if (f < 0 || f >= sae.m) {
            throw Error("feature index " + std::to_string(f) + " out of range for SAE with m=" + std::to_string(sae.m));
        }
    }
    std::vector<float> delta(static_cast<std::size_t>(sae.d), 0.0f);
    if (features.empty()) return delta;
    auto z = encode(sae, x);
    for (int f : features) {
        const float a = z[f];
        if (a == 0.0f) continue;
        for (int r = 0; r < sae.d; ++r) delta[r] -= a * sae.dec(r, f);
    }
    return delta;
}

std::vector<float> suppression_delta(const SaeParams& sae, std::span<const float> x, const FeatureSet& fs) {
    if (fs.layer != sae.layer) {
        throw Error("feature set targets layer " + std::to_string(fs.layer) + " but SAE is attached to layer " +
                    std::to_string(sae.layer));
    }
    return suppression_delta(sae, x, std::span<const int>(fs.indices));
}

std::pair<double, double> reconstruction_stats(const SaeParams& sae, std::span<const std::vector<float>> samples) {
    if (samples.empty()) return {0.0, 0.0};
    double se = 0.0, l0 = 0.0;
    for (const auto& x : samples) {
        auto z = encode(sae, x);
        auto xh = decode(sae, z);
        for (int r = 0; r < sae.d; ++r) {
            double diff = static_cast<double>(xh[r]) - x[r];
            se += diff * diff;
        }
        for (float v : z) l0 += v != 0.0f ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(samples.size());
    return {se / (n * sae.d), l0 / n};
}

SaeParams train_sae(std::span<const std::vector<float>> samples, int m, double sparsity_weight, int epochs,
                    std::uint64_t seed, const TrainOptions& opts, TrainReport* report) {
    if (samples.empty()) throw Error("train_sae: need at least one sample");
    if (m < 1) throw Error("train_sae: m must be positive");
    if (epochs < 0) throw Error("train_sae: epochs must be non-negative");
    const int d = static_cast<int>(samples.front().size());
    if (d < 1) throw Error("train_sae: samples must be non-empty vectors");
    for (const auto& s : samples) {
        if (static_cast<int>(s.size()) != d) throw Error("train_sae: samples have inconsistent lengths");
    }
    const std::size_t n = samples.size();
    const double inv_n = 1.0 / static_cast<double>(n);

    // Working copies in double; the result is rounded to f32 at the end.
    std::vector<double> wenc(static_cast<std::size_t>(m) * d), wdec(static_cast<std::size_t>(d) * m);
    std::vector<double> benc(static_cast<std::size_t>(m), 0.0), bpre(static_cast<std::size_t>(d), 0.0);
    for (const auto& s : samples) {
        for (int r = 0; r < d; ++r) bpre[r] += s[r] * inv_n;
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& w : wdec) w = normal(rng);
    auto normalize_columns = [&] {
        for (int i = 0; i < m; ++i) {
            double norm = 0.0;
            for (int r = 0; r < d; ++r) norm += wdec[static_cast<std::size_t>(r) * m + i] * wdec[static_cast<std::size_t>(r) * m + i];
            norm = std::sqrt(norm);
            if (norm > 0.0) {
                for (int r = 0; r < d; ++r) wdec[static_cast<std::size_t>(r) * m + i] /= norm;
            }
        }
    };
    normalize_columns();
    for (int i = 0; i < m; ++i) {
        for (int r = 0; r < d; ++r) wenc[static_cast<std::size_t>(i) * d + r] = wdec[static_cast<std::size_t>(r) * m + i];
    }

    std::vector<double> g_wenc(wenc.size()), g_wdec(wdec.size()), g_benc(benc.size()), g_bpre(bpre.size());
    std::vector<double> centered(static_cast<std::size_t>(d)), u(static_cast<std::size_t>(m)),
        resid(static_cast<std::size_t>(d)), du(static_cast<std::size_t>(m));
    double loss = 0.0, mse = 0.0, l0 = 0.0;

    for (int epoch = 0; epoch <= epochs; ++epoch) {
        std::fill(g_wenc.begin(), g_wenc.end(), 0.0);
        std::fill(g_wdec.begin(), g_wdec.end(), 0.0);
        std::fill(g_benc.begin(), g_benc.end(), 0.0);
        std::fill(g_bpre.begin(), g_bpre.end(), 0.0);
        loss = mse = l0 = 0.0;

        for (const auto& x : samples) {
            for (int r = 0; r < d; ++r) centered[r] = x[r] - bpre[r];
            double l1 = 0.0;
            for (int i = 0; i < m; ++i) {
                double acc = benc[i];
                const double* row = wenc.data() + static_cast<std::size_t>(i) * d;
                for (int r = 0; r < d; ++r) acc += row[r] * centered[r];
                u[i] = acc;
                if (acc > 0.0) {
                    l1 += acc;
                    l0 += 1.0;
                }
            }
            double se = 0.0;
            for (int r = 0; r < d; ++r) {
                double acc = bpre[r];
                const double* row = wdec.data() + static_cast<std::size_t>(r) * m;
                for (int i = 0; i < m; ++i) {
                    if (u[i] > 0.0) acc += row[i] * u[i];
                }
                resid[r] = acc - x[r];
                se += resid[r] * resid[r];
            }
            loss += (se + sparsity_weight * l1) * inv_n;
            mse += se * inv_n / d;

            // Backward pass; dL/dx_hat = 2 r / n.
            for (int r = 0; r < d; ++r) {
                const double g = 2.0 * resid[r] * inv_n;
                g_bpre[r] += g;
                double* grow = g_wdec.data() + static_cast<std::size_t>(r) * m;
                for (int i = 0; i < m; ++i) {
                    if (u[i] > 0.0) grow[i] += g * u[i];
                }
            }
            for (int i = 0; i < m; ++i) {
                if (u[i] <= 0.0) {
                    du[i] = 0.0;
                    continue;
                }
                double acc = sparsity_weight * inv_n;
                for (int r = 0; r < d; ++r) acc += wdec[static_cast<std::size_t>(r) * m + i] * 2.0 * resid[r] * inv_n;
                du[i] = acc;
                g_benc[i] += acc;
                double* grow = g_wenc.data() + static_cast<std::size_t>(i) * d;
                for (int r = 0; r < d; ++r) grow[r] += acc * centered[r];
            }
            for (int i = 0; i < m; ++i) {
                if (du[i] == 0.0) continue;
                const double* row = wenc.data() + static_cast<std::size_t>(i) * d;
                for (int r = 0; r < d; ++r) g_bpre[r] -= du[i] * row[r];
            }
        }
        if (!std::isfinite(loss)) throw Error("train_sae: non-finite loss at epoch " + std::to_string(epoch));
        if (epoch == epochs) break;

        const double frac = epochs > 0 ? static_cast<double>(epoch) / epochs : 0.0;
        const double lr = opts.learning_rate * (1.0 - (1.0 - opts.final_lr_fraction) * frac);
        for (std::size_t k = 0; k < wenc.size(); ++k) wenc[k] -= lr * g_wenc[k];
        for (std::size_t k = 0; k < wdec.size(); ++k) wdec[k] -= lr * g_wdec[k];
        for (std::size_t k = 0; k < benc.size(); ++k) benc[k] -= lr * g_benc[k];
        for (std::size_t k = 0; k < bpre.size(); ++k) bpre[k] -= lr * g_bpre[k];
        normalize_columns();
    }

    SaeParams sae;
    sae.layer = 0;
    sae.d = d;
    sae.m = m;
    sae.w_enc.assign(wenc.begin(), wenc.end());
    sae.w_dec.assign(wdec.begin(), wdec.end());
    sae.b_enc.assign(benc.begin(), benc.end());
    sae.b_pre.assign(bpre.begin(), bpre.end());
    sae.nonlinearity = Relu{};
    sae.validate();
    if (report) {
        report->final_loss = loss;
        report->final_mse = mse;
        report->final_l0 = l0 * inv_n;
    }
    return sae;
}

json sae_meta(const SaeParams& sae) {
    json meta = {{"kind", "sae"}, {"layer", sae.layer}, {"d", sae.d}, {"m", sae.m}};
    std::visit(
        [&](const auto& nl) {
            using T = std::decay_t<decltype(nl)>;
            if constexpr (std::is_same_v<T, Relu>) {
                meta["nonlinearity"] = "relu";
            } else if constexpr (std::is_same_v<T, TopK>) {
                meta["nonlinearity"] = "topk";
                meta["k"] = nl.k;
            } else {
                meta["nonlinearity"] = "jumprelu";
            }
        },
        sae.nonlinearity);
    return meta;
}

std::vector<TensorBlob> sae_blobs(const SaeParams& sae) {
    std::vector<TensorBlob> blobs = {
        {"w_enc", {sae.m, sae.d}, sae.w_enc},
        {"b_enc", {sae.m}, sae.b_enc},
        {"w_dec", {sae.d, sae.m}, sae.w_dec},
        {"b_pre", {sae.d}, sae.b_pre},
    };
    if (const auto* jr = std::get_if<JumpRelu>(&sae.nonlinearity)) blobs.push_back({"theta", {sae.m}, jr->theta});
    return blobs;
}

SaeParams sae_from_container(const Container& c) {
    SaeParams sae;
    sae.layer = c.meta.value("layer", 0);
    sae.d = c.meta.at("d").get<int>();
    sae.m = c.meta.at("m").get<int>();
    sae.w_enc = c.at("w_enc").data;
    sae.b_enc = c.at("b_enc").data;
    sae.w_dec = c.at("w_dec").data;
    sae.b_pre = c.at("b_pre").data;
    const auto kind = c.meta.value("nonlinearity", std::string("relu"));
    if (kind == "relu") {
        sae.nonlinearity = Relu{};
    } else if (kind == "topk") {
        sae.nonlinearity = TopK{c.meta.at("k").get<int>()};
    } else if (kind == "jumprelu") {
        sae.nonlinearity = JumpRelu{c.at("theta").data};
    } else {
        throw Error("unknown SAE nonlinearity '" + kind + "'");
    }
    sae.validate();
    return sae;
}

void save_sae(const std::filesystem::path& path, const SaeParams& sae) {
    sae.validate();
    auto blobs = sae_blobs(sae);
    write_container(path, sae_meta(sae), blobs);
}

SaeParams load_sae_file(const std::filesystem::path& path) { return sae_from_container(read_container(path)); }

} // namespace qdiss
