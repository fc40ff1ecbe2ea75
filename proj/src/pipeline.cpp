#include "qdiss/pipeline.hpp"

#include <numeric>
#include <set>

#include <fmt/format.h>

#include "qdiss/parallel.hpp"

namespace qdiss {

std::string_view criterion_name(Criterion c) {
    switch (c) {
    case Criterion::Joint: return "joint";
    case Criterion::AccOnly: return "acc_only";
    case Criterion::EntropyOnly: return "entropy_only";
    }
    return "joint";
}

Criterion parse_criterion(std::string_view s) {
    if (s == "joint") return Criterion::Joint;
    if (s == "acc" || s == "acc_only") return Criterion::AccOnly;
    if (s == "entropy" || s == "entropy_only") return Criterion::EntropyOnly;
    throw Error("unknown criterion '" + std::string(s) + "' (expected joint, acc or entropy)");
}

bool criterion_passes(Criterion c, double acc_delta, double entropy_delta) {
    switch (c) {
    case Criterion::Joint: return acc_delta >= 0.0 && entropy_delta < 0.0;
    case Criterion::AccOnly: return acc_delta >= 0.0;
    case Criterion::EntropyOnly: return entropy_delta < 0.0;
    }
    return false;
}

int SuppressionConfig::total() const {
    int n = 0;
    for (const auto& [l, f] : features) n += static_cast<int>(f.size());
    return n;
}

json suppression_config_to_json(const SuppressionConfig& c) {
    json layers = json::object();
    for (const auto& [l, f] : c.features) {
        if (!f.empty()) layers[std::to_string(l)] = f;
    }
    return {{"kind", "suppression_config"}, {"layers", std::move(layers)}, {"provenance", c.provenance}};
}

SuppressionConfig suppression_config_from_json(const json& j) {
    SuppressionConfig c;
    for (const auto& [key, f] : j.at("layers").items()) {
        auto v = f.get<std::vector<int>>();
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        c.features[std::stoi(key)] = std::move(v);
    }
    c.provenance = j.value("provenance", json::object());
    return c;
}

json eval_summary_to_json(const EvalSummary& s) {
    return {{"accuracy", s.accuracy}, {"mean_entropy", s.mean_entropy}, {"n_items", s.n_items}, {"suppression_hash", s.suppression_hash}};
}

EvalSummary eval_summary_from_json(const json& j) {
    return {j.at("accuracy").get<double>(), j.at("mean_entropy").get<double>(), j.at("n_items").get<int>(),
            j.value("suppression_hash", "")};
}

HalfSplit split_items(const std::vector<McqItem>& items, std::uint64_t seed) {
    auto [a, b] = split_half(items, seed);
    return {{"discovery", std::move(a)}, {"validation", std::move(b)}};
}

void assert_disjoint(const Split& a, const Split& b) {
    std::set<std::string> ids;
    for (const auto& it : a.items) ids.insert(it.id);
    for (const auto& it : b.items) {
        if (ids.count(it.id)) {
            throw Error(fmt::format("question {} appears in both the {} and {} splits", it.id, a.name, b.name));
        }
    }
}

std::vector<InferenceRecord> infer(Runner& runner, const std::vector<McqItem>& items, const std::vector<int>& layers) {
    ForwardRequest req;
    req.items = items;
    req.capture_layers = layers;
    auto res = forward_all(runner, req);
    if (res.items.size() != items.size()) throw RunnerError(std::string(error_code::kBadFrame), "runner returned wrong item count");
    std::vector<InferenceRecord> out;
    out.reserve(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        out.push_back(make_record(items[i].id, res.items[i].probs, items[i].gold, items[i].dataset,
                                  std::move(res.items[i].captured)));
    }
    return out;
}

GroupLatents group_latents(std::span<const InferenceRecord> records, const QuadrantSplit& split, const SaeParams& sae) {
    if (split.assignments.size() != records.size()) throw Error("group_latents: split does not match records");
    // Visit members in id order so results do not depend on record order.
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return records[a].question_id < records[b].question_id; });
    GroupLatents g;
    g.layer = sae.layer;
    g.a.n_features = g.b.n_features = g.c.n_features = sae.m;
    for (std::size_t i : order) {
        LatentMatrix* target = nullptr;
        switch (split.assignments[i].group) {
        case Group::A: target = &g.a; break;
        case Group::B: target = &g.b; break;
        case Group::C: target = &g.c; break;
        default: break;
        }
        if (!target) continue;
        auto it = records[i].activations.find(sae.layer);
        if (it == records[i].activations.end()) {
            throw Error(fmt::format("record {} has no activation at layer {}", records[i].question_id, sae.layer));
        }
        const auto z = encode(sae, it->second);
        target->values.insert(target->values.end(), z.begin(), z.end());
    }
    return g;
}

namespace {

DiscoveryResult discover_with(std::span<const InferenceRecord> records, const std::map<int, SaeParams>& saes,
                              double alpha, QuadrantSplit split, int jobs) {
    DiscoveryResult r;
    r.split = std::move(split);
    for (const auto& [layer, sae] : saes) {
        const auto groups = group_latents(records, r.split, sae);
        if (groups.a.rows() == 0 || groups.b.rows() == 0 || groups.c.rows() == 0) r.degenerate_layers.push_back(layer);
        auto stats = classify_features(groups, alpha, jobs);
        auto& counts = r.counts[layer];
        for (Category c : kFeatureCategories) counts[c] = 0;
        for (const auto& s : stats) {
            if (s.category != Category::None) ++counts[s.category];
        }
        r.stats.insert(r.stats.end(), stats.begin(), stats.end());
    }
    return r;
}

} // namespace

DiscoveryResult discover(std::span<const InferenceRecord> records, const std::map<int, SaeParams>& saes, double alpha,
                         double lo_pct, double hi_pct, int jobs) {
    return discover_with(records, saes, alpha, assign_quadrants(records, lo_pct, hi_pct), jobs);
}

DiscoveryResult discover_median(std::span<const InferenceRecord> records, const std::map<int, SaeParams>& saes,
                                double alpha, int jobs) {
    return discover_with(records, saes, alpha, median_split(records), jobs);
}

std::string counts_csv(const DiscoveryResult& r) {
    std::string out = "layer,pure_uncertainty,pure_incorrectness,confounded\n";
    std::map<Category, int> totals;
    for (const auto& [layer, counts] : r.counts) {
        out += fmt::format("{},{},{},{}\n", layer, counts.at(Category::PureUncertainty),
                           counts.at(Category::PureIncorrectness), counts.at(Category::Confounded));
        for (const auto& [c, n] : counts) totals[c] += n;
    }
    out += fmt::format("total,{},{},{}\n", totals[Category::PureUncertainty], totals[Category::PureIncorrectness],
                       totals[Category::Confounded]);
    return out;
}

EvalSummary summarize(const ForwardResult& result, const std::vector<McqItem>& items) {
    if (result.items.size() != items.size()) throw RunnerError(std::string(error_code::kBadFrame), "runner returned wrong item count");
    EvalSummary s;
    s.n_items = static_cast<int>(items.size());
    if (items.empty()) return s;
    int correct = 0;
    double ent = 0.0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& p = result.items[i].probs;
        if (argmax4(p) == items[i].gold) ++correct;
        ent += answer_entropy(p);
    }
    s.accuracy = static_cast<double>(correct) / s.n_items;
    s.mean_entropy = ent / s.n_items;
    return s;
}

namespace {

std::string items_key(const std::vector<McqItem>& items) {
    std::string text;
    for (const auto& it : items) text += it.id + '\x1f' + std::to_string(it.gold) + '\n';
    return content_hash(text);
}

std::string config_key(const SuppressionMap& m) {
    json j = json::object();
    for (const auto& [l, f] : m) {
        if (!f.empty()) j[std::to_string(l)] = f;
    }
    return content_hash(j.dump());
}

EvalSummary run_suppressed(Runner& runner, const std::vector<McqItem>& items, const SuppressionMap& features) {
    ForwardRequest req;
    req.items = items;
    for (const auto& [l, f] : features) {
        if (!f.empty()) req.suppress[l] = f;
    }
    auto s = summarize(forward_all(runner, req), items);
    s.suppression_hash = config_key(req.suppress);
    return s;
}

} // namespace

EvalSummary Evaluator::baseline(const std::vector<McqItem>& items) {
    const auto key = items_key(items);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    auto s = run_suppressed(runner_, items, {});
    cache_.emplace(key, s);
    return s;
}

EvalSummary Evaluator::evaluate(const std::vector<McqItem>& items, const SuppressionConfig& config) {
    if (config.empty()) return baseline(items);
    return run_suppressed(runner_, items, config.features);
}

EvalSummary evaluate(Runner& runner, const std::vector<McqItem>& items, const SuppressionConfig& config) {
    return run_suppressed(runner, items, config.features);
}

ScreenResult screen(Evaluator& ev, const Split& discovery, const std::map<int, std::vector<FeatureStat>>& candidates,
                    Criterion criterion) {
    if (discovery.name != "discovery") {
        throw Error("screening must read the discovery split, got '" + discovery.name + "'");
    }
    ScreenResult r;
    r.baseline = ev.baseline(discovery.items);
    for (const auto& [layer, feats] : candidates) {
        for (const auto& f : feats) r.rows.push_back({layer, f.feature, 0.0, 0.0, false, criterion});
    }
    const int jobs = ev.runner().concurrent_forwards() ? ev.jobs() : 1;
    parallel_for(r.rows.size(), jobs, [&](std::size_t i) {
        auto& row = r.rows[i];
        const auto s = run_suppressed(ev.runner(), discovery.items, {{row.layer, {row.feature}}});
        // Deltas come from exact correct counts so "no degradation" has no epsilon.
        const long correct = std::lround(s.accuracy * s.n_items);
        const long base_correct = std::lround(r.baseline.accuracy * r.baseline.n_items);
        row.acc_delta = 100.0 * static_cast<double>(correct - base_correct) / std::max(s.n_items, 1);
        row.entropy_delta = s.mean_entropy - r.baseline.mean_entropy;
    });
    r.config = rescreen(r, criterion);
    return r;
}

SuppressionConfig rescreen(const ScreenResult& r, Criterion criterion) {
    SuppressionConfig c;
    for (const auto& row : r.rows) {
        if (criterion_passes(criterion, row.acc_delta, row.entropy_delta)) c.features[row.layer].push_back(row.feature);
    }
    for (auto& [l, f] : c.features) std::sort(f.begin(), f.end());
    c.provenance = {{"criterion", criterion_name(criterion)}};
    return c;
}

std::string screen_csv(const ScreenResult& r) {
    std::string out = "layer,feature,acc_delta,entropy_delta,pass,criterion\n";
    for (const auto& row : r.rows) {
        const bool pass = criterion_passes(row.criterion, row.acc_delta, row.entropy_delta);
        out += fmt::format("{},{},{},{},{},{}\n", row.layer, row.feature, row.acc_delta, row.entropy_delta, pass ? 1 : 0,
                           criterion_name(row.criterion));
    }
    return out;
}

std::map<int, std::vector<int>> active_features(std::span<const InferenceRecord> records,
                                                const std::map<int, SaeParams>& saes, double threshold) {
    std::map<int, std::vector<int>> out;
    for (const auto& [layer, sae] : saes) {
        std::vector<int> nonzero(static_cast<std::size_t>(sae.m), 0);
        for (const auto& r : records) {
            auto it = r.activations.find(layer);
            if (it == r.activations.end()) continue;
            const auto z = encode(sae, it->second);
            for (int j = 0; j < sae.m; ++j) nonzero[j] += z[j] != 0.0f ? 1 : 0;
        }
        auto& v = out[layer];
        for (int j = 0; j < sae.m; ++j) {
            if (!records.empty() && static_cast<double>(nonzero[j]) / records.size() >= threshold) v.push_back(j);
        }
    }
    return out;
}

ControlResult random_control(Evaluator& ev, const Split& discovery, std::span<const InferenceRecord> discovery_records,
                             const std::map<int, SaeParams>& saes, const SuppressionConfig& to_match,
                             double active_threshold, std::uint64_t seed) {
    ControlResult out;
    const auto active = active_features(discovery_records, saes, active_threshold);
    std::mt19937_64 rng(seed);
    for (const auto& [layer, matched] : to_match.features) {
        if (matched.empty()) continue;
        std::vector<int> pool;
        auto it = active.find(layer);
        if (it != active.end()) {
            for (int f : it->second) {
                if (!std::binary_search(matched.begin(), matched.end(), f)) pool.push_back(f);
            }
        }
        if (pool.size() < matched.size()) {
            out.skipped_layers.push_back(layer);
            continue;
        }
        for (std::size_t i = 0; i < matched.size(); ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng() % (pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        std::vector<int> pick(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(matched.size()));
        std::sort(pick.begin(), pick.end());
        out.sampled.features[layer] = std::move(pick);
    }
    std::map<int, std::vector<FeatureStat>> candidates;
    for (const auto& [layer, feats] : out.sampled.features) {
        for (int f : feats) {
            FeatureStat s;
            s.layer = layer;
            s.feature = f;
            candidates[layer].push_back(s);
        }
    }
    out.survived = screen(ev, discovery, candidates, Criterion::Joint).config;
    out.sampled.provenance = {{"kind", "random_control"}, {"seed", seed}};
    out.survived.provenance = {{"kind", "random_control"}, {"seed", seed}, {"criterion", "joint"}};
    return out;
}

TransferResult transfer(Evaluator& ev, const std::vector<McqItem>& target, const SuppressionConfig& config,
                        const std::map<int, int>& widths) {
    for (const auto& [layer, feats] : config.features) {
        if (feats.empty()) continue;
        auto it = widths.find(layer);
        if (it == widths.end()) throw Error(fmt::format("transfer: no target SAE at layer {}", layer));
        for (int f : feats) {
            if (f < 0 || f >= it->second) {
                throw Error(fmt::format("transfer: feature {} out of range for target SAE at layer {} (m={})", f, layer,
                                        it->second));
            }
        }
    }
    TransferResult r;
    r.baseline = ev.baseline(target);
    r.suppressed = ev.evaluate(target, config);
    r.acc_delta = 100.0 * (r.suppressed.accuracy - r.baseline.accuracy);
    r.entropy_delta = r.suppressed.mean_entropy - r.baseline.mean_entropy;
    return r;
}

std::vector<DepthPoint> depth_gradient(std::span<const FeatureStat> stats, int n_layers) {
    if (n_layers < 1) throw Error("depth_gradient: n_layers must be >= 1");
    std::map<std::pair<Category, int>, double> best;
    for (const auto& s : stats) {
        if (s.category == Category::None) continue;
        auto key = std::make_pair(s.category, s.layer);
        auto it = best.find(key);
        if (it == best.end() || s.effect > it->second) best[key] = s.effect;
    }
    std::vector<DepthPoint> out;
    for (const auto& [key, eff] : best) {
        out.push_back({key.first, key.second, static_cast<double>(key.second) / n_layers, eff});
    }
    return out;
}

std::string depth_csv(std::span<const DepthPoint> pts) {
    std::string out = "category,layer,depth,max_effect\n";
    for (const auto& p : pts) out += fmt::format("{},{},{},{}\n", category_name(p.category), p.layer, p.depth, p.max_effect);
    return out;
}

} // namespace qdiss
