#include "qdiss/experiment.hpp"

#include <algorithm>
#include <set>

#include <fmt/format.h>

namespace qdiss {

std::vector<std::string> RunConfig::problems() const {
    std::vector<std::string> p;
    try {
        world.validate();
    } catch (const Error& e) {
        p.push_back(e.what());
    }
    if (runner != "synth" && runner.rfind("tcp:", 0) != 0 && runner.rfind("stdio:", 0) != 0) {
        p.push_back("runner must be synth, tcp:<host:port> or stdio:<command>");
    }
    if (n_questions < 8) p.push_back("n_questions must be >= 8");
    if (dataset.empty()) p.push_back("dataset must be non-empty");
    if (transfer_dataset == dataset) p.push_back("transfer_dataset must differ from dataset");
    if (!(alpha >= 0.0 && alpha <= 1.0)) p.push_back("alpha must lie in [0, 1]");
    if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0)) p.push_back("percentiles must satisfy 0 <= lo_pct < hi_pct <= 100");
    if (top_k < 1) p.push_back("top_k must be >= 1");
    if (!(active_threshold >= 0.0 && active_threshold <= 1.0)) p.push_back("active_threshold must lie in [0, 1]");
    if (l2_weight < 0.0) p.push_back("l2_weight must be >= 0");
    if (sparse_k < 1) p.push_back("sparse_k must be >= 1");
    if (!std::is_sorted(thresholds.begin(), thresholds.end())) p.push_back("thresholds must be ascending");
    if (jobs < 1) p.push_back("jobs must be >= 1");
    for (int l : layers) {
        if (l < 0) p.push_back(fmt::format("layer {} is negative", l));
    }
    return p;
}

json run_config_to_json(const RunConfig& c) {
    return {{"world", world_config_to_json(c.world)},
            {"runner", c.runner},
            {"n_questions", c.n_questions},
            {"dataset", c.dataset},
            {"transfer_dataset", c.transfer_dataset},
            {"dataset_path", c.dataset_path},
            {"transfer_path", c.transfer_path},
            {"sae_dir", c.sae_dir},
            {"seed", c.seed},
            {"layers", c.layers},
            {"alpha", c.alpha},
            {"lo_pct", c.lo_pct},
            {"hi_pct", c.hi_pct},
            {"criterion", criterion_name(c.criterion)},
            {"top_k", c.top_k},
            {"active_threshold", c.active_threshold},
            {"l2_weight", c.l2_weight},
            {"sparse_k", c.sparse_k},
            {"thresholds", c.thresholds},
            {"jobs", c.jobs}};
}

RunConfig run_config_from_json(const json& j) {
    if (!j.is_object()) throw Error("run config must be a JSON object");
    static const std::set<std::string> known = {"world",     "runner",   "n_questions", "dataset",  "transfer_dataset",
                                                "seed",      "layers", "dataset_path", "transfer_path", "sae_dir",   "alpha",       "lo_pct",   "hi_pct",
                                                "criterion", "top_k",    "active_threshold", "l2_weight", "sparse_k",
                                                "thresholds", "jobs"};
    std::vector<std::string> problems;
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) problems.push_back("unknown key '" + k + "'");
    }
    RunConfig c;
    auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const json::exception& e) {
            problems.push_back(fmt::format("{}: {}", key, e.what()));
        }
    };
    if (j.contains("world")) {
        try {
            c.world = world_config_from_json(j.at("world"));
        } catch (const Error& e) {
            problems.push_back(e.what());
        }
    }
    get("runner", c.runner);
    get("n_questions", c.n_questions);
    get("dataset", c.dataset);
    get("transfer_dataset", c.transfer_dataset);
    get("dataset_path", c.dataset_path);
    get("transfer_path", c.transfer_path);
    get("sae_dir", c.sae_dir);
    get("seed", c.seed);
    get("layers", c.layers);
    get("alpha", c.alpha);
    get("lo_pct", c.lo_pct);
    get("hi_pct", c.hi_pct);
    if (j.contains("criterion")) {
        try {
            c.criterion = parse_criterion(j.at("criterion").get<std::string>());
        } catch (const std::exception& e) {
            problems.push_back(e.what());
        }
    }
    get("top_k", c.top_k);
    get("active_threshold", c.active_threshold);
    get("l2_weight", c.l2_weight);
    get("sparse_k", c.sparse_k);
    get("thresholds", c.thresholds);
    get("jobs", c.jobs);
    if (problems.empty()) {
        for (auto& p : c.problems()) problems.push_back(std::move(p));
    }
    if (!problems.empty()) {
        std::string msg = "invalid run config:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw Error(msg);
    }
    return c;
}

std::string run_config_hash(const RunConfig& c) {
    // jobs changes scheduling only and the runner endpoint changes transport only.
    auto j = run_config_to_json(c);
    j.erase("jobs");
    j.erase("runner");
    return content_hash(j.dump());
}

FeatureRows latent_rows(std::span<const InferenceRecord> records, const SaeParams& sae) {
    FeatureRows rows;
    rows.reserve(records.size());
    for (const auto& r : records) {
        auto it = r.activations.find(sae.layer);
        if (it == r.activations.end()) {
            throw Error(fmt::format("record {} has no activation at layer {}", r.question_id, sae.layer));
        }
        rows.push_back(encode(sae, it->second));
    }
    return rows;
}

std::vector<bool> correctness(std::span<const InferenceRecord> records) {
    std::vector<bool> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.correct);
    return out;
}

namespace {

std::vector<int> category_features(const std::vector<FeatureStat>& stats, int layer, Category c) {
    std::vector<int> out;
    for (const auto& s : stats) {
        if (s.layer == layer && s.category == c) out.push_back(s.feature);
    }
    return out;
}

} // namespace

ProbeStudy run_probes(const RunConfig& cfg, const std::vector<FeatureStat>& stats,
                      std::span<const InferenceRecord> discovery, std::span<const InferenceRecord> validation,
                      const std::map<int, SaeParams>& saes) {
    ProbeStudy st;
    const auto y_train = correctness(discovery);
    const auto y_val = correctness(validation);
    std::vector<double> neg_entropy;
    for (const auto& rec : validation) neg_entropy.push_back(-rec.entropy);
    const auto n_pos = std::count(y_val.begin(), y_val.end(), true);
    const bool two_classes = n_pos > 0 && n_pos < static_cast<long>(y_val.size());
    st.entropy_auroc = two_classes ? auroc(neg_entropy, y_val) : 0.5;
    double best_train = -1.0;
    for (const auto& [l, sae] : saes) {
        ProbeLayerResult pl;
        pl.layer = l;
        pl.entropy_auroc = st.entropy_auroc;
        const auto x_train = latent_rows(discovery, sae);
        const auto x_val = latent_rows(validation, sae);
        for (Category c : kFeatureCategories) {
            const auto feats = category_features(stats, l, c);
            pl.n_features[c] = static_cast<int>(feats.size());
            if (feats.empty() || !two_classes) continue;
            try {
                auto model = fit_probe(x_train, y_train, l, feats, cfg.l2_weight, cfg.seed);
                pl.auroc[c] = auroc(probe_scores(model, x_val), y_val);
                if (c == Category::Confounded) {
                    const double train_auc = auroc(probe_scores(model, x_train), y_train);
                    if (train_auc > best_train) {
                        best_train = train_auc;
                        st.probe_layer = l;
                    }
                }
                st.models[{l, c}] = std::move(model);
            } catch (const Error&) {
                // zero-variance or single-class slice: no probe for this cell
            }
        }
        st.layers.push_back(std::move(pl));
    }
    if (st.probe_layer < 0) return st;

    const auto& sae = saes.at(st.probe_layer);
    const auto x_train = latent_rows(discovery, sae);
    const auto x_val = latent_rows(validation, sae);
    const auto& full = st.models.at({st.probe_layer, Category::Confounded});
    const int n_full = static_cast<int>(full.feature_ids.size());
    for (int k : kSparseSweep) {
        if (k > n_full) break;
        const auto sel = select_sparse(full, k, x_train, y_train);
        st.sparse_sweep[k] = auroc(probe_scores(sel.refit, x_val), y_val);
    }
    st.sparse = select_sparse(full, std::min(cfg.sparse_k, n_full), x_train, y_train);
    st.sparse_auroc = auroc(probe_scores(st.sparse.refit, x_val), y_val);
    return st;
}

std::vector<AbstentionRow> abstain(const ProbeModel& model, std::span<const InferenceRecord> records,
                                   const SaeParams& sae, const std::vector<double>& thresholds) {
    return abstention_sweep(predict_p_correct(model, latent_rows(records, sae)), correctness(records), thresholds);
}

ExperimentResult run_experiment(const RunConfig& cfg, Runner& runner, const std::map<int, SaeParams>& saes,
                                const std::vector<McqItem>& items, const std::vector<McqItem>& transfer_items) {
    if (auto p = cfg.problems(); !p.empty()) throw Error("invalid run config: " + p.front());
    ExperimentResult r;
    const auto caps = runner.hello();
    std::vector<int> layers = cfg.layers;
    if (layers.empty()) {
        for (const auto& [l, sae] : saes) layers.push_back(l);
    }
    std::map<int, SaeParams> used;
    for (int l : layers) {
        auto it = saes.find(l);
        if (it == saes.end()) throw Error(fmt::format("no SAE for layer {}", l));
        used[l] = it->second;
    }

    r.split = split_items(items, cfg.seed);
    assert_disjoint(r.split.discovery, r.split.validation);
    r.discovery_records = infer(runner, r.split.discovery.items, layers);
    r.validation_records = infer(runner, r.split.validation.items, layers);

    r.discovery = discover(r.discovery_records, used, cfg.alpha, cfg.lo_pct, cfg.hi_pct, cfg.jobs);
    r.discovery_median = discover_median(r.discovery_records, used, cfg.alpha, cfg.jobs);
    r.retention = split_sensitivity(r.discovery.stats, r.discovery_median.stats);
    r.depth = depth_gradient(r.discovery.stats, caps.n_layers);

    Evaluator ev(runner, cfg.jobs);
    r.candidates = rank_top_k(r.discovery.stats, cfg.top_k, Category::Confounded);
    r.screen = screen(ev, r.split.discovery, r.candidates, cfg.criterion);
    const std::string source = items.empty() ? std::string() : items.front().dataset;
    for (Criterion c : {Criterion::Joint, Criterion::AccOnly, Criterion::EntropyOnly}) {
        auto conf = rescreen(r.screen, c);
        conf.provenance = {{"source_dataset", source}, {"criterion", criterion_name(c)}, {"seed", cfg.seed}};
        r.configs[c] = conf;
    }
    r.validation_baseline = ev.baseline(r.split.validation.items);
    for (const auto& [c, conf] : r.configs) r.validation_eval[c] = ev.evaluate(r.split.validation.items, conf);

    r.control = random_control(ev, r.split.discovery, r.discovery_records, used, r.configs.at(Criterion::Joint),
                               cfg.active_threshold, cfg.seed + 1);
    r.control_eval = ev.evaluate(r.split.validation.items, r.control.survived);

    std::map<int, int> widths;
    for (const auto& [l, sae] : used) widths[l] = sae.m;
    r.transfer_result = transfer(ev, transfer_items, r.configs.at(cfg.criterion), widths);

    r.probe = run_probes(cfg, r.discovery.stats, r.discovery_records, r.validation_records, used);
    if (r.probe.probe_layer >= 0) {
        r.abstention = abstain(r.probe.sparse.refit, r.validation_records, used.at(r.probe.probe_layer), cfg.thresholds);
    }
    return r;
}

ExperimentResult run_synth_experiment(const RunConfig& cfg) {
    SynthRunner runner(build_world(cfg.world), cfg.jobs);
    runner.load_oracle_saes();
    std::map<int, SaeParams> saes;
    for (int l = 0; l < cfg.world.n_layers; ++l) saes[l] = runner.world().oracle_sae(l);
    const auto a = gen_questions(runner.world(), cfg.n_questions, cfg.seed, cfg.dataset);
    const auto b = gen_questions(runner.world(), cfg.n_questions, cfg.seed + 1000, cfg.transfer_dataset);
    return run_experiment(cfg, runner, saes, a.items, b.items);
}

} // namespace qdiss
