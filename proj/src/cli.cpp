#include "qdiss/cli.hpp"

#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "qdiss/report.hpp"

namespace qdiss {

namespace fs = std::filesystem;

namespace {

struct Options {
    std::string command;
    std::string config;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    std::string criterion;
    std::optional<double> lo_pct, hi_pct, alpha;
    std::string runner;
    bool force = false;
    std::optional<int> n_questions;
    std::string suppression; // evaluate
    std::string listen;      // serve
    bool stdio = false;
    int max_sessions = -1;
    std::string golden;      // conformance
    bool write = false;
};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

/// Data rows of a stamped CSV, header first; comment lines are skipped.
std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        rows.push_back(split_csv_line(line));
    }
    return rows;
}

double to_double(const std::string& s) {
    try {
        return std::stod(s);
    } catch (const std::exception&) {
        throw Error("not a number: '" + s + "'");
    }
}

std::string ids_hash(const std::vector<McqItem>& items) {
    std::string s;
    for (const auto& it : items) s += it.id + '\n';
    return content_hash(s);
}

std::string ids_hash(std::span<const InferenceRecord> recs) {
    std::string s;
    for (const auto& r : recs) s += r.question_id + '\n';
    return content_hash(s);
}

json load_world_json(const std::string& path) {
    if (!fs::exists(path)) throw Error("world config not found: " + path);
    json j = json::parse(read_text_file(path));
    // world.json written by synth wraps the config next to its hash.
    if (j.is_object() && j.contains("world")) return j.at("world");
    return j;
}

class Session {
public:
    Session(const Options& opt, std::ostream& out) : opt_(opt), out_(out), dir_(opt.out) { resolve(); }

    const RunConfig& cfg() const { return cfg_; }
    const std::string& hash() const { return hash_; }
    std::ostream& log() { return out_; }
    fs::path path(const std::string& rel) const { return dir_ / rel; }

    fs::path dataset_path() const {
        return cfg_.dataset_path.empty() ? path("data/" + cfg_.dataset + ".jsonl") : fs::path(cfg_.dataset_path);
    }
    fs::path transfer_path() const {
        return cfg_.transfer_path.empty() ? path("data/" + cfg_.transfer_dataset + ".jsonl") : fs::path(cfg_.transfer_path);
    }
    fs::path sae_path(int layer) const {
        const fs::path d = cfg_.sae_dir.empty() ? path("saes") : fs::path(cfg_.sae_dir);
        return d / fmt::format("layer_{}.qdt", layer);
    }

    /// Fails listing every missing input at once.
    void require(const std::vector<fs::path>& inputs) const {
        std::vector<std::string> missing;
        for (const auto& p : inputs) {
            if (!fs::exists(p)) missing.push_back(p.string());
        }
        if (missing.empty()) return;
        std::string msg = "missing inputs:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw Error(msg);
    }

    /// Refuses inputs produced under another config unless --force.
    void check_hash(const std::string& what, const std::string& found) const {
        if (found == hash_ || opt_.force) return;
        throw Error(fmt::format("{} was produced by config {} but the current config is {}; rerun it or pass --force",
                                what, found.empty() ? "<none>" : found, hash_));
    }

    json read_json_artifact(const char* rel) const {
        require({path(rel)});
        json j = json::parse(read_text_file(path(rel)));
        check_hash(rel, j.value("config_hash", ""));
        return j;
    }

    std::string read_csv_artifact(const char* rel) const {
        require({path(rel)});
        auto text = read_text_file(path(rel));
        check_hash(rel, csv_hash(text));
        return text;
    }

    void write_text(const std::string& rel, const std::string& text) {
        const fs::path p = path(rel);
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        write_text_file(p, text);
        produced_.push_back(rel);
    }
    void write_json(const std::string& rel, json j) {
        j["config_hash"] = hash_;
        write_text(rel, j.dump(2) + "\n");
    }
    void write_csv(const std::string& rel, const std::string& csv) { write_text(rel, stamp_csv(hash_, csv)); }
    void write_svg(const std::string& rel, const std::string& svg) {
        write_text(rel, "<!-- config_hash=" + hash_ + " -->\n" + svg);
    }
    void note_written(const fs::path& p) { produced_.push_back(fs::relative(p, dir_).generic_string()); }

    /// Records the run config and this command's outputs in the manifest.
    void finish(const std::string& command) {
        fs::create_directories(dir_);
        write_text_file(path(artifact::kRunConfig), run_config_to_json(cfg_).dump(2) + "\n");
        json m = json::object();
        if (fs::exists(path(artifact::kManifest))) {
            try {
                m = json::parse(read_text_file(path(artifact::kManifest)));
            } catch (const json::exception&) {
                m = json::object();
            }
        }
        m["config_hash"] = hash_;
        m["seeds"] = {{"data", cfg_.seed}, {"world", cfg_.world.seed}, {"control", cfg_.seed + 1},
                      {"transfer_data", cfg_.seed + 1000}};
        m["commands"][command] = hash_;
        for (const auto& rel : produced_) {
            const fs::path p = path(rel);
            const auto bytes = read_text_file(p);
            m["artifacts"][rel] = {{"producer", command}, {"config_hash", hash_}, {"sha256_16", content_hash(bytes)}};
        }
        write_text_file(path(artifact::kManifest), m.dump(2) + "\n");
    }

    std::unique_ptr<Runner> make_runner() const {
        const auto& r = cfg_.runner;
        if (r == "synth") return std::make_unique<SynthRunner>(build_world(cfg_.world), cfg_.jobs);
        if (r.rfind("tcp:", 0) == 0) return std::make_unique<RemoteRunner>(connect_tcp(r.substr(4)));
        if (r.rfind("stdio:", 0) == 0) return std::make_unique<RemoteRunner>(spawn_stdio(r.substr(6)));
        throw Error("unknown runner '" + r + "'");
    }

    std::vector<int> layers(const RunnerCapabilities& caps) const {
        std::vector<int> out = cfg_.layers;
        if (out.empty()) {
            for (int l = 0; l < caps.n_layers; ++l) out.push_back(l);
        }
        for (int l : out) {
            if (l >= caps.n_layers) throw Error(fmt::format("layer {} is beyond the runner's {} layers", l, caps.n_layers));
        }
        return out;
    }

    std::map<int, SaeParams> load_saes(const std::vector<int>& layers, int d_model = -1) const {
        std::vector<fs::path> files;
        for (int l : layers) files.push_back(sae_path(l));
        require(files);
        std::map<int, SaeParams> saes;
        for (int l : layers) {
            const auto c = read_container(sae_path(l));
            if (c.meta.contains("config_hash")) check_hash(sae_path(l).string(), c.meta.at("config_hash"));
            auto sae = sae_from_container(c);
            sae.layer = l;
            if (d_model >= 0 && sae.d != d_model) {
                throw Error(fmt::format("SAE at layer {} has d = {} but the runner has d_model = {}", l, sae.d, d_model));
            }
            saes[l] = std::move(sae);
        }
        return saes;
    }

    std::vector<McqItem> load_items(const fs::path& p) const {
        require({p});
        return load_mcq_jsonl(p);
    }

    HalfSplit split() const {
        auto s = split_items(load_items(dataset_path()), cfg_.seed);
        assert_disjoint(s.discovery, s.validation);
        return s;
    }

    struct Records {
        std::vector<InferenceRecord> discovery, validation;
        std::vector<int> layers;
        int n_layers = 0;
    };

    Records load_records() const {
        require({path(artifact::kRecords)});
        json meta;
        auto all = qdiss::load_records(path(artifact::kRecords), &meta);
        check_hash(artifact::kRecords, meta.value("config_hash", ""));
        Records r;
        const auto n_d = meta.at("n_discovery").get<std::size_t>();
        if (n_d > all.size()) throw Error("records.qdt: n_discovery exceeds the record count");
        r.discovery.assign(std::make_move_iterator(all.begin()), std::make_move_iterator(all.begin() + n_d));
        r.validation.assign(std::make_move_iterator(all.begin() + n_d), std::make_move_iterator(all.end()));
        r.layers = meta.at("layers").get<std::vector<int>>();
        r.n_layers = meta.at("n_layers").get<int>();
        return r;
    }

    /// The split recomputed from the dataset must match the one records.qdt was made from.
    void check_split(const HalfSplit& s, const Records& r) const {
        if (ids_hash(s.discovery.items) != ids_hash(r.discovery) || ids_hash(s.validation.items) != ids_hash(r.validation)) {
            throw Error("the dataset split no longer matches records.qdt; rerun infer");
        }
    }

    SuppressionConfig load_suppression(const fs::path& p) const {
        require({p});
        const json j = json::parse(read_text_file(p));
        if (j.contains("config_hash")) check_hash(p.string(), j.at("config_hash"));
        return suppression_config_from_json(j);
    }

private:
    void resolve() {
        json j = json::object();
        const fs::path run = path(artifact::kRunConfig);
        if (!opt_.config.empty()) {
            if (!fs::exists(opt_.config)) throw Error("config file not found: " + opt_.config);
            j = json::parse(read_text_file(opt_.config));
        } else if (fs::exists(run)) {
            j = json::parse(read_text_file(run));
        }
        if (!j.is_object()) throw Error("run config must be a JSON object");
        if (opt_.seed) j["seed"] = *opt_.seed;
        if (opt_.jobs) j["jobs"] = *opt_.jobs;
        if (!opt_.criterion.empty()) j["criterion"] = opt_.criterion;
        if (opt_.lo_pct) j["lo_pct"] = *opt_.lo_pct;
        if (opt_.hi_pct) j["hi_pct"] = *opt_.hi_pct;
        if (opt_.alpha) j["alpha"] = *opt_.alpha;
        if (opt_.n_questions) j["n_questions"] = *opt_.n_questions;
        if (!opt_.runner.empty()) {
            if (opt_.runner.rfind("synth:", 0) == 0) {
                j["world"] = load_world_json(opt_.runner.substr(6));
                j["runner"] = "synth";
            } else {
                j["runner"] = opt_.runner;
            }
        }
        cfg_ = run_config_from_json(j);
        hash_ = run_config_hash(cfg_);
    }

    const Options& opt_;
    std::ostream& out_;
    fs::path dir_;
    RunConfig cfg_;
    std::string hash_;
    std::vector<std::string> produced_;
};

json delta_json(const EvalSummary& base, const EvalSummary& s, int n_features) {
    return {{"n_features", n_features},
            {"summary", eval_summary_to_json(s)},
            {"acc_delta", 100.0 * (s.accuracy - base.accuracy)},
            {"entropy_delta", s.mean_entropy - base.mean_entropy}};
}

void push_saes(Runner& runner, const std::map<int, SaeParams>& saes) {
    for (const auto& [l, sae] : saes) runner.load_sae(sae);
}

// ---- subcommands ---------------------------------------------------------------

void cmd_synth(Session& s) {
    const auto& cfg = s.cfg();
    if (cfg.runner != "synth") throw Error("synth needs the synth runner, not '" + cfg.runner + "'");
    const World world = build_world(cfg.world);
    s.write_json(artifact::kWorld, {{"world", world_config_to_json(cfg.world)}});
    const std::pair<std::string, fs::path> sets[] = {{cfg.dataset, s.dataset_path()}, {cfg.transfer_dataset, s.transfer_path()}};
    std::uint64_t seed = cfg.seed;
    for (const auto& [name, p] : sets) {
        auto set = gen_questions(world, cfg.n_questions, seed, name);
        seed += 1000;
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        write_mcq_jsonl(p, set.items);
        s.note_written(p);
        set.oracle["config_hash"] = s.hash();
        fs::path oracle = p;
        oracle.replace_extension(".oracle.qdt");
        write_oracle(oracle, set);
        s.note_written(oracle);
        s.log() << fmt::format("{}: {} questions -> {}\n", name, set.items.size(), p.string());
    }
    for (int l = 0; l < cfg.world.n_layers; ++l) {
        const auto sae = world.oracle_sae(l);
        json meta = sae_meta(sae);
        meta["config_hash"] = s.hash();
        const auto p = s.sae_path(l);
        fs::create_directories(p.parent_path());
        const auto blobs = sae_blobs(sae);
        write_container(p, meta, blobs);
        s.note_written(p);
    }
    s.log() << fmt::format("world: {} layers, d = {}, {} features per layer\n", cfg.world.n_layers, cfg.world.d_model,
                           world.m);
}

void cmd_infer(Session& s) {
    const auto split = s.split();
    auto runner = s.make_runner();
    const auto caps = runner->hello();
    const auto layers = s.layers(caps);
    auto recs = infer(*runner, split.discovery.items, layers);
    auto val = infer(*runner, split.validation.items, layers);
    const json meta = {{"config_hash", s.hash()},
                       {"n_discovery", recs.size()},
                       {"n_validation", val.size()},
                       {"layers", layers},
                       {"n_layers", caps.n_layers},
                       {"dataset", s.cfg().dataset},
                       {"discovery_ids", ids_hash(split.discovery.items)},
                       {"validation_ids", ids_hash(split.validation.items)}};
    recs.insert(recs.end(), std::make_move_iterator(val.begin()), std::make_move_iterator(val.end()));
    save_records(s.path(artifact::kRecords), recs, meta);
    s.note_written(s.path(artifact::kRecords));
    s.log() << fmt::format("records: {} discovery, {} validation, layers {}\n", meta["n_discovery"].get<int>(),
                           meta["n_validation"].get<int>(), fmt::join(layers, " "));
}

void cmd_discover(Session& s) {
    const auto& cfg = s.cfg();
    const auto recs = s.load_records();
    const auto saes = s.load_saes(recs.layers);
    const auto disc = discover(recs.discovery, saes, cfg.alpha, cfg.lo_pct, cfg.hi_pct, cfg.jobs);
    const auto med = discover_median(recs.discovery, saes, cfg.alpha, cfg.jobs);
    s.write_csv(artifact::kStats, stats_csv(disc.stats));
    s.write_csv(artifact::kCounts, counts_csv(disc));
    s.write_csv(artifact::kQuadrants, assignments_csv(recs.discovery, disc.split));
    s.write_csv(artifact::kRetention, retention_csv(split_sensitivity(disc.stats, med.stats)));
    s.write_csv(artifact::kDepth, depth_csv(depth_gradient(disc.stats, recs.n_layers)));
    std::map<Category, int> totals;
    for (const auto& st : disc.stats) totals[st.category]++;
    s.log() << fmt::format("groups A={} B={} C={} D={}; uncertainty {}, incorrectness {}, confounded {}\n",
                           disc.split.counts[0], disc.split.counts[1], disc.split.counts[2], disc.split.counts[3],
                           totals[Category::PureUncertainty], totals[Category::PureIncorrectness],
                           totals[Category::Confounded]);
    for (int l : disc.degenerate_layers) s.log() << fmt::format("warning: layer {} has an empty quadrant group\n", l);
}

void cmd_screen(Session& s) {
    const auto& cfg = s.cfg();
    const auto stats = parse_stats_csv(s.read_csv_artifact(artifact::kStats));
    const auto split = s.split();
    auto runner = s.make_runner();
    const auto caps = runner->hello();
    const auto saes = s.load_saes(s.layers(caps), caps.d_model);
    push_saes(*runner, saes);
    Evaluator ev(*runner, cfg.jobs);
    const auto candidates = rank_top_k(stats, cfg.top_k, Category::Confounded);
    const auto res = screen(ev, split.discovery, candidates, cfg.criterion);
    s.write_csv(artifact::kScreen, screen_csv(res));
    for (Criterion c : {Criterion::Joint, Criterion::AccOnly, Criterion::EntropyOnly}) {
        auto conf = rescreen(res, c);
        conf.provenance = {{"source_dataset", cfg.dataset}, {"criterion", criterion_name(c)}, {"seed", cfg.seed}};
        const auto j = suppression_config_to_json(conf);
        s.write_json(criterion_config_name(c), j);
        if (c == cfg.criterion) s.write_json(artifact::kConfig, j);
        s.log() << fmt::format("{}: {} of {} candidates pass\n", criterion_name(c), conf.total(), res.rows.size());
    }
}

void cmd_evaluate(Session& s, const Options& opt) {
    const auto& cfg = s.cfg();
    const fs::path conf_path = opt.suppression.empty() ? s.path(artifact::kConfig) : fs::path(opt.suppression);
    const auto conf = s.load_suppression(conf_path);
    const auto split = s.split();
    auto runner = s.make_runner();
    const auto caps = runner->hello();
    const auto saes = s.load_saes(s.layers(caps), caps.d_model);
    push_saes(*runner, saes);
    Evaluator ev(*runner, cfg.jobs);
    const auto base = ev.baseline(split.validation.items);
    const auto sup = ev.evaluate(split.validation.items, conf);
    json j = {{"split", "validation"},
              {"suppression", conf_path.filename().string()},
              {"n_features", conf.total()},
              {"baseline", eval_summary_to_json(base)},
              {"suppressed", eval_summary_to_json(sup)},
              {"acc_delta", 100.0 * (sup.accuracy - base.accuracy)},
              {"entropy_delta", sup.mean_entropy - base.mean_entropy},
              {"ablation", json::object()}};
    for (Criterion c : {Criterion::Joint, Criterion::AccOnly, Criterion::EntropyOnly}) {
        const auto p = s.path(criterion_config_name(c));
        if (!fs::exists(p)) continue;
        const auto cc = s.load_suppression(p);
        j["ablation"][std::string(criterion_name(c))] = delta_json(base, ev.evaluate(split.validation.items, cc), cc.total());
    }
    s.write_json(artifact::kEval, j);
    s.log() << fmt::format("baseline acc {:.2f}% ent {:.4f}; suppressed ({} features) acc {:.2f}% ent {:.4f}\n",
                           100 * base.accuracy, base.mean_entropy, conf.total(), 100 * sup.accuracy, sup.mean_entropy);
}

void cmd_control(Session& s) {
    const auto& cfg = s.cfg();
    const auto conf = s.load_suppression(s.path(artifact::kConfig));
    const auto recs = s.load_records();
    const auto split = s.split();
    s.check_split(split, recs);
    auto runner = s.make_runner();
    const auto caps = runner->hello();
    const auto saes = s.load_saes(recs.layers, caps.d_model);
    push_saes(*runner, saes);
    Evaluator ev(*runner, cfg.jobs);
    const auto ctrl = random_control(ev, split.discovery, recs.discovery, saes, conf, cfg.active_threshold, cfg.seed + 1);
    const auto base = ev.baseline(split.validation.items);
    const auto ce = ev.evaluate(split.validation.items, ctrl.survived);
    s.write_json(artifact::kControl, {{"seed", cfg.seed + 1},
                                      {"matched", suppression_config_to_json(conf)},
                                      {"sampled", suppression_config_to_json(ctrl.sampled)},
                                      {"survived", suppression_config_to_json(ctrl.survived)},
                                      {"skipped_layers", ctrl.skipped_layers},
                                      {"baseline", eval_summary_to_json(base)},
                                      {"control", eval_summary_to_json(ce)},
                                      {"acc_delta", 100.0 * (ce.accuracy - base.accuracy)},
                                      {"entropy_delta", ce.mean_entropy - base.mean_entropy}});
    s.log() << fmt::format("control: {} sampled, {} survive; acc delta {:+.2f} pts\n", ctrl.sampled.total(),
                           ctrl.survived.total(), 100.0 * (ce.accuracy - base.accuracy));
}

void cmd_transfer(Session& s) {
    const auto& cfg = s.cfg();
    const auto conf = s.load_suppression(s.path(artifact::kConfig));
    const auto items = s.load_items(s.transfer_path());
    auto runner = s.make_runner();
    const auto caps = runner->hello();
    const auto saes = s.load_saes(s.layers(caps), caps.d_model);
    push_saes(*runner, saes);
    std::map<int, int> widths;
    for (const auto& [l, sae] : saes) widths[l] = sae.m;
    Evaluator ev(*runner, cfg.jobs);
    const auto tr = transfer(ev, items, conf, widths);
    s.write_json(artifact::kTransfer, {{"source", cfg.dataset},
                                       {"target", cfg.transfer_dataset},
                                       {"n_features", conf.total()},
                                       {"baseline", eval_summary_to_json(tr.baseline)},
                                       {"suppressed", eval_summary_to_json(tr.suppressed)},
                                       {"acc_delta", tr.acc_delta},
                                       {"entropy_delta", tr.entropy_delta}});
    s.log() << fmt::format("{} -> {}: acc delta {:+.2f} pts, entropy delta {:+.4f}\n", cfg.dataset, cfg.transfer_dataset,
                           tr.acc_delta, tr.entropy_delta);
}

void cmd_probe(Session& s) {
    const auto stats = parse_stats_csv(s.read_csv_artifact(artifact::kStats));
    const auto recs = s.load_records();
    const auto saes = s.load_saes(recs.layers);
    const auto st = run_probes(s.cfg(), stats, recs.discovery, recs.validation, saes);
    json layers = json::array();
    std::string csv = "layer,category,n_features,auroc,entropy_auroc\n";
    for (const auto& pl : st.layers) {
        json probes = json::object();
        for (Category c : kFeatureCategories) {
            const auto it = pl.auroc.find(c);
            const auto n = pl.n_features.count(c) ? pl.n_features.at(c) : 0;
            json cell = {{"n_features", n}};
            if (it != pl.auroc.end()) {
                cell["auroc"] = it->second;
                cell["model"] = probe_to_json(st.models.at({pl.layer, c}));
            }
            probes[std::string(category_name(c))] = cell;
            csv += fmt::format("{},{},{},{},{}\n", pl.layer, category_name(c), n,
                               it == pl.auroc.end() ? std::string() : fmt::format("{}", it->second), st.entropy_auroc);
        }
        layers.push_back({{"layer", pl.layer}, {"probes", probes}});
    }
    json sparse = nullptr;
    std::string sweep = "k,auroc\n";
    if (st.probe_layer >= 0) {
        sparse = {{"layer", st.probe_layer},
                  {"feature_ids", st.sparse.feature_ids},
                  {"auroc", st.sparse_auroc},
                  {"model", probe_to_json(st.sparse.refit)}};
        for (const auto& [k, a] : st.sparse_sweep) sweep += fmt::format("{},{}\n", k, a);
    }
    s.write_json(artifact::kProbe, {{"entropy_auroc", st.entropy_auroc},
                                    {"probe_layer", st.probe_layer},
                                    {"layers", layers},
                                    {"sparse", sparse}});
    s.write_csv(artifact::kAuroc, csv);
    s.write_csv(artifact::kSparse, sweep);
    if (st.probe_layer >= 0) {
        s.log() << fmt::format("probe layer {}: sparse features {} auroc {:.3f} (entropy baseline {:.3f})\n",
                               st.probe_layer, fmt::join(st.sparse.feature_ids, " "), st.sparse_auroc,
                               st.entropy_auroc);
    } else {
        s.log() << "no confounded probe could be fit; abstain will have nothing to use\n";
    }
}

void cmd_abstain(Session& s) {
    const auto probe = s.read_json_artifact(artifact::kProbe);
    if (probe.at("sparse").is_null()) throw Error("probe.json holds no sparse probe");
    const auto model = probe_from_json(probe.at("sparse").at("model"));
    const auto recs = s.load_records();
    const auto saes = s.load_saes({model.layer});
    const auto rows = abstain(model, recs.validation, saes.at(model.layer), s.cfg().thresholds);
    s.write_csv(artifact::kAbstain, abstention_csv(rows));
    for (const auto& r : rows) {
        s.log() << fmt::format("t={:.2f} coverage {:.1f}% accuracy {:.2f}% gain {:+.2f}\n", r.threshold, 100 * r.coverage,
                               100 * r.accuracy_on_answered, r.gain_vs_baseline);
    }
}

void cmd_report(Session& s, const Options& opt) {
    const char* inputs[] = {artifact::kCounts,   artifact::kEval,  artifact::kControl, artifact::kTransfer,
                            artifact::kAbstain,  artifact::kDepth, artifact::kAuroc};
    std::vector<fs::path> paths;
    for (const char* rel : inputs) paths.push_back(s.path(rel));
    s.require(paths);

    std::map<std::string, std::string> hashes;
    std::map<std::string, std::string> text;
    for (const char* rel : inputs) {
        text[rel] = read_text_file(s.path(rel));
        const std::string_view name(rel);
        hashes[rel] = name.ends_with(".json") ? json::parse(text[rel]).value("config_hash", "") : csv_hash(text[rel]);
    }
    std::set<std::string> distinct;
    for (const auto& [rel, h] : hashes) distinct.insert(h);
    if (distinct.size() > 1 && !opt.force) {
        std::string msg = "inputs come from different configs (pass --force to mix):";
        for (const auto& [rel, h] : hashes) msg += fmt::format("\n  {} {}", h.empty() ? "<none>" : h, rel);
        throw Error(msg);
    }

    // Feature counts per category over all layers.
    const auto counts = csv_rows(text[artifact::kCounts]);
    std::string t1 = "category,n_features\n";
    for (const auto& row : counts) {
        if (row.size() == 4 && row[0] == "total") {
            t1 += fmt::format("pure_uncertainty,{}\npure_incorrectness,{}\nconfounded,{}\n", row[1], row[2], row[3]);
        }
    }
    s.write_csv(artifact::kTable1, t1);

    // Baseline vs random control vs confounded suppression.
    const auto ev = json::parse(text[artifact::kEval]);
    const auto ctl = json::parse(text[artifact::kControl]);
    const auto row2 = [](const char* method, int n, const json& summary) {
        return fmt::format("{},{},{:.4f},{:.4f}\n", method, n, 100.0 * summary.at("accuracy").get<double>(),
                           summary.at("mean_entropy").get<double>());
    };
    std::string t2 = "method,n_features,accuracy_pct,mean_entropy\n";
    t2 += row2("baseline", 0, ev.at("baseline"));
    t2 += row2("random", suppression_config_from_json(ctl.at("survived")).total(), ctl.at("control"));
    t2 += row2("confounded", ev.at("n_features").get<int>(), ev.at("suppressed"));
    s.write_csv(artifact::kTable2, t2);

    // Screening criterion ablation.
    std::string t3 = "criterion,n_features,acc_delta_pts,entropy_delta\n";
    for (Criterion c : {Criterion::Joint, Criterion::AccOnly, Criterion::EntropyOnly}) {
        const std::string name(criterion_name(c));
        if (!ev.at("ablation").contains(name)) continue;
        const auto& a = ev.at("ablation").at(name);
        t3 += fmt::format("{},{},{:+.4f},{:+.4f}\n", name, a.at("n_features").get<int>(), a.at("acc_delta").get<double>(),
                          a.at("entropy_delta").get<double>());
    }
    s.write_csv(artifact::kTable3, t3);

    // Abstention sweep, as produced.
    std::string t4;
    for (const auto& row : csv_rows(text[artifact::kAbstain])) {
        std::string line;
        for (std::size_t i = 0; i < row.size(); ++i) line += (i ? "," : "") + row[i];
        t4 += line + "\n";
    }
    s.write_csv(artifact::kTable4, t4);

    // Transfer without re-selection.
    const auto tr = json::parse(text[artifact::kTransfer]);
    std::string t5 = "direction,n_features,acc_delta_pts,entropy_delta\n";
    t5 += fmt::format("{} -> {},{},{:+.4f},{:+.4f}\n", tr.at("source").get<std::string>(), tr.at("target").get<std::string>(),
                      tr.at("n_features").get<int>(), tr.at("acc_delta").get<double>(), tr.at("entropy_delta").get<double>());
    s.write_csv(artifact::kTable5, t5);

    // Max effect against normalized depth.
    std::vector<DepthPoint> depth;
    const auto drows = csv_rows(text[artifact::kDepth]);
    for (std::size_t i = 1; i < drows.size(); ++i) {
        const auto& r = drows[i];
        if (r.size() != 4) throw Error("depth.csv: malformed row");
        depth.push_back({parse_category(r[0]), std::stoi(r[1]), to_double(r[2]), to_double(r[3])});
    }
    s.write_svg(artifact::kFigure3, render_svg(depth_plot(depth)));

    // Per-layer probe AUROC with the entropy baseline.
    std::vector<AurocPoint> pts;
    double entropy_auroc = 0.5;
    const auto arows = csv_rows(text[artifact::kAuroc]);
    for (std::size_t i = 1; i < arows.size(); ++i) {
        const auto& r = arows[i];
        if (r.size() != 5) throw Error("auroc.csv: malformed row");
        entropy_auroc = to_double(r[4]);
        if (r[3].empty()) continue;
        pts.push_back({std::stoi(r[0]), parse_category(r[1]), to_double(r[3])});
    }
    s.write_svg(artifact::kFigure4, render_svg(auroc_plot(pts, entropy_auroc)));
    s.log() << fmt::format("report: 5 tables and 2 figures under {}\n", s.path("").string());
}

void cmd_serve(Session& s, const Options& opt) {
    if (s.cfg().runner != "synth") throw Error("serve only serves the synth runner");
    const World world = build_world(s.cfg().world);
    const int jobs = s.cfg().jobs;
    if (opt.stdio) {
        SynthRunner runner(world, jobs);
        serve_stream(runner, std::cin, std::cout);
        return;
    }
    if (opt.listen.empty()) throw Error("serve needs --listen host:port or --stdio");
    const auto colon = opt.listen.rfind(':');
    if (colon == std::string::npos) throw Error("--listen expects host:port");
    const std::string host = opt.listen.substr(0, colon);
    int port = 0;
    try {
        port = std::stoi(opt.listen.substr(colon + 1));
    } catch (const std::exception&) {
        throw Error("--listen expects a numeric port");
    }
    // Each session starts with no SAEs loaded, like a fresh stdio process.
    const RunnerFactory fresh = [&] { return std::make_unique<SynthRunner>(world, jobs); };
    serve_tcp(fresh, host, port, opt.max_sessions, [&](int bound) { s.log() << "listening on " << host << ":" << bound << std::endl; });
}

int cmd_conformance(Session& s, const Options& opt) {
    if (opt.golden.empty()) throw Error("conformance needs --golden <dir>");
    const fs::path dir = opt.golden;
    const auto sessions = conformance_requests();
    if (opt.write) {
        fs::create_directories(dir);
        write_text_file(dir / "stub_world.json", world_config_to_json(conformance_world()).dump(2) + "\n");
        for (const auto& [name, requests] : sessions) {
            SynthRunner runner(build_world(conformance_world()));
            std::vector<std::string> responses;
            for (const auto& line : requests) {
                bool terminate = false;
                responses.push_back(handle_frame(runner, line, terminate));
                if (terminate) break;
            }
            write_text_file(dir / name, render_transcript(requests, responses));
            s.log() << "wrote " << (dir / name).string() << "\n";
        }
        return kExitOk;
    }
    std::vector<fs::path> files;
    for (const auto& [name, requests] : sessions) files.push_back(dir / name);
    s.require(files);
    int failures = 0;
    for (const auto& [name, requests] : sessions) {
        const auto lines = parse_transcript(read_text_file(dir / name));
        std::unique_ptr<SynthRunner> local;
        std::unique_ptr<Transport> link;
        const auto& r = s.cfg().runner;
        if (r == "synth") {
            local = std::make_unique<SynthRunner>(build_world(conformance_world()));
        } else if (r.rfind("tcp:", 0) == 0) {
            link = connect_tcp(r.substr(4));
        } else {
            link = spawn_stdio(r.substr(6));
        }
        // A request with no recorded response must find the session closed.
        std::string failure;
        int frame = 0;
        bool closed = false;
        for (std::size_t i = 0; i < lines.size() && failure.empty(); ++i) {
            if (!lines[i].request) {
                failure = fmt::format("line {}: response without a request", i + 1);
                break;
            }
            ++frame;
            const bool expect_reply = i + 1 < lines.size() && !lines[i + 1].request;
            std::optional<std::string> got;
            if (local) {
                if (!closed) {
                    bool terminate = false;
                    got = handle_frame(*local, lines[i].frame, terminate);
                    closed = terminate;
                }
            } else {
                try {
                    link->write_line(lines[i].frame);
                    got = link->read_line();
                } catch (const RunnerError&) {
                    got.reset();
                }
            }
            if (!expect_reply) {
                if (got) failure = fmt::format("frame {}: expected the session to be closed, got {}", frame, *got);
                continue;
            }
            ++i;
            if (!got) {
                failure = fmt::format("frame {}: session closed, expected {}", frame, lines[i].frame);
            } else if (*got != lines[i].frame) {
                failure = fmt::format("frame {}: expected {} got {}", frame, lines[i].frame, *got);
            }
        }
        if (failure.empty()) {
            s.log() << fmt::format("PASS {} ({} frames)\n", name, frame);
        } else {
            ++failures;
            s.log() << fmt::format("FAIL {} {}\n", name, failure);
        }
    }
    return failures ? kExitRunner : kExitOk;
}

} // namespace

std::string criterion_config_name(Criterion c) { return fmt::format("config_{}.json", criterion_name(c)); }

WorldConfig conformance_world() {
    // Every field is pinned so the transcripts do not move with the defaults.
    static const char* kStub = R"({"beta":0.1,"c_err_weight":0.8,"c_hard_weight":1.0,"c_noise":0.5,"c_threshold":0.4,"d_model":16,"depth":0.5,"dict_size":0,"err_hi":6.0,"err_lo":3.0,"evidence_noise":0.2,"gamma":0.3,"gold_hi":6.0,"gold_lo":3.0,"i_noise":0.25,"i_threshold":0.0,"i_weight":1.0,"kappa":2.0,"n_b":1,"n_c":1,"n_i":1,"n_layers":2,"n_s":0,"n_u":1,"noise":0.02,"p_err":0.3,"rho":0.35,"s_amb_weight":0.8,"s_err_weight":0.8,"s_noise":0.5,"s_threshold":0.4,"seed":3,"u_max":1.5,"u_noise":0.5,"u_threshold":0.2,"u_weight":1.0})";
    return world_config_from_json(json::parse(kStub));
}

std::vector<std::pair<std::string, std::vector<std::string>>> conformance_requests() {
    const World world = build_world(conformance_world());
    const auto items = gen_questions(world, 3, 5, "stub").items;
    const auto c0 = world.features_with_role(0, Role::C), c1 = world.features_with_role(1, Role::C);
    const auto i0 = world.features_with_role(0, Role::I);

    ForwardRequest plain;
    plain.items = items;
    plain.capture_layers = {0, 1};
    json empty_suppress = forward_request(5, plain);
    empty_suppress["id"] = 6;
    empty_suppress["suppress"] = json::object();
    ForwardRequest supp = plain;
    supp.suppress = {{0, c0}, {1, c1}};
    ForwardRequest inert = plain;
    inert.capture_layers = {};
    inert.suppress = {{0, i0}};
    ForwardRequest unknown_layer = plain;
    unknown_layer.suppress = {{7, {0}}};
    ForwardRequest out_of_range = plain;
    out_of_range.suppress = {{0, {world.m}}};

    // Valid on its own but narrower than the runner's d_model.
    SaeParams narrow = world.oracle_sae(0);
    narrow.d = 8;
    narrow.w_enc.resize(static_cast<std::size_t>(narrow.m) * 8);
    narrow.w_dec.resize(static_cast<std::size_t>(narrow.m) * 8);
    narrow.b_pre.resize(8);
    const json narrow_frame = load_sae_request(11, narrow);
    json bad_item = forward_request(14, plain);
    bad_item["items"][0]["gold"] = 9;

    std::vector<std::string> session = {
        dump_frame(hello_request(1)),
        dump_frame(hello_request(2)),
        dump_frame(load_sae_request(3, world.oracle_sae(0))),
        dump_frame(load_sae_request(4, world.oracle_sae(1))),
        dump_frame(forward_request(5, plain)),
        dump_frame(empty_suppress),
        dump_frame(forward_request(7, supp)),
        dump_frame(forward_request(8, inert)),
        dump_frame(forward_request(9, unknown_layer)),
        dump_frame(forward_request(10, out_of_range)),
        dump_frame(narrow_frame),
        dump_frame({{"v", 1}, {"op", "train"}, {"id", 12}}),
        "{not json",
        dump_frame(bad_item),
        dump_frame(hello_request(15)),
    };
    ForwardRequest needs_sae = plain;
    needs_sae.suppress = {{1, c1}};
    std::vector<std::string> no_sae = {dump_frame(hello_request(1)), dump_frame(forward_request(2, needs_sae))};
    std::vector<std::string> version = {dump_frame(hello_request(1, 2)), dump_frame(hello_request(2))};
    return {{"session.ndjson", session}, {"no_sae.ndjson", no_sae}, {"version.ndjson", version}};
}

std::string render_transcript(const std::vector<std::string>& requests, const std::vector<std::string>& responses) {
    std::string out;
    for (std::size_t i = 0; i < requests.size(); ++i) {
        out += "> " + requests[i] + "\n";
        if (i < responses.size()) out += "< " + responses[i] + "\n";
    }
    return out;
}

std::vector<TranscriptLine> parse_transcript(std::string_view text) {
    std::vector<TranscriptLine> out;
    std::size_t pos = 0;
    int n = 0;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        const auto line = text.substr(pos, end - pos);
        pos = end + 1;
        ++n;
        if (line.empty()) continue;
        if (line.size() < 2 || (line.substr(0, 2) != "> " && line.substr(0, 2) != "< ")) {
            throw Error(fmt::format("transcript line {}: expected '> ' or '< ' prefix", n));
        }
        out.push_back({line[0] == '>', std::string(line.substr(2))});
    }
    return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Options opt;
    CLI::App app{"Dissociates uncertainty and incorrectness features of SAE-instrumented models."};
    app.require_subcommand(1, 1);
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"synth", "build the synthetic world, its datasets and oracle SAEs"},
        {"infer", "forward the dataset and store final-token residuals"},
        {"discover", "classify features into uncertainty/incorrectness/confounded"},
        {"screen", "screen top confounded features one at a time on discovery"},
        {"evaluate", "evaluate a suppression config on validation"},
        {"control", "count-matched random feature control"},
        {"transfer", "apply the config to the transfer dataset"},
        {"probe", "fit per-layer correctness probes and the sparse probe"},
        {"abstain", "abstention sweep of the sparse probe"},
        {"report", "tables and figures from the stage artifacts"},
        {"run-all", "every stage in order, then report"},
        {"serve", "serve the synth runner over TCP or stdio"},
        {"conformance", "replay or write golden protocol transcripts"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->callback([&opt, name = name] { opt.command = name; });
        sub->add_option("--config", opt.config, "run config JSON (default: <out>/run.json when present)");
        sub->add_option("--out", opt.out, "artifact directory")->capture_default_str();
        sub->add_option("--seed", opt.seed, "data and split seed");
        sub->add_option("--jobs", opt.jobs, "worker cap");
        sub->add_option("--criterion", opt.criterion, "joint, acc or entropy");
        sub->add_option("--lo-pct", opt.lo_pct, "confident entropy percentile");
        sub->add_option("--hi-pct", opt.hi_pct, "uncertain entropy percentile");
        sub->add_option("--alpha", opt.alpha, "significance level");
        sub->add_option("--runner", opt.runner, "synth[:<world.json>], tcp:<host:port> or stdio:<command>");
        sub->add_option("--n-questions", opt.n_questions, "questions per synthetic dataset");
        sub->add_flag("--force", opt.force, "accept inputs produced under another config");
        if (name == "evaluate") sub->add_option("--suppression", opt.suppression, "suppression config (default: <out>/config.json)");
        if (name == "serve") {
            sub->add_option("--listen", opt.listen, "host:port; port 0 picks a free one");
            sub->add_flag("--stdio", opt.stdio, "serve one session on stdin/stdout");
            sub->add_option("--max-sessions", opt.max_sessions, "stop after this many TCP sessions");
        }
        if (name == "conformance") {
            sub->add_option("--golden", opt.golden, "transcript directory");
            sub->add_flag("--write", opt.write, "regenerate the transcripts with the in-process runner");
        }
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    }

    try {
        Session s(opt, opt.command == "serve" && opt.stdio ? err : out);
        int code = kExitOk;
        const auto& c = opt.command;
        if (c == "synth") cmd_synth(s);
        else if (c == "infer") cmd_infer(s);
        else if (c == "discover") cmd_discover(s);
        else if (c == "screen") cmd_screen(s);
        else if (c == "evaluate") cmd_evaluate(s, opt);
        else if (c == "control") cmd_control(s);
        else if (c == "transfer") cmd_transfer(s);
        else if (c == "probe") cmd_probe(s);
        else if (c == "abstain") cmd_abstain(s);
        else if (c == "report") cmd_report(s, opt);
        else if (c == "run-all") {
            if (s.cfg().runner == "synth") {
                cmd_synth(s);
                s.finish("synth");
            }
            cmd_infer(s);
            cmd_discover(s);
            cmd_screen(s);
            cmd_evaluate(s, opt);
            cmd_control(s);
            cmd_transfer(s);
            cmd_probe(s);
            cmd_abstain(s);
            cmd_report(s, opt);
        } else if (c == "serve") {
            cmd_serve(s, opt);
            return kExitOk;
        } else if (c == "conformance") {
            return cmd_conformance(s, opt);
        }
        s.finish(c);
        return code;
    } catch (const RunnerError& e) {
        err << "runner error [" << e.code() << "]: " << e.what() << "\n";
        return kExitRunner;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const json::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    }
}

} // namespace qdiss
