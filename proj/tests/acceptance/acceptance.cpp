// One PASS/FAIL line per acceptance criterion. Exit status is the failure count.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "qdiss/cli.hpp"
#include "qdiss/experiment.hpp"
#include "qdiss/report.hpp"
#include "support/oracles.hpp"
#include "support/tempdir.hpp"

using namespace qdiss;
namespace fs = std::filesystem;

namespace tol {
constexpr int kMwuInstances = 200;
constexpr int kMwuGroupSize = 20;
constexpr double kMwuNoTies = 0.02;
constexpr double kMwuTies = 0.05;
constexpr int kAurocMaxN = 50;
constexpr double kCohenD = 2.8284271247461903;
constexpr double kCohenTol = 1e-12;
constexpr int kControlItems = 1000;
constexpr double kRecall = 0.9;
constexpr int kFalsePlacement = 1;
constexpr double kJointAccPts = 1.0;
constexpr double kJointEntropy = -0.1;
constexpr double kControlPts = 0.3;
constexpr double kApproxPts = 0.5; // "joint ~ acc_only"
constexpr double kEntropyOnlyDrop = -2.0;
constexpr double kProbeAuroc = 0.75;
constexpr double kProbeMargin = 0.1;
constexpr double kAbstainGain = 10.0;
constexpr double kAbstainThreshold = 0.60;
} // namespace tol

namespace {

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail, double seconds) {
    if (!pass) ++failures;
    std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << fmt::format(" [{:.1f}s]", seconds) << std::endl;
}

template <typename F>
void criterion(const std::string& name, F&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = false;
    std::string detail;
    try {
        pass = body(detail);
    } catch (const std::exception& e) {
        detail = std::string("exception: ") + e.what();
    }
    report(name, pass, detail, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

double pts(const EvalSummary& a, const EvalSummary& base) { return 100.0 * (a.accuracy - base.accuracy); }

bool stats_kernels(std::string& detail) {
    std::mt19937_64 rng(2024);
    double worst_plain = 0.0, worst_ties = 0.0;
    for (int i = 0; i < tol::kMwuInstances; ++i) {
        for (bool ties : {false, true}) {
            const double shift = 0.25 * (i % 5);
            const auto a = oracle::sample(rng, tol::kMwuGroupSize, ties, shift);
            const auto b = oracle::sample(rng, tol::kMwuGroupSize, ties);
            const double gap = std::abs(mann_whitney_u(a, b).p - oracle::exact_mwu_dp(a, b));
            (ties ? worst_ties : worst_plain) = std::max(ties ? worst_ties : worst_plain, gap);
        }
    }
    // The library enumerator agrees with the DP where it applies.
    double worst_enum = 0.0;
    for (int i = 0; i < 50; ++i) {
        const auto a = oracle::sample(rng, 6 + i % 6, i % 2 == 0, 0.3), b = oracle::sample(rng, 5 + i % 7, i % 2 == 0);
        worst_enum = std::max(worst_enum, std::abs(exact_mwu_p(a, b) - oracle::exact_mwu_dp(a, b)));
    }
    int auroc_mismatch = 0;
    std::bernoulli_distribution coin(0.5);
    for (int n = 2; n <= tol::kAurocMaxN; ++n) {
        for (int rep = 0; rep < 4; ++rep) {
            const auto s = oracle::sample(rng, n, rep % 2 == 1);
            std::vector<bool> y(static_cast<std::size_t>(n));
            for (auto&& v : y) v = coin(rng);
            y[0] = true;
            y[1] = false;
            if (auroc(s, y) != oracle::brute_auroc(s, y)) ++auroc_mismatch;
        }
    }
    const double d = std::abs(cohens_d(std::vector<double>{0, 2}, std::vector<double>{4, 6}).d);
    const bool ok = worst_plain <= tol::kMwuNoTies && worst_ties <= tol::kMwuTies && worst_enum <= 1e-12 &&
                    auroc_mismatch == 0 && std::abs(d - tol::kCohenD) <= tol::kCohenTol;
    detail = fmt::format("max|dp| no ties {:.4f} (<= {}), ties {:.4f} (<= {}); enumerator vs DP {:.1e}; "
                         "auroc mismatches {} for n <= {}; |d| = {:.13f}",
                         worst_plain, tol::kMwuNoTies, worst_ties, tol::kMwuTies, worst_enum, auroc_mismatch,
                         tol::kAurocMaxN, d);
    return ok;
}

bool control_exactness(std::string& detail) {
    SynthRunner runner(build_world(WorldConfig{}));
    runner.load_oracle_saes();
    const auto items = gen_questions(runner.world(), tol::kControlItems, 11, "ctl").items;
    ForwardRequest plain{items, {0, 1, 2}, {}};
    ForwardRequest empty = plain;
    for (int l = 0; l < 3; ++l) empty.suppress[l] = {};
    const auto a = runner.forward(plain), b = runner.forward(empty);
    int differ = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (a.items[i].probs != b.items[i].probs || a.items[i].captured != b.items[i].captured) ++differ;
    }
    const auto base = evaluate(runner, items, SuppressionConfig{});
    EvalSummary direct = summarize(a, items);
    const bool summary_same = base.accuracy == direct.accuracy && base.mean_entropy == direct.mean_entropy;
    detail = fmt::format("{} of {} items differ bitwise; evaluate(empty) equals plain summary: {}", differ, items.size(),
                         summary_same ? "yes" : "no");
    return differ == 0 && summary_same;
}

struct Recovery {
    std::map<Role, int> recalled;
    std::map<Category, int> misplaced;
};

Recovery recovery(const World& w, const std::vector<FeatureStat>& stats) {
    const std::map<Role, Category> want = {{Role::U, Category::PureUncertainty},
                                           {Role::I, Category::PureIncorrectness},
                                           {Role::C, Category::Confounded}};
    Recovery r;
    for (const auto& s : stats) {
        const Role role = w.roles[s.layer][s.feature];
        auto it = want.find(role);
        if (it != want.end() && it->second == s.category) ++r.recalled[role];
        else if (s.category != Category::None) ++r.misplaced[s.category];
    }
    return r;
}

bool dissociation(std::string& detail, const RunConfig& cfg, const ExperimentResult& r, const World& w) {
    const auto rec = recovery(w, r.discovery.stats);
    bool ok = true;
    std::string parts;
    for (Role role : {Role::U, Role::I, Role::C}) {
        const double planted = static_cast<double>(w.features_with_role(0, role).size()) * cfg.world.n_layers;
        const double recall = rec.recalled.count(role) ? rec.recalled.at(role) / planted : 0.0;
        ok = ok && recall >= tol::kRecall;
        parts += fmt::format("recall {} {:.3f}; ", role_letter(role), recall);
    }
    for (Category c : kFeatureCategories) {
        const int n = rec.misplaced.count(c) ? rec.misplaced.at(c) : 0;
        ok = ok && n <= tol::kFalsePlacement;
        parts += fmt::format("misplaced {} {}; ", category_name(c), n);
    }

    SynthRunner runner(build_world(cfg.world));
    runner.load_oracle_saes();
    SuppressionConfig i_cfg;
    i_cfg.features = w.role_config(Role::I);
    const auto i_eval = evaluate(runner, r.split.validation.items, i_cfg);
    const double i_delta = pts(i_eval, r.validation_baseline);
    ok = ok && i_delta == 0.0;

    const auto& joint = r.validation_eval.at(Criterion::Joint);
    const double j_acc = pts(joint, r.validation_baseline);
    const double j_ent = joint.mean_entropy - r.validation_baseline.mean_entropy;
    ok = ok && j_acc >= tol::kJointAccPts && j_ent <= tol::kJointEntropy;
    const double c_acc = pts(r.control_eval, r.validation_baseline);
    ok = ok && std::abs(c_acc) <= tol::kControlPts;
    detail = parts + fmt::format("I suppression acc delta {} pts; joint C-config ({} features) {:+.2f} pts {:+.4f} nats; "
                                 "random control ({} features) {:+.2f} pts",
                                 i_delta, r.configs.at(Criterion::Joint).total(), j_acc, j_ent,
                                 r.control.survived.total(), c_acc);
    return ok;
}

bool ablation(std::string& detail, RunConfig cfg) {
    cfg.world.n_c = 4;
    cfg.world.n_s = 1;
    const auto r = run_synth_experiment(cfg);
    const double j = pts(r.validation_eval.at(Criterion::Joint), r.validation_baseline);
    const double a = pts(r.validation_eval.at(Criterion::AccOnly), r.validation_baseline);
    const double e = pts(r.validation_eval.at(Criterion::EntropyOnly), r.validation_baseline);
    const bool ok = std::abs(j - a) <= tol::kApproxPts && a > e && j > e && e <= tol::kEntropyOnlyDrop;
    detail = fmt::format("sink world (4 C + 1 S per layer) acc deltas: joint {:+.2f}, acc_only {:+.2f}, entropy_only {:+.2f} pts "
                         "(features {}/{}/{})",
                         j, a, e, r.configs.at(Criterion::Joint).total(), r.configs.at(Criterion::AccOnly).total(),
                         r.configs.at(Criterion::EntropyOnly).total());
    return ok;
}

bool transfer_check(std::string& detail, const ExperimentResult& r) {
    const auto& t = r.transfer_result;
    detail = fmt::format("{} features applied without re-selection: acc {:+.2f} pts, entropy {:+.4f} nats (n = {})",
                         r.configs.at(Criterion::Joint).total(), t.acc_delta, t.entropy_delta, t.baseline.n_items);
    return t.acc_delta > 0.0 && t.entropy_delta < 0.0;
}

bool probe_check(std::string& detail, const RunConfig& cfg, const ExperimentResult& r, const World& w) {
    const auto y_tr = correctness(r.discovery_records), y_val = correctness(r.validation_records);
    double best_train = -1.0, auc_c = 0.0, auc_i = 0.0;
    int layer = -1;
    for (int l = 0; l < cfg.world.n_layers; ++l) {
        const auto sae = w.oracle_sae(l);
        const auto x_tr = latent_rows(r.discovery_records, sae), x_val = latent_rows(r.validation_records, sae);
        const auto pc = fit_probe(x_tr, y_tr, l, w.features_with_role(l, Role::C), cfg.l2_weight, cfg.seed);
        const double train = auroc(probe_scores(pc, x_tr), y_tr);
        if (train <= best_train) continue;
        best_train = train;
        layer = l;
        auc_c = auroc(probe_scores(pc, x_val), y_val);
        const auto pi = fit_probe(x_tr, y_tr, l, w.features_with_role(l, Role::I), cfg.l2_weight, cfg.seed);
        auc_i = auroc(probe_scores(pi, x_val), y_val);
    }
    bool monotone = !r.abstention.empty();
    for (std::size_t i = 1; i < r.abstention.size(); ++i) monotone = monotone && r.abstention[i].coverage <= r.abstention[i - 1].coverage;
    double gain = -1e9, coverage = 0.0;
    for (const auto& row : r.abstention) {
        if (std::abs(row.threshold - tol::kAbstainThreshold) < 1e-12) {
            gain = row.gain_vs_baseline;
            coverage = row.coverage;
        }
    }
    const bool ok = auc_c >= tol::kProbeAuroc && auc_c - auc_i >= tol::kProbeMargin && monotone && gain >= tol::kAbstainGain;
    detail = fmt::format("layer {}: held-out AUROC C {:.3f}, I {:.3f} (margin {:.3f}); entropy baseline {:.3f}; "
                         "coverage non-increasing over {} thresholds: {}; t = 0.60 gain {:+.2f} pts at coverage {:.3f}",
                         layer, auc_c, auc_i, auc_c - auc_i, r.probe.entropy_auroc, r.abstention.size(),
                         monotone ? "yes" : "no", gain, coverage);
    return ok;
}

int cli(const std::vector<std::string>& args, std::string& err) {
    std::ostringstream out, e;
    const int code = run_cli(args, out, e);
    err = e.str();
    return code;
}

bool format_fidelity(std::string& detail) {
    testing_support::TempDir dir("qdiss_accept");
    const std::string out = dir.path().string();
    std::string err;
    if (cli({"run-all", "--out", out}, err) != kExitOk) {
        detail = "run-all failed: " + err;
        return false;
    }
    const std::vector<std::pair<const char*, std::string>> tables = {
        {artifact::kTable1, "category,n_features"},
        {artifact::kTable2, "method,n_features,accuracy_pct,mean_entropy"},
        {artifact::kTable3, "criterion,n_features,acc_delta_pts,entropy_delta"},
        {artifact::kTable4, "threshold,answered,abstained,coverage,accuracy_on_answered,gain_vs_baseline"},
        {artifact::kTable5, "direction,n_features,acc_delta_pts,entropy_delta"},
    };
    const std::vector<int> expected_rows = {3, 3, 3, 5, 1};
    std::string bad;
    for (std::size_t i = 0; i < tables.size(); ++i) {
        const auto& [rel, header] = tables[i];
        if (!fs::exists(dir.path() / rel)) {
            bad += fmt::format(" {} missing;", rel);
            continue;
        }
        std::istringstream in(read_text_file(dir.path() / rel));
        std::string stamp, head, line;
        std::getline(in, stamp);
        std::getline(in, head);
        int rows = 0;
        while (std::getline(in, line)) rows += !line.empty();
        if (stamp.rfind("# config_hash=", 0) != 0 || head != header || rows != expected_rows[i])
            bad += fmt::format(" {} shape ({} rows);", rel, rows);
    }
    for (const char* rel : {artifact::kFigure3, artifact::kFigure4}) {
        const auto p = dir.path() / rel;
        const auto svg = fs::exists(p) ? read_text_file(p) : std::string();
        if (svg.find("<svg") == std::string::npos || svg.find("</svg>") == std::string::npos ||
            svg.find("<polyline") == std::string::npos)
            bad += fmt::format(" {} malformed;", rel);
    }
    const auto first = read_text_file(dir.path() / artifact::kEval);
    const int rerun = cli({"evaluate", "--out", out}, err);
    const bool same = rerun == kExitOk && read_text_file(dir.path() / artifact::kEval) == first;
    detail = fmt::format("5 tables and 2 figures {}; evaluate rerun byte-identical: {}", bad.empty() ? "well formed" : "BAD:" + bad,
                         same ? "yes" : "no");
    return bad.empty() && same;
}

} // namespace

int main() {
    criterion("stats kernels vs oracles", stats_kernels);
    criterion("empty-config control exactness", control_exactness);

    // Criteria on the default world share one pipeline run.
    const RunConfig cfg;
    const World world = build_world(cfg.world);
    const auto t0 = std::chrono::steady_clock::now();
    std::optional<ExperimentResult> result;
    std::string run_error;
    try {
        result = run_synth_experiment(cfg);
    } catch (const std::exception& e) {
        run_error = e.what();
    }
    const double run_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << fmt::format("info default world pipeline: {} questions, world seed {}, data seed {}, {:.1f}s", cfg.n_questions,
                             cfg.world.seed, cfg.seed, run_s)
              << std::endl;
    auto with_result = [&](auto&& fn) {
        return [&, fn](std::string& d) {
            if (!result) {
                d = "pipeline failed: " + run_error;
                return false;
            }
            return fn(d);
        };
    };
    criterion("three-way dissociation recovery", with_result([&](std::string& d) { return dissociation(d, cfg, *result, world); }));
    criterion("ablation ordering", [&](std::string& d) { return ablation(d, cfg); });
    criterion("transfer", with_result([&](std::string& d) { return transfer_check(d, *result); }));
    criterion("probe and abstention", with_result([&](std::string& d) { return probe_check(d, cfg, *result, world); }));
    criterion("format fidelity", format_fidelity);

    std::cout << (failures ? fmt::format("{} criteria FAILED", failures) : std::string("all criteria PASS")) << std::endl;
    return failures;
}
