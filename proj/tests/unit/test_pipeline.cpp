#include "doctest.h"

#include <set>

#include "qdiss/pipeline.hpp"
#include "qdiss/synthworld.hpp"

using namespace qdiss;

namespace {

struct Fixture {
    World world = build_world(WorldConfig{});
    SynthRunner runner{world};
    std::vector<McqItem> items = gen_questions(world, 400, 1, "t").items;
    std::map<int, SaeParams> saes;
    Fixture() {
        runner.load_oracle_saes();
        for (int l = 0; l < world.cfg.n_layers; ++l) saes[l] = world.oracle_sae(l);
    }
};

class CountingRunner : public Runner {
public:
    explicit CountingRunner(Runner& inner) : inner_(inner) {}
    RunnerCapabilities hello() override { return inner_.hello(); }
    void load_sae(const SaeParams& s) override { inner_.load_sae(s); }
    ForwardResult forward(const ForwardRequest& r) override {
        ++forwards;
        return inner_.forward(r);
    }
    int forwards = 0;

private:
    Runner& inner_;
};

std::set<std::string> ids(const std::vector<McqItem>& v) {
    std::set<std::string> s;
    for (const auto& i : v) s.insert(i.id);
    return s;
}

} // namespace

TEST_CASE("criterion rules") {
    CHECK(criterion_passes(Criterion::Joint, 0.0, -0.01));
    CHECK_FALSE(criterion_passes(Criterion::Joint, 0.0, 0.0));
    CHECK_FALSE(criterion_passes(Criterion::Joint, -0.1, -1.0));
    CHECK(criterion_passes(Criterion::AccOnly, 0.0, 5.0));
    CHECK_FALSE(criterion_passes(Criterion::AccOnly, -0.1, -5.0));
    CHECK(criterion_passes(Criterion::EntropyOnly, -50.0, -0.001));
    CHECK_FALSE(criterion_passes(Criterion::EntropyOnly, 5.0, 0.0));
    CHECK(parse_criterion("acc") == Criterion::AccOnly);
    CHECK(parse_criterion("entropy_only") == Criterion::EntropyOnly);
    CHECK_THROWS_AS(parse_criterion("both"), Error);
}

TEST_CASE("split_half: seeded, disjoint, covering, odd item to discovery") {
    std::vector<int> rows(11);
    for (int i = 0; i < 11; ++i) rows[i] = i;
    const auto [a, b] = split_half(rows, 3);
    CHECK(a.size() == 6);
    CHECK(b.size() == 5);
    std::set<int> all(a.begin(), a.end());
    all.insert(b.begin(), b.end());
    CHECK(all.size() == 11);
    CHECK(split_half(rows, 3) == std::make_pair(a, b));
    CHECK(split_half(rows, 4) != std::make_pair(a, b));

    std::vector<int> ten(10, 0);
    const auto [c, d] = split_half(ten, 1);
    CHECK(c.size() == 5);
    CHECK(d.size() == 5);
    CHECK_THROWS_AS(split_half(std::vector<int>{1}, 1), Error);
}

TEST_CASE("split_items names the halves and keeps them disjoint") {
    Fixture f;
    const auto h = split_items(f.items, 9);
    CHECK(h.discovery.name == "discovery");
    CHECK(h.validation.name == "validation");
    CHECK(h.discovery.items.size() + h.validation.items.size() == f.items.size());
    CHECK_NOTHROW(assert_disjoint(h.discovery, h.validation));
    Split overlap{"validation", {h.discovery.items.front()}};
    CHECK_THROWS_AS(assert_disjoint(h.discovery, overlap), Error);
    for (const auto& id : ids(h.validation.items)) CHECK(ids(h.discovery.items).count(id) == 0);
}

TEST_CASE("screening refuses any split but discovery") {
    Fixture f;
    Evaluator ev(f.runner);
    const auto h = split_items(f.items, 1);
    CHECK_THROWS_AS(screen(ev, h.validation, {}, Criterion::Joint), Error);
}

TEST_CASE("no candidates gives an empty config equal to the baseline") {
    Fixture f;
    Evaluator ev(f.runner);
    const auto h = split_items(f.items, 1);
    const auto r = screen(ev, h.discovery, {}, Criterion::Joint);
    CHECK(r.rows.empty());
    CHECK(r.config.empty());
    const auto e = ev.evaluate(h.validation.items, r.config);
    const auto b = ev.baseline(h.validation.items);
    CHECK(e.accuracy == b.accuracy);
    CHECK(e.mean_entropy == b.mean_entropy);
    CHECK(evaluate(f.runner, h.validation.items, SuppressionConfig{}) == b);
}

TEST_CASE("joint survivors are a subset of both single criteria") {
    Fixture f;
    Evaluator ev(f.runner);
    const auto h = split_items(f.items, 2);
    const auto recs = infer(f.runner, h.discovery.items, {0, 1, 2});
    const auto disc = discover(recs, f.saes, 0.05, 25, 75);
    const auto cands = rank_top_k(disc.stats, 10, Category::Confounded);
    const auto r = screen(ev, h.discovery, cands, Criterion::Joint);
    const auto acc = rescreen(r, Criterion::AccOnly), ent = rescreen(r, Criterion::EntropyOnly);
    int n = 0;
    for (const auto& [l, feats] : r.config.features) {
        for (int x : feats) {
            ++n;
            CHECK(std::binary_search(acc.features.at(l).begin(), acc.features.at(l).end(), x));
            CHECK(std::binary_search(ent.features.at(l).begin(), ent.features.at(l).end(), x));
        }
    }
    CHECK(n > 0);
    CHECK(screen_csv(r).rfind("layer,feature,acc_delta,entropy_delta,pass,criterion\n", 0) == 0);
}

TEST_CASE("evaluator caches baselines and jobs do not change results") {
    Fixture f;
    CountingRunner c(f.runner);
    Evaluator ev(c);
    const auto b1 = ev.baseline(f.items);
    const auto b2 = ev.baseline(f.items);
    CHECK(b1 == b2);
    CHECK(c.forwards == 1);

    const auto h = split_items(f.items, 3);
    const auto recs = infer(f.runner, h.discovery.items, {0, 1, 2});
    const auto cands = rank_top_k(discover(recs, f.saes, 0.05, 25, 75).stats, 5, Category::Confounded);
    Evaluator one(f.runner, 1), four(f.runner, 4);
    const auto a = screen(one, h.discovery, cands, Criterion::Joint), b = screen(four, h.discovery, cands, Criterion::Joint);
    CHECK(screen_csv(a) == screen_csv(b));
}

TEST_CASE("random control matches counts and excludes the matched features") {
    Fixture f;
    Evaluator ev(f.runner);
    const auto h = split_items(f.items, 4);
    const auto recs = infer(f.runner, h.discovery.items, {0, 1, 2});
    SuppressionConfig target;
    target.features = {{0, f.world.features_with_role(0, Role::C)}, {2, {f.world.features_with_role(2, Role::U)[0]}}};
    const auto ctl = random_control(ev, h.discovery, recs, f.saes, target, 0.01, 7);
    CHECK(ctl.skipped_layers.empty());
    for (const auto& [l, feats] : target.features) {
        const auto& got = ctl.sampled.features.at(l);
        CHECK(got.size() == feats.size());
        for (int x : got) CHECK_FALSE(std::binary_search(feats.begin(), feats.end(), x));
    }
    const auto again = random_control(ev, h.discovery, recs, f.saes, target, 0.01, 7);
    CHECK(again.sampled.features == ctl.sampled.features);
    for (const auto& [l, feats] : ctl.survived.features)
        for (int x : feats) CHECK(std::binary_search(ctl.sampled.features.at(l).begin(), ctl.sampled.features.at(l).end(), x));
}

TEST_CASE("random control skips layers without enough active features") {
    Fixture f;
    Evaluator ev(f.runner);
    const auto h = split_items(f.items, 4);
    const auto recs = infer(f.runner, h.discovery.items, {0, 1, 2});
    SuppressionConfig target;
    std::vector<int> all(static_cast<std::size_t>(f.world.m));
    for (int i = 0; i < f.world.m; ++i) all[i] = i;
    target.features = {{1, all}};
    const auto ctl = random_control(ev, h.discovery, recs, f.saes, target, 0.01, 7);
    CHECK(ctl.skipped_layers == std::vector<int>{1});
    CHECK(ctl.sampled.empty());
}

TEST_CASE("transfer checks widths before any forward") {
    Fixture f;
    CountingRunner c(f.runner);
    Evaluator ev(c);
    SuppressionConfig cfg;
    cfg.features = {{0, {f.world.m - 1}}};
    CHECK_THROWS_AS(transfer(ev, f.items, cfg, {{0, f.world.m - 1}}), Error);
    CHECK_THROWS_AS(transfer(ev, f.items, cfg, {{1, f.world.m}}), Error);
    CHECK(c.forwards == 0);
    const auto r = transfer(ev, f.items, cfg, {{0, f.world.m}});
    CHECK(r.acc_delta == doctest::Approx(100.0 * (r.suppressed.accuracy - r.baseline.accuracy)));
}

TEST_CASE("depth_gradient keeps the largest effect per category and layer") {
    std::vector<FeatureStat> stats(4);
    stats[0] = {0, 0, 0, 0, 0, 0, Category::Confounded, 0.3, false};
    stats[1] = {0, 1, 0, 0, 0, 0, Category::Confounded, 0.7, false};
    stats[2] = {2, 0, 0, 0, 0, 0, Category::PureUncertainty, 0.4, false};
    stats[3] = {1, 3, 0, 0, 0, 0, Category::None, 9.0, false};
    const auto pts = depth_gradient(stats, 4);
    REQUIRE(pts.size() == 2);
    for (const auto& p : pts) {
        if (p.category == Category::Confounded) {
            CHECK(p.layer == 0);
            CHECK(p.max_effect == 0.7);
            CHECK(p.depth == 0.0);
        } else {
            CHECK(p.category == Category::PureUncertainty);
            CHECK(p.depth == 0.5);
        }
    }
    CHECK(depth_csv(pts).rfind("category,layer,depth,max_effect\n", 0) == 0);
}

TEST_CASE("suppression config JSON round trips") {
    SuppressionConfig c;
    c.features = {{0, {1, 4}}, {2, {3}}};
    c.provenance = {{"criterion", "joint"}};
    const auto back = suppression_config_from_json(suppression_config_to_json(c));
    CHECK(back.features == c.features);
    CHECK(back.provenance == c.provenance);
    CHECK(back.total() == 3);
}

TEST_CASE("discovery finds every planted class with the oracle SAEs") {
    Fixture f;
    const auto recs = infer(f.runner, f.items, {0, 1, 2});
    const auto disc = discover(recs, f.saes, 0.05, 25, 75);
    CHECK(disc.degenerate_layers.empty());
    int c_found = 0;
    for (const auto& s : disc.stats)
        if (f.world.roles[s.layer][s.feature] == Role::C && s.category == Category::Confounded) ++c_found;
    CHECK(c_found >= 10);
    CHECK(counts_csv(disc).rfind("layer,pure_uncertainty,pure_incorrectness,confounded\n", 0) == 0);
}
