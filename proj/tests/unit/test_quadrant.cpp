#include "doctest.h"

#include <cmath>

#include "qdiss/quadrant.hpp"
#include "support/tempdir.hpp"

using namespace qdiss;

namespace {

// Record whose answer distribution puts `top` on `pred` and spreads the rest.
InferenceRecord rec(const std::string& id, double top, int pred, int gold) {
    std::array<double, 4> p{};
    p.fill((1.0 - top) / 3.0);
    p[pred] = top;
    return make_record(id, p, gold, "t");
}

} // namespace

TEST_CASE("answer_entropy in nats with 0 ln 0 = 0") {
    const std::array<double, 4> uniform = {0.25, 0.25, 0.25, 0.25};
    CHECK(answer_entropy(uniform) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
    const std::array<double, 4> point = {0, 1, 0, 0};
    CHECK(answer_entropy(point) == 0.0);
    const std::array<double, 4> half = {0.5, 0.5, 0, 0};
    CHECK(answer_entropy(half) == doctest::Approx(std::log(2.0)));
    const std::array<double, 4> neg = {-0.1, 0.6, 0.3, 0.2};
    CHECK_THROWS_AS(answer_entropy(neg), Error);
    const std::array<double, 4> bad_sum = {0.3, 0.3, 0.3, 0.3};
    CHECK_THROWS_AS(answer_entropy(bad_sum), Error);
}

TEST_CASE("argmax4 takes the lowest index on ties") {
    const std::array<double, 4> tie = {0.1, 0.4, 0.4, 0.1};
    CHECK(argmax4(tie) == 1);
    const std::array<double, 4> all = {0.25, 0.25, 0.25, 0.25};
    CHECK(argmax4(all) == 0);
}

TEST_CASE("make_record derives prediction, correctness and entropy") {
    const auto r = rec("q", 0.7, 2, 2);
    CHECK(r.predicted == 2);
    CHECK(r.correct);
    CHECK(r.entropy == answer_entropy(r.probs));
    CHECK_FALSE(rec("q", 0.7, 2, 1).correct);
    CHECK_THROWS_AS(rec("q", 0.7, 2, 4), Error);
}

TEST_CASE("assign_quadrants uses strict inequalities at the percentile thresholds") {
    // Entropies strictly decrease with top; 10 records.
    std::vector<InferenceRecord> rs;
    for (int i = 0; i < 10; ++i) rs.push_back(rec("q" + std::to_string(i), 0.95 - 0.06 * i, i % 4, i % 2 ? 0 : i % 4));
    const auto s = assign_quadrants(rs, 25, 75);
    std::vector<double> h;
    for (const auto& r : rs) h.push_back(r.entropy);
    CHECK(s.lo_threshold == percentile_inclusive(h, 25));
    CHECK(s.hi_threshold == percentile_inclusive(h, 75));
    for (std::size_t i = 0; i < rs.size(); ++i) {
        const auto g = s.assignments[i].group;
        CAPTURE(i);
        if (rs[i].entropy < s.lo_threshold) CHECK(g == (rs[i].correct ? Group::A : Group::B));
        else if (rs[i].entropy > s.hi_threshold) CHECK(g == (rs[i].correct ? Group::C : Group::D));
        else CHECK(g == Group::Excluded);
    }
    int total = 0;
    for (int c : s.counts) total += c;
    CHECK(total <= 10);
}

TEST_CASE("records exactly at a threshold are excluded") {
    // Percentile 25 of {h0,h0,h1,h1,h2,h2,h3,h3} interpolates; force it onto a value.
    std::vector<InferenceRecord> rs;
    const double tops[] = {0.9, 0.9, 0.8, 0.8, 0.7, 0.7, 0.6, 0.6, 0.5};
    for (int i = 0; i < 9; ++i) rs.push_back(rec("q" + std::to_string(i), tops[i], 0, 0));
    const auto s = assign_quadrants(rs, 25, 75); // positions 2 and 6: exact values
    CHECK(s.lo_threshold == rs[2].entropy);
    CHECK(s.hi_threshold == rs[6].entropy);
    CHECK(s.assignments[2].group == Group::Excluded);
    CHECK(s.assignments[3].group == Group::Excluded);
    CHECK(s.assignments[6].group == Group::Excluded);
    CHECK(s.assignments[0].group == Group::A);
    CHECK(s.assignments[8].group == Group::C);
    CHECK(s.empty_group); // nothing incorrect
}

TEST_CASE("median split excludes ties with the median") {
    std::vector<InferenceRecord> rs = {rec("a", 0.9, 0, 0), rec("b", 0.9, 1, 0), rec("c", 0.6, 0, 0),
                                       rec("d", 0.4, 0, 0), rec("e", 0.4, 2, 0)};
    const auto s = median_split(rs);
    CHECK(s.lo_threshold == s.hi_threshold);
    CHECK(s.assignments[2].group == Group::Excluded);
    CHECK(s.count(Group::A) == 1);
    CHECK(s.count(Group::B) == 1);
    CHECK(s.count(Group::C) == 1);
    CHECK(s.count(Group::D) == 1);
    CHECK_FALSE(s.empty_group);
}

TEST_CASE("assign_quadrants validates inputs") {
    std::vector<InferenceRecord> rs(3, rec("a", 0.9, 0, 0));
    CHECK_THROWS_AS(assign_quadrants(rs, 25, 75), Error);
    rs.push_back(rec("b", 0.5, 0, 0));
    CHECK_THROWS_AS(assign_quadrants(rs, 75, 25), Error);
    CHECK_THROWS_AS(assign_quadrants(rs, -1, 25), Error);
    CHECK_NOTHROW(assign_quadrants(rs, 25, 75));
}

TEST_CASE("assignments_csv lists every record") {
    std::vector<InferenceRecord> rs = {rec("a", 0.9, 0, 0), rec("b", 0.9, 1, 0), rec("c", 0.3, 0, 0), rec("d", 0.3, 1, 0)};
    const auto csv = assignments_csv(rs, median_split(rs));
    CHECK(csv.rfind("question_id,group,entropy,correct\n", 0) == 0);
    CHECK(csv.find("\na,A,") != std::string::npos);
    CHECK(csv.find("\nb,B,") != std::string::npos);
    CHECK(csv.find("\nc,C,") != std::string::npos);
    CHECK(csv.find("\nd,D,") != std::string::npos);
}

TEST_CASE("split_sensitivity counts retention and migrations") {
    auto st = [](int f, Category c) {
        FeatureStat s;
        s.layer = 0;
        s.feature = f;
        s.category = c;
        return s;
    };
    const std::vector<FeatureStat> strict = {st(0, Category::Confounded), st(1, Category::Confounded),
                                             st(2, Category::PureUncertainty), st(3, Category::None)};
    const std::vector<FeatureStat> median = {st(0, Category::Confounded), st(1, Category::PureIncorrectness),
                                             st(2, Category::PureUncertainty), st(3, Category::Confounded)};
    const auto m = split_sensitivity(strict, median);
    CHECK(m.per_category.at(Category::Confounded).n_strict == 2);
    CHECK(m.per_category.at(Category::Confounded).retained == 1);
    CHECK(*m.per_category.at(Category::Confounded).fraction == 0.5);
    CHECK(*m.per_category.at(Category::PureUncertainty).fraction == 1.0);
    CHECK_FALSE(m.per_category.at(Category::PureIncorrectness).fraction.has_value());
    CHECK(m.migrations.at({Category::Confounded, Category::PureIncorrectness}) == 1);
    CHECK(m.migrations.at({Category::None, Category::Confounded}) == 1);
    CHECK(retention_csv(m).find("n/a") != std::string::npos);
    const std::vector<FeatureStat> missing = {st(0, Category::Confounded)};
    CHECK_THROWS_AS(split_sensitivity(strict, missing), Error);
}

TEST_CASE("records round trip with activations") {
    testing_support::TempDir dir;
    std::vector<InferenceRecord> rs;
    for (int i = 0; i < 5; ++i) {
        auto r = rec("q" + std::to_string(i), 0.4 + 0.1 * i, i % 4, 1);
        r.activations[0] = {float(i), 1.5f, -2.0f};
        r.activations[3] = {float(-i), 0.25f, 8.0f};
        rs.push_back(r);
    }
    save_records(dir / "r.qdt", rs, {{"n_discovery", 3}});
    json meta;
    const auto back = load_records(dir / "r.qdt", &meta);
    CHECK(meta.at("n_discovery") == 3);
    REQUIRE(back.size() == rs.size());
    for (std::size_t i = 0; i < rs.size(); ++i) {
        CHECK(back[i].question_id == rs[i].question_id);
        CHECK(back[i].probs == rs[i].probs);
        CHECK(back[i].entropy == rs[i].entropy);
        CHECK(back[i].correct == rs[i].correct);
        CHECK(back[i].dataset == "t");
        CHECK(back[i].activations == rs[i].activations);
    }
}

TEST_CASE("save_records rejects inconsistent captures") {
    testing_support::TempDir dir;
    auto a = rec("a", 0.9, 0, 0), b = rec("b", 0.9, 0, 0);
    a.activations[0] = {1, 2};
    b.activations[1] = {1, 2};
    std::vector<InferenceRecord> rs = {a, b};
    CHECK_THROWS_AS(save_records(dir / "r.qdt", rs), Error);
    b.activations.clear();
    b.activations[0] = {1, 2, 3};
    rs = {a, b};
    CHECK_THROWS_AS(save_records(dir / "r.qdt", rs), Error);
}
