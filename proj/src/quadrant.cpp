#include "qdiss/quadrant.hpp"

#include <cmath>
#include <set>

#include <fmt/format.h>

namespace qdiss {

double answer_entropy(std::span<const double, 4> probs) {
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0)) throw Error(fmt::format("negative or non-finite probability {}", p));
        sum += p;
    }
    if (std::abs(sum - 1.0) > kProbSumTolerance) throw Error(fmt::format("probabilities sum to {}", sum));
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return std::max(h, 0.0);
}

int argmax4(std::span<const double, 4> probs) {
    int best = 0;
    for (int i = 1; i < 4; ++i) {
        if (probs[i] > probs[best]) best = i;
    }
    return best;
}

InferenceRecord make_record(std::string question_id, const std::array<double, 4>& probs, int gold,
                            std::string dataset, std::map<int, std::vector<float>> activations) {
    if (gold < 0 || gold > 3) throw Error(fmt::format("record {}: gold {} out of range", question_id, gold));
    InferenceRecord r;
    r.question_id = std::move(question_id);
    r.probs = probs;
    r.gold = gold;
    r.entropy = answer_entropy(r.probs);
    r.predicted = argmax4(r.probs);
    r.correct = r.predicted == gold;
    r.dataset = std::move(dataset);
    r.activations = std::move(activations);
    return r;
}

char group_letter(Group g) {
    switch (g) {
    case Group::A: return 'A';
    case Group::B: return 'B';
    case Group::C: return 'C';
    case Group::D: return 'D';
    case Group::Excluded: return 'X';
    }
    return 'X';
}

namespace {

QuadrantSplit split_at(std::span<const InferenceRecord> records, double lo, double hi) {
    QuadrantSplit s;
    s.lo_threshold = lo;
    s.hi_threshold = hi;
    s.assignments.reserve(records.size());
    for (const auto& r : records) {
        Group g = Group::Excluded;
        if (r.entropy < lo) g = r.correct ? Group::A : Group::B;
        else if (r.entropy > hi) g = r.correct ? Group::C : Group::D;
        if (g != Group::Excluded) ++s.counts[static_cast<int>(g)];
        s.assignments.push_back({r.question_id, g, lo, hi});
    }
    for (int c : s.counts) s.empty_group = s.empty_group || c == 0;
    return s;
}

std::vector<double> entropies(std::span<const InferenceRecord> records) {
    std::vector<double> h;
    h.reserve(records.size());
    for (const auto& r : records) h.push_back(r.entropy);
    return h;
}

} // namespace

QuadrantSplit assign_quadrants(std::span<const InferenceRecord> records, double lo_pct, double hi_pct) {
    if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0)) {
        throw Error(fmt::format("percentiles must satisfy 0 <= lo < hi <= 100, got {} and {}", lo_pct, hi_pct));
    }
    if (records.size() < 4) throw Error(fmt::format("need at least 4 records, got {}", records.size()));
    const auto h = entropies(records);
    return split_at(records, percentile_inclusive(h, lo_pct), percentile_inclusive(h, hi_pct));
}

QuadrantSplit median_split(std::span<const InferenceRecord> records) {
    if (records.size() < 4) throw Error(fmt::format("need at least 4 records, got {}", records.size()));
    const double med = percentile_inclusive(entropies(records), 50.0);
    return split_at(records, med, med);
}

std::string assignments_csv(std::span<const InferenceRecord> records, const QuadrantSplit& split) {
    if (records.size() != split.assignments.size()) throw Error("assignments_csv: record count mismatch");
    std::string out = "question_id,group,entropy,correct\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
        out += fmt::format("{},{},{},{}\n", records[i].question_id, group_letter(split.assignments[i].group),
                           records[i].entropy, records[i].correct ? 1 : 0);
    }
    return out;
}

RetentionMatrix split_sensitivity(std::span<const FeatureStat> strict_stats, std::span<const FeatureStat> median_stats) {
    std::map<std::pair<int, int>, Category> median_by_key;
    for (const auto& s : median_stats) median_by_key[{s.layer, s.feature}] = s.category;

    RetentionMatrix m;
    for (Category c : kFeatureCategories) m.per_category[c] = {};
    for (const auto& s : strict_stats) {
        auto it = median_by_key.find({s.layer, s.feature});
        if (it == median_by_key.end()) {
            throw Error(fmt::format("feature ({}, {}) missing from median classification", s.layer, s.feature));
        }
        ++m.migrations[{s.category, it->second}];
        if (s.category == Category::None) continue;
        auto& r = m.per_category[s.category];
        ++r.n_strict;
        if (it->second == s.category) ++r.retained;
    }
    for (auto& [c, r] : m.per_category) {
        if (r.n_strict > 0) r.fraction = static_cast<double>(r.retained) / r.n_strict;
    }
    return m;
}

std::string retention_csv(const RetentionMatrix& m) {
    std::string out = "category,n_strict,retained,retention\n";
    for (const auto& [c, r] : m.per_category) {
        out += fmt::format("{},{},{},{}\n", category_name(c), r.n_strict, r.retained,
                           r.fraction ? fmt::format("{}", *r.fraction) : std::string("n/a"));
    }
    out += "\nfrom,to,count\n";
    for (const auto& [key, n] : m.migrations) {
        out += fmt::format("{},{},{}\n", category_name(key.first), category_name(key.second), n);
    }
    return out;
}

void save_records(const std::filesystem::path& path, std::span<const InferenceRecord> records,
                  const json& extra_meta) {
    std::set<int> layers;
    if (!records.empty()) {
        for (const auto& [l, v] : records.front().activations) layers.insert(l);
    }
    json rows = json::array();
    std::map<int, TensorBlob> acts;
    for (int l : layers) {
        const auto d = static_cast<std::int64_t>(records.front().activations.at(l).size());
        acts[l] = {fmt::format("acts.{}", l), {static_cast<std::int64_t>(records.size()), d}, {}};
        acts[l].data.reserve(records.size() * static_cast<std::size_t>(d));
    }
    for (const auto& r : records) {
        if (r.activations.size() != layers.size()) {
            throw Error(fmt::format("record {}: captured layers differ from the first record", r.question_id));
        }
        rows.push_back({{"id", r.question_id},
                        {"probs", r.probs},
                        {"gold", r.gold},
                        {"predicted", r.predicted},
                        {"correct", r.correct},
                        {"entropy", r.entropy},
                        {"dataset", r.dataset}});
        for (int l : layers) {
            auto it = r.activations.find(l);
            if (it == r.activations.end() || static_cast<std::int64_t>(it->second.size()) != acts[l].shape[1]) {
                throw Error(fmt::format("record {}: activation at layer {} missing or wrong width", r.question_id, l));
            }
            acts[l].data.insert(acts[l].data.end(), it->second.begin(), it->second.end());
        }
    }
    json meta = extra_meta;
    meta["kind"] = "records";
    meta["layers"] = std::vector<int>(layers.begin(), layers.end());
    meta["records"] = std::move(rows);
    std::vector<TensorBlob> blobs;
    for (auto& [l, b] : acts) blobs.push_back(std::move(b));
    write_container(path, meta, blobs);
}

std::vector<InferenceRecord> load_records(const std::filesystem::path& path, json* meta_out) {
    auto c = read_container(path);
    if (c.meta.value("kind", "") != "records") throw Error(path.string() + ": not a records container");
    const auto& rows = c.meta.at("records");
    std::vector<InferenceRecord> out;
    out.reserve(rows.size());
    for (const auto& j : rows) {
        InferenceRecord r;
        r.question_id = j.at("id").get<std::string>();
        r.probs = j.at("probs").get<std::array<double, 4>>();
        r.gold = j.at("gold").get<int>();
        r.predicted = j.at("predicted").get<int>();
        r.correct = j.at("correct").get<bool>();
        r.entropy = j.at("entropy").get<double>();
        r.dataset = j.value("dataset", "");
        out.push_back(std::move(r));
    }
    for (int l : c.meta.at("layers").get<std::vector<int>>()) {
        const auto& b = c.at(fmt::format("acts.{}", l));
        if (b.shape.size() != 2 || b.shape[0] != static_cast<std::int64_t>(out.size())) {
            throw Error(fmt::format("{}: activation blob for layer {} has wrong shape", path.string(), l));
        }
        const auto d = static_cast<std::size_t>(b.shape[1]);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i].activations[l].assign(b.data.begin() + static_cast<std::ptrdiff_t>(i * d),
                                         b.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
        }
    }
    if (meta_out) {
        c.meta.erase("records");
        *meta_out = std::move(c.meta);
    }
    return out;
}

} // namespace qdiss
