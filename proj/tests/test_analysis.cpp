#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "mergeforge/analysis.hpp"
#include "test_support.hpp"

using namespace mergeforge::analysis;

namespace {

ExperimentRecord merged_record(const std::string& id, double p1, double p2, double pm,
                               ExperimentFlags flags = {}) {
    ExperimentRecord r;
    r.model_id = id;
    r.parent1_id = id + "-p1";
    r.parent2_id = id + "-p2";
    r.p_merged = pm;
    r.p1 = p1;
    r.p2 = p2;
    flags.merged = true;
    r.flags = flags;
    return r;
}

// Exhaustive 2-partition optimum for small point sets: the oracle for the
// k-means checks.
double best_two_partition_sse(const std::vector<StandardizedPoint>& pts) {
    const std::size_t n = pts.size();
    double best = std::numeric_limits<double>::infinity();
    for (std::uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
        double sx[2] = {0, 0}, sy[2] = {0, 0};
        int count[2] = {0, 0};
        for (std::size_t i = 0; i < n; ++i) {
            const int side = (mask >> i) & 1;
            sx[side] += pts[i].z_e;
            sy[side] += pts[i].z_a;
            ++count[side];
        }
        if (count[0] == 0 || count[1] == 0) continue;
        double sse = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const int side = (mask >> i) & 1;
            const double dx = pts[i].z_e - sx[side] / count[side];
            const double dy = pts[i].z_a - sy[side] / count[side];
            sse += dx * dx + dy * dy;
        }
        best = std::min(best, sse);
    }
    return best;
}

}  // namespace

TEST_CASE("score formulas") {
    CHECK(expected_score(0.8, 0.6) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(expected_score(0.42, 0.42) == 0.42);
    CHECK(expected_score(1.0, 0.0) == 0.5);
    CHECK(expected_score(0.3, 0.9) == expected_score(0.9, 0.3));
    CHECK_THROWS_AS(expected_score(1.2, 0.5), OutOfRange);

    CHECK(performance_improvement(0.85, 0.8, 0.6) == doctest::Approx(0.05).epsilon(1e-9));
    CHECK(performance_improvement(0.8, 0.8, 0.6) == 0.0);
    CHECK(performance_improvement(0.7, 0.8, 0.6) == doctest::Approx(-0.1).epsilon(1e-9));
    CHECK(performance_improvement(0.7, 0.6, 0.8) == performance_improvement(0.7, 0.8, 0.6));

    CHECK(diversity(0.8, 0.6) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(diversity(0.5, 0.5) == 0.0);
    CHECK(diversity(0.3, 0.9) == diversity(0.9, 0.3));
}

TEST_CASE("deviation ranking sorts best improvement first, ids break ties") {
    std::vector<ExperimentRecord> records = {
        merged_record("m-zero", 0.7, 0.7, 0.7),       // 0
        merged_record("m-drop", 0.8, 0.6, 0.7),       // -0.1
        merged_record("m-gain", 0.8, 0.6, 0.85),      // +0.05
    };
    const auto ranking = deviation_ranking(records);
    REQUIRE(ranking.size() == 3);
    CHECK(ranking[0].first == "m-gain");
    CHECK(ranking[1].first == "m-zero");
    CHECK(ranking[2].first == "m-drop");

    // exactly representable tie: 0.75 - 0.5 for both
    std::vector<ExperimentRecord> tied = {
        merged_record("zeta", 0.5, 0.25, 0.75),
        merged_record("alpha", 0.5, 0.25, 0.75),
    };
    const auto tie_ranking = deviation_ranking(tied);
    CHECK(tie_ranking[0].first == "alpha");
    CHECK(tie_ranking[1].first == "zeta");

    CHECK(deviation_ranking({merged_record("solo", 0.5, 0.5, 0.5)}).size() == 1);

    ExperimentRecord incomplete;
    incomplete.model_id = "broken";
    incomplete.flags.merged = true;
    incomplete.p_merged = 0.5;
    CHECK_THROWS_AS(deviation_ranking({incomplete}), MissingParentScores);
}

TEST_CASE("standardization uses the population deviation") {
    const auto z = standardize({1.0, 2.0, 3.0});
    REQUIRE(z.size() == 3);
    CHECK(std::abs(z[0] + 1.224744871391589) < 1e-9);
    CHECK(z[1] == 0.0);
    CHECK(std::abs(z[2] - 1.224744871391589) < 1e-9);

    // affine shifts leave z-scores unchanged
    const auto shifted = standardize({1.0 + 0.25, 2.0 + 0.25, 3.0 + 0.25});
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(z[i] - shifted[i]) < 1e-12);

    CHECK_THROWS_AS(standardize({5.0, 5.0, 5.0}), ZeroVariance);
    CHECK_THROWS_AS(standardize({0.1, 0.1, 0.1}), ZeroVariance);
    CHECK_THROWS_AS(standardize({1.0}), TooFew);
}

TEST_CASE("standardized output has mean 0 and population variance 1") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> v;
        const std::size_t n = 2 + testsupport::uniform_index(rng, 40);
        for (std::size_t i = 0; i < n; ++i) v.push_back(testsupport::uniform(rng, -3.0, 3.0));
        std::vector<double> z;
        try {
            z = standardize(v);
        } catch (const ZeroVariance&) {
            continue;
        }
        double mean = 0;
        for (double x : z) mean += x;
        mean /= double(n);
        double var = 0;
        for (double x : z) var += (x - mean) * (x - mean);
        var /= double(n);
        CHECK(std::abs(mean) < 1e-12);
        CHECK(std::abs(var - 1.0) < 1e-9);
    }
}

TEST_CASE("k-means fixture: two well-separated pairs") {
    const std::vector<StandardizedPoint> pts = {{0.0, 0.0}, {0.1, 0.0}, {10.0, 0.0}, {10.1, 0.0}};
    const KMeansResult r = kmeans(pts, 2, 7);
    CHECK(r.assignments[0] == r.assignments[1]);
    CHECK(r.assignments[2] == r.assignments[3]);
    CHECK(r.assignments[0] != r.assignments[2]);
    std::vector<double> xs = {r.centroids[0].z_e, r.centroids[1].z_e};
    std::sort(xs.begin(), xs.end());
    CHECK(xs[0] == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(xs[1] == doctest::Approx(10.05).epsilon(1e-12));
    CHECK(r.inertia == doctest::Approx(best_two_partition_sse(pts)).epsilon(1e-9));
}

TEST_CASE("k-means edge cases") {
    const std::vector<StandardizedPoint> pts = {{0, 0}, {1, 0}, {2, 1}};
    const KMeansResult one = kmeans(pts, 1, 3);
    CHECK(one.centroids[0].z_e == doctest::Approx(1.0));
    CHECK(one.centroids[0].z_a == doctest::Approx(1.0 / 3.0));

    const KMeansResult all = kmeans(pts, 3, 3);
    CHECK(all.inertia == doctest::Approx(0.0));

    CHECK_THROWS_AS(kmeans(pts, 0, 1), BadK);
    CHECK_THROWS_AS(kmeans(pts, 4, 1), BadK);
}

TEST_CASE("k-means is deterministic for a fixed seed") {
    std::mt19937_64 rng(55);
    std::vector<StandardizedPoint> pts;
    for (int i = 0; i < 20; ++i)
        pts.push_back({testsupport::uniform(rng, -2, 2), testsupport::uniform(rng, -2, 2)});
    const KMeansResult a = kmeans(pts, 3, 99);
    const KMeansResult b = kmeans(pts, 3, 99);
    CHECK(a.assignments == b.assignments);
    CHECK(a.inertia == b.inertia);
}

TEST_CASE("k-means attains the exhaustive optimum on small point sets") {
    std::mt19937_64 rng(123);
    for (int trial = 0; trial < 120; ++trial) {
        const std::size_t n = 3 + testsupport::uniform_index(rng, 6);  // 3..8
        std::vector<StandardizedPoint> pts;
        for (std::size_t i = 0; i < n; ++i)
            pts.push_back({testsupport::uniform(rng, -2, 2), testsupport::uniform(rng, -2, 2)});
        const KMeansResult r = kmeans(pts, 2, 5 + std::uint64_t(trial));
        const double oracle = best_two_partition_sse(pts);
        CHECK(r.inertia <= oracle + 1e-9);
        CHECK(r.inertia >= oracle - 1e-9);
    }
}

TEST_CASE("Lloyd iterations never increase inertia") {
    std::mt19937_64 rng(321);
    std::vector<StandardizedPoint> pts;
    for (int i = 0; i < 30; ++i)
        pts.push_back({testsupport::uniform(rng, -2, 2), testsupport::uniform(rng, -2, 2)});
    KMeansTrace trace;
    (void)kmeans(pts, 4, 17, 5, 300, &trace);
    REQUIRE(!trace.inertia_per_iteration.empty());
    for (const auto& run : trace.inertia_per_iteration)
        for (std::size_t i = 1; i < run.size(); ++i)
            CHECK(run[i] <= run[i - 1] + 1e-12);
}

TEST_CASE("single-linkage dendrogram fixture") {
    // the 1-D point set 0, 0.1, 10 embedded on the z_e axis
    const std::vector<StandardizedPoint> pts = {{0.0, 0.0}, {0.1, 0.0}, {10.0, 0.0}};
    const Dendrogram d = hcluster(pts);
    CHECK(d.n_leaves == 3);
    REQUIRE(d.merges.size() == 2);
    CHECK(d.merges[0].left == 0);
    CHECK(d.merges[0].right == 1);
    CHECK(d.merges[0].height == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(d.merges[0].size == 2);
    CHECK(d.merges[1].left == 3);  // the {0,1} cluster carries the smaller leaf index
    CHECK(d.merges[1].right == 2);
    CHECK(d.merges[1].height == doctest::Approx(9.9).epsilon(1e-12));
    CHECK(d.merges[1].size == 3);
}

TEST_CASE("two points merge once at their distance") {
    const Dendrogram d = hcluster({{0.0, 0.0}, {3.0, 4.0}});
    REQUIRE(d.merges.size() == 1);
    CHECK(d.merges[0].height == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(d.merges[0].size == 2);
    CHECK_THROWS_AS(hcluster({{0.0, 0.0}}), TooFew);
}

TEST_CASE("dendrogram heights are non-decreasing and sizes add up") {
    std::mt19937_64 rng(888);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = 2 + testsupport::uniform_index(rng, 20);
        std::vector<StandardizedPoint> pts;
        for (std::size_t i = 0; i < n; ++i)
            pts.push_back({testsupport::uniform(rng, -3, 3), testsupport::uniform(rng, -3, 3)});
        const Dendrogram d = hcluster(pts);
        CHECK(d.merges.size() == n - 1);
        for (std::size_t i = 1; i < d.merges.size(); ++i)
            CHECK(d.merges[i].height >= d.merges[i - 1].height);
        CHECK(d.merges.back().size == int(n));
    }
}

TEST_CASE("Pearson correlations") {
    std::vector<ExperimentRecord> records;
    // x = diversity column 1,2,3 scaled into [0,1]; y = p_merged
    // constructed so diversity = 0.1, 0.2, 0.3 and p_merged = 0.2, 0.4, 0.6
    records.push_back(merged_record("a", 0.50, 0.40, 0.20));
    records.push_back(merged_record("b", 0.60, 0.40, 0.40));
    records.push_back(merged_record("c", 0.70, 0.40, 0.60));
    const auto m = correlation_matrix(records, {Attribute::Diversity, Attribute::PMerged});
    REQUIRE(m.labels == std::vector<std::string>{"diversity", "p_merged"});
    CHECK(m.values[0][0] == 1.0);
    CHECK(m.values[1][1] == 1.0);
    CHECK(*m.values[0][1] == doctest::Approx(1.0).epsilon(1e-9));

    // anti-correlated: p_merged falls as diversity rises
    records.clear();
    records.push_back(merged_record("a", 0.50, 0.40, 0.60));
    records.push_back(merged_record("b", 0.60, 0.40, 0.40));
    records.push_back(merged_record("c", 0.70, 0.40, 0.20));
    const auto anti = correlation_matrix(records, {Attribute::Diversity, Attribute::PMerged});
    CHECK(*anti.values[0][1] == doctest::Approx(-1.0).epsilon(1e-9));

    // the hand-computed r = 0.5 case: x = 1,2,3 and y = 1,3,2 via p_merged
    records.clear();
    records.push_back(merged_record("a", 0.50, 0.40, 0.10));
    records.push_back(merged_record("b", 0.60, 0.40, 0.30));
    records.push_back(merged_record("c", 0.70, 0.40, 0.20));
    const auto half = correlation_matrix(records, {Attribute::Diversity, Attribute::PMerged});
    CHECK(*half.values[0][1] == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("constant columns are reported as absent with a unit diagonal") {
    std::vector<ExperimentRecord> records = {
        merged_record("a", 0.5, 0.4, 0.2),
        merged_record("b", 0.6, 0.4, 0.4),
        merged_record("c", 0.7, 0.4, 0.6),
    };
    // every record has sft = false -> constant column
    const auto m = correlation_matrix(records, {Attribute::Sft, Attribute::PMerged});
    CHECK(m.values[0][0] == 1.0);
    CHECK(!m.values[0][1].has_value());
    CHECK(!m.values[1][0].has_value());
    CHECK(*m.values[1][1] == 1.0);

    CHECK_THROWS_AS(correlation_matrix({merged_record("a", 0.5, 0.4, 0.2)}), TooFew);
}

TEST_CASE("correlation entries stay within [-1, 1] and the matrix is symmetric") {
    std::mt19937_64 rng(2024);
    std::vector<ExperimentRecord> records;
    for (int i = 0; i < 24; ++i) {
        ExperimentFlags flags;
        flags.sft = rng() % 2;
        flags.dpo = rng() % 2;
        flags.orpo = rng() % 2;
        flags.instruct_base = rng() % 2;
        records.push_back(merged_record("m" + std::to_string(i),
                                        testsupport::uniform(rng, 0.3, 0.9),
                                        testsupport::uniform(rng, 0.3, 0.9),
                                        testsupport::uniform(rng, 0.3, 0.9), flags));
    }
    const auto m = correlation_matrix(records);
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
        CHECK(m.values[i][i] == 1.0);
        for (std::size_t j = 0; j < m.labels.size(); ++j) {
            CHECK(m.values[i][j] == m.values[j][i]);
            if (m.values[i][j]) {
                CHECK(*m.values[i][j] <= 1.0);
                CHECK(*m.values[i][j] >= -1.0);
            }
        }
    }
}

TEST_CASE("build_report on the six-record fixture matches hand-computed values") {
    std::vector<ExperimentRecord> records = {
        merged_record("m1", 0.80, 0.60, 0.85),
        merged_record("m2", 0.70, 0.70, 0.70),
        merged_record("m3", 0.90, 0.50, 0.75),
        merged_record("m4", 0.60, 0.40, 0.72),
        merged_record("m5", 0.85, 0.75, 0.95),
        merged_record("m6", 0.55, 0.65, 0.45),
    };
    const AnalysisReport report = build_report(records, 2, 11);

    REQUIRE(report.records.size() == 6);
    const double expected_e[] = {0.70, 0.70, 0.70, 0.50, 0.80, 0.60};
    const double expected_div[] = {0.20, 0.00, 0.40, 0.20, 0.10, 0.10};
    const double expected_imp[] = {0.05, 0.00, -0.15, 0.12, 0.10, -0.20};
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(std::abs(*report.records[i].expected - expected_e[i]) < 1e-9);
        CHECK(std::abs(*report.records[i].diversity - expected_div[i]) < 1e-9);
        CHECK(std::abs(*report.records[i].improvement - expected_imp[i]) < 1e-9);
    }

    // ranking: m4 (+0.12), m5 (+0.10), m1 (+0.05), m2 (0), m3 (-0.15), m6 (-0.20)
    REQUIRE(report.ranking.size() == 6);
    CHECK(report.ranking[0].first == "m4");
    CHECK(report.ranking[1].first == "m5");
    CHECK(report.ranking[2].first == "m1");
    CHECK(report.ranking[3].first == "m2");
    CHECK(report.ranking[4].first == "m3");
    CHECK(report.ranking[5].first == "m6");

    // standardization cross-checked against a direct computation
    REQUIRE(report.standardized.size() == 6);
    const double mu_e = (0.70 + 0.70 + 0.70 + 0.50 + 0.80 + 0.60) / 6.0;
    double ss = 0;
    for (double e : expected_e) ss += (e - mu_e) * (e - mu_e);
    const double sigma_e = std::sqrt(ss / 6.0);
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(std::abs(report.standardized[i].z_e - (expected_e[i] - mu_e) / sigma_e) < 1e-9);
    CHECK(std::abs(report.standardized[3].z_e + 1.76776695296637) < 1e-9);

    CHECK(report.clusters.has_value());
    CHECK(report.dendrogram.has_value());
    CHECK(report.correlations.has_value());
    CHECK(report.warnings.empty());
}

TEST_CASE("build_report degrades gracefully") {
    SUBCASE("empty input") {
        const AnalysisReport report = build_report({});
        CHECK(report.records.empty());
        CHECK(report.merged_ids.empty());
        CHECK(report.standardized.empty());
        CHECK(!report.clusters.has_value());
        CHECK(!report.dendrogram.has_value());
        CHECK(!report.correlations.has_value());
        CHECK(report.ranking.empty());
    }
    SUBCASE("non-merged records carry no derived metrics") {
        ExperimentRecord baseline;
        baseline.model_id = "baseline";
        baseline.p_merged = 0.7;
        const AnalysisReport report = build_report({baseline});
        REQUIRE(report.records.size() == 1);
        CHECK(!report.records[0].expected.has_value());
        CHECK(report.merged_ids.empty());
    }
    SUBCASE("identical expected scores skip standardization with a warning") {
        const AnalysisReport report = build_report({
            merged_record("a", 0.6, 0.8, 0.75),
            merged_record("b", 0.7, 0.7, 0.80),
        });
        CHECK(report.standardized.empty());
        CHECK(!report.warnings.empty());
        CHECK(report.ranking.size() == 2);
    }
}

TEST_CASE("report JSON round-trips through its own reader") {
    std::vector<ExperimentRecord> records = {
        merged_record("m1", 0.80, 0.60, 0.85),
        merged_record("m2", 0.70, 0.70, 0.70),
        merged_record("m3", 0.90, 0.50, 0.75),
        merged_record("m4", 0.60, 0.40, 0.72),
    };
    const AnalysisReport report = build_report(records, 2, 3);
    const std::string text = report_json(report);
    const AnalysisReport back = read_report_json(text);

    CHECK(back.k == report.k);
    CHECK(back.seed == report.seed);
    CHECK(back.merged_ids == report.merged_ids);
    CHECK(back.standardized == report.standardized);
    CHECK(back.ranking == report.ranking);
    CHECK(back.warnings == report.warnings);
    REQUIRE(back.clusters.has_value() == report.clusters.has_value());
    if (report.clusters) {
        CHECK(back.clusters->assignments == report.clusters->assignments);
        CHECK(back.clusters->centroids == report.clusters->centroids);
        CHECK(back.clusters->inertia == report.clusters->inertia);
    }
    CHECK(back.dendrogram == report.dendrogram);
    REQUIRE(back.correlations.has_value());
    CHECK(back.correlations->labels == report.correlations->labels);
    CHECK(back.correlations->values == report.correlations->values);
    // serialization is deterministic
    CHECK(report_json(back) == text);
}

TEST_CASE("experiment tables load from CSV") {
    const std::string csv =
        "model_id,parent1_id,parent2_id,p_merged,p1,p2,sft,dpo,orpo,merged,instruct_base\n"
        "merged-1,parentA,parentB,0.85,0.8,0.6,1,0,1,1,1\n"
        "baseline,,,0.7,,,0,0,0,0,1\n";
    std::istringstream in(csv);
    const auto records = load_records(in);
    REQUIRE(records.size() == 2);
    CHECK(records[0].model_id == "merged-1");
    CHECK(records[0].parent1_id == "parentA");
    CHECK(records[0].p1 == 0.8);
    CHECK(records[0].flags.sft);
    CHECK(!records[0].flags.dpo);
    CHECK(records[0].flags.orpo);
    CHECK(records[0].flags.merged);
    CHECK(!records[1].parent1_id.has_value());
    CHECK(!records[1].flags.merged);

    SUBCASE("merged rows require parent scores") {
        const std::string bad =
            "model_id,parent1_id,parent2_id,p_merged,p1,p2,sft,dpo,orpo,merged,instruct_base\n"
            "broken,a,b,0.85,,,0,0,0,1,0\n";
        std::istringstream bad_in(bad);
        CHECK_THROWS_AS(load_records(bad_in), TableError);
    }
    SUBCASE("probabilities outside the unit interval are rejected") {
        const std::string bad =
            "model_id,parent1_id,parent2_id,p_merged,p1,p2,sft,dpo,orpo,merged,instruct_base\n"
            "broken,a,b,1.85,0.5,0.5,0,0,0,1,0\n";
        std::istringstream bad_in(bad);
        CHECK_THROWS_AS(load_records(bad_in), TableError);
    }
    SUBCASE("empty table") {
        std::istringstream empty("");
        CHECK(load_records(empty).empty());
    }
}

TEST_CASE("companion CSVs cover the report sections") {
    std::vector<ExperimentRecord> records = {
        merged_record("m1", 0.80, 0.60, 0.85),
        merged_record("m2", 0.70, 0.70, 0.70),
        merged_record("m3", 0.90, 0.50, 0.75),
        merged_record("m4", 0.60, 0.40, 0.72),
    };
    const AnalysisReport report = build_report(records, 2, 3);
    CHECK(scatter_csv(report).find("model_id,expected,actual,z_expected,z_actual,cluster") == 0);
    CHECK(ranking_csv(report).find("m4,") != std::string::npos);
    CHECK(correlation_csv(report).find("diversity") != std::string::npos);
    const std::string dendro = dendrogram_csv(report);
    CHECK(std::count(dendro.begin(), dendro.end(), '\n') == 4);  // header + 3 merges
}
