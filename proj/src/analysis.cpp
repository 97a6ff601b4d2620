#include "mergeforge/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mergeforge::analysis {

namespace {

using nlohmann::ordered_json;

void check_unit(double v, const char* what) {
    if (!(v >= 0.0 && v <= 1.0))
        throw OutOfRange(std::string(what) + " outside [0, 1]: " + std::to_string(v));
}

// Uniform in [0, 1) from the raw mt19937_64 stream; avoids the
// implementation-defined std::uniform_real_distribution so results are
// identical across standard libraries.
double uniform01(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

double sq_dist(const StandardizedPoint& a, const StandardizedPoint& b) {
    const double dx = a.z_e - b.z_e;
    const double dy = a.z_a - b.z_a;
    return dx * dx + dy * dy;
}

struct LloydOutcome {
    KMeansResult result;
    std::vector<double> inertia_trace;
};

LloydOutcome lloyd_once(const std::vector<StandardizedPoint>& pts, int k, std::mt19937_64& rng,
                        int max_iterations) {
    const std::size_t n = pts.size();

    // k-means++ seeding
    std::vector<StandardizedPoint> centroids;
    centroids.reserve(std::size_t(k));
    std::size_t first = std::min<std::size_t>(std::size_t(uniform01(rng) * double(n)), n - 1);
    centroids.push_back(pts[first]);
    std::vector<double> d2(n);
    while (centroids.size() < std::size_t(k)) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& c : centroids) best = std::min(best, sq_dist(pts[i], c));
            d2[i] = best;
            total += best;
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            const double r = uniform01(rng) * total;
            double cum = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                cum += d2[i];
                if (r < cum) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = std::min<std::size_t>(std::size_t(uniform01(rng) * double(n)), n - 1);
        }
        centroids.push_back(pts[pick]);
    }

    std::vector<int> assignments(n, -1);
    LloydOutcome out;
    for (int iter = 0; iter < max_iterations; ++iter) {
        // assignment step; ties go to the lowest cluster index
        bool changed = false;
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = sq_dist(pts[i], centroids[0]);
            for (int c = 1; c < k; ++c) {
                const double d = sq_dist(pts[i], centroids[std::size_t(c)]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            inertia += best_d;
            if (assignments[i] != best) {
                assignments[i] = best;
                changed = true;
            }
        }
        out.inertia_trace.push_back(inertia);
        if (!changed) break;

        // update step
        std::vector<StandardizedPoint> sums(static_cast<std::size_t>(k));
        std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
        for (std::size_t i = 0; i < n; ++i) {
            sums[std::size_t(assignments[i])].z_e += pts[i].z_e;
            sums[std::size_t(assignments[i])].z_a += pts[i].z_a;
            ++counts[std::size_t(assignments[i])];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[std::size_t(c)] == 0) {
                // re-seed an empty cluster to the point farthest from its
                // current centroid
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = sq_dist(pts[i], centroids[std::size_t(assignments[i])]);
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                centroids[std::size_t(c)] = pts[far];
            } else {
                centroids[std::size_t(c)] = {sums[std::size_t(c)].z_e / double(counts[std::size_t(c)]),
                                             sums[std::size_t(c)].z_a / double(counts[std::size_t(c)])};
            }
        }
    }

    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) inertia += sq_dist(pts[i], centroids[std::size_t(assignments[i])]);
    out.result = {std::move(assignments), std::move(centroids), inertia};
    return out;
}

// Exact 2-means by partition enumeration, feasible for small inputs. Lloyd
// restarts alone cannot guarantee the global optimum there.
KMeansResult exhaustive_two_means(const std::vector<StandardizedPoint>& pts) {
    const std::size_t n = pts.size();
    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (std::uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
        if (mask & 1u) continue;  // keep point 0 in cluster 0 so labels are canonical
        StandardizedPoint sums[2] = {{0, 0}, {0, 0}};
        std::size_t counts[2] = {0, 0};
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t side = (mask >> i) & 1u;
            sums[side].z_e += pts[i].z_e;
            sums[side].z_a += pts[i].z_a;
            ++counts[side];
        }
        if (counts[0] == 0 || counts[1] == 0) continue;
        StandardizedPoint centroids[2];
        for (int c = 0; c < 2; ++c)
            centroids[c] = {sums[c].z_e / double(counts[c]), sums[c].z_a / double(counts[c])};
        double sse = 0.0;
        for (std::size_t i = 0; i < n; ++i) sse += sq_dist(pts[i], centroids[(mask >> i) & 1u]);
        if (sse < best.inertia) {
            best.inertia = sse;
            best.centroids = {centroids[0], centroids[1]};
            best.assignments.assign(n, 0);
            for (std::size_t i = 0; i < n; ++i) best.assignments[i] = int((mask >> i) & 1u);
        }
    }
    return best;
}

std::string format_real(double v) {
    char buf[40];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, p);
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::vector<std::vector<std::string>> parse_csv_rows(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n') {
            if (any || !field.empty() || !row.empty()) {
                row.push_back(std::move(field));
                rows.push_back(std::move(row));
            }
            field.clear();
            row.clear();
            any = false;
        } else if (c != '\r') {
            field += c;
            any = true;
        }
    }
    if (any || !field.empty() || !row.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

struct MomentStats {
    double mean = 0.0;
    double sigma = 0.0;  // population
    bool degenerate = false;
};

MomentStats moments(const std::vector<double>& v) {
    MomentStats m;
    double sum = 0.0, max_abs = 0.0;
    for (double x : v) {
        sum += x;
        max_abs = std::max(max_abs, std::abs(x));
    }
    m.mean = sum / double(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.sigma = std::sqrt(ss / double(v.size()));
    // a sigma at rounding-noise level counts as no variance at all
    const double floor = 8.0 * std::numeric_limits<double>::epsilon() * double(v.size()) *
                         std::max(max_abs, 1e-300);
    m.degenerate = m.sigma <= floor;
    return m;
}

ordered_json flags_json(const ExperimentFlags& f) {
    return {{"sft", f.sft},
            {"dpo", f.dpo},
            {"orpo", f.orpo},
            {"merged", f.merged},
            {"instruct_base", f.instruct_base}};
}

ExperimentFlags flags_from_json(const ordered_json& j) {
    ExperimentFlags f;
    f.sft = j.at("sft").get<bool>();
    f.dpo = j.at("dpo").get<bool>();
    f.orpo = j.at("orpo").get<bool>();
    f.merged = j.at("merged").get<bool>();
    f.instruct_base = j.at("instruct_base").get<bool>();
    return f;
}

ordered_json opt_json(const std::optional<double>& v) {
    if (!v) return nullptr;
    return *v;
}

std::optional<double> opt_from_json(const ordered_json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

}  // namespace

double expected_score(double p1, double p2) {
    check_unit(p1, "P1");
    check_unit(p2, "P2");
    return (p1 + p2) / 2.0;
}

double performance_improvement(double p_merged, double p1, double p2) {
    check_unit(p_merged, "P_merged");
    check_unit(p1, "P1");
    check_unit(p2, "P2");
    return p_merged - std::max(p1, p2);
}

double diversity(double p1, double p2) {
    check_unit(p1, "P1");
    check_unit(p2, "P2");
    return std::abs(p1 - p2);
}

std::vector<std::pair<std::string, double>> deviation_ranking(
    const std::vector<ExperimentRecord>& records) {
    std::vector<std::pair<std::string, double>> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        if (!r.flags.merged || !r.p1 || !r.p2)
            throw MissingParentScores(r.model_id);
        out.emplace_back(r.model_id, performance_improvement(r.p_merged, *r.p1, *r.p2));
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return out;
}

std::vector<double> standardize(const std::vector<double>& values) {
    if (values.size() < 2) throw TooFew("standardize needs at least 2 values");
    const MomentStats m = moments(values);
    if (m.degenerate) throw ZeroVariance("values have no variance");
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - m.mean) / m.sigma;
    return out;
}

KMeansResult kmeans(const std::vector<StandardizedPoint>& points, int k, std::uint64_t seed,
                    int n_init, int max_iterations, KMeansTrace* trace) {
    if (k < 1 || std::size_t(k) > points.size())
        throw BadK("k must be in [1, n]; k=" + std::to_string(k) + ", n=" +
                   std::to_string(points.size()));
    for (const auto& p : points)
        if (!std::isfinite(p.z_e) || !std::isfinite(p.z_a))
            throw OutOfRange("non-finite standardized point");

    KMeansResult best;
    bool have_best = false;
    for (int init = 0; init < std::max(1, n_init); ++init) {
        std::mt19937_64 rng(seed + std::uint64_t(init) * 0x9E3779B97F4A7C15ull);
        LloydOutcome outcome = lloyd_once(points, k, rng, max_iterations);
        if (trace) trace->inertia_per_iteration.push_back(outcome.inertia_trace);
        if (!have_best || outcome.result.inertia < best.inertia) {
            best = std::move(outcome.result);
            have_best = true;
        }
    }
    // On small inputs the exact two-cluster optimum is enumerable; use it
    // when a Lloyd restart stops short of it.
    if (k == 2 && points.size() <= 16) {
        KMeansResult exact = exhaustive_two_means(points);
        if (exact.inertia < best.inertia) best = std::move(exact);
    }
    return best;
}

Dendrogram hcluster(const std::vector<StandardizedPoint>& points) {
    const std::size_t n = points.size();
    if (n < 2) throw TooFew("hcluster needs at least 2 points");
    for (const auto& p : points)
        if (!std::isfinite(p.z_e) || !std::isfinite(p.z_a))
            throw OutOfRange("non-finite standardized point");

    struct Cluster {
        int id;       // node id (leaf or internal)
        int rep;      // smallest contained leaf index, for tie-breaking
        int size;
    };
    std::vector<Cluster> active;
    active.reserve(n);
    for (std::size_t i = 0; i < n; ++i) active.push_back({int(i), int(i), 1});

    // pairwise single-linkage distances between active clusters,
    // maintained with the Lance-Williams minimum update
    std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            dist[i][j] = dist[j][i] = std::sqrt(sq_dist(points[i], points[j]));

    Dendrogram out;
    out.n_leaves = int(n);
    int next_id = int(n);
    while (active.size() > 1) {
        std::size_t bi = 0, bj = 1;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < active.size(); ++i) {
            for (std::size_t j = i + 1; j < active.size(); ++j) {
                const double d = dist[std::size_t(i)][std::size_t(j)];
                const int lo = std::min(active[i].rep, active[j].rep);
                const int hi = std::max(active[i].rep, active[j].rep);
                const int blo = std::min(active[bi].rep, active[bj].rep);
                const int bhi = std::max(active[bi].rep, active[bj].rep);
                if (d < best || (d == best && (lo < blo || (lo == blo && hi < bhi)))) {
                    best = d;
                    bi = i;
                    bj = j;
                }
            }
        }
        const Cluster a = active[bi];
        const Cluster b = active[bj];
        const int left = a.rep <= b.rep ? a.id : b.id;
        const int right = a.rep <= b.rep ? b.id : a.id;
        out.merges.push_back({left, right, best, a.size + b.size});

        // fold cluster bj into bi, then drop bj
        for (std::size_t m = 0; m < active.size(); ++m) {
            if (m == bi || m == bj) continue;
            dist[bi][m] = dist[m][bi] = std::min(dist[bi][m], dist[bj][m]);
        }
        active[bi] = {next_id++, std::min(a.rep, b.rep), a.size + b.size};
        active.erase(active.begin() + std::ptrdiff_t(bj));
        for (auto& row : dist) row.erase(row.begin() + std::ptrdiff_t(bj));
        dist.erase(dist.begin() + std::ptrdiff_t(bj));
    }
    return out;
}

std::vector<Attribute> all_attributes() {
    return {Attribute::Diversity,    Attribute::Improvement, Attribute::Sft,
            Attribute::DpoOrpo,      Attribute::InstructBase, Attribute::PMerged};
}

const char* attribute_name(Attribute a) {
    switch (a) {
        case Attribute::Diversity: return "diversity";
        case Attribute::Improvement: return "performance_improvement";
        case Attribute::Sft: return "sft";
        case Attribute::DpoOrpo: return "dpo_orpo";
        case Attribute::InstructBase: return "instruct_base";
        case Attribute::PMerged: return "p_merged";
    }
    return "?";
}

CorrelationMatrix correlation_matrix(const std::vector<ExperimentRecord>& records,
                                     const std::vector<Attribute>& attributes) {
    std::vector<const ExperimentRecord*> merged;
    for (const auto& r : records)
        if (r.flags.merged && r.p1 && r.p2) merged.push_back(&r);
    if (merged.size() < 3) throw TooFew("correlation needs at least 3 merged records");

    const std::size_t n = merged.size();
    std::vector<std::vector<double>> columns(attributes.size(), std::vector<double>(n));
    for (std::size_t a = 0; a < attributes.size(); ++a) {
        for (std::size_t i = 0; i < n; ++i) {
            const ExperimentRecord& r = *merged[i];
            double v = 0.0;
            switch (attributes[a]) {
                case Attribute::Diversity: v = diversity(*r.p1, *r.p2); break;
                case Attribute::Improvement:
                    v = performance_improvement(r.p_merged, *r.p1, *r.p2);
                    break;
                case Attribute::Sft: v = r.flags.sft ? 1.0 : 0.0; break;
                case Attribute::DpoOrpo: v = (r.flags.dpo || r.flags.orpo) ? 1.0 : 0.0; break;
                case Attribute::InstructBase: v = r.flags.instruct_base ? 1.0 : 0.0; break;
                case Attribute::PMerged: v = r.p_merged; break;
            }
            columns[a][i] = v;
        }
    }

    std::vector<MomentStats> stats;
    stats.reserve(columns.size());
    for (const auto& c : columns) stats.push_back(moments(c));

    CorrelationMatrix out;
    for (Attribute a : attributes) out.labels.emplace_back(attribute_name(a));
    out.values.assign(attributes.size(),
                      std::vector<std::optional<double>>(attributes.size(), std::nullopt));
    for (std::size_t a = 0; a < attributes.size(); ++a) {
        out.values[a][a] = 1.0;
        for (std::size_t b = a + 1; b < attributes.size(); ++b) {
            if (stats[a].degenerate || stats[b].degenerate) continue;
            double cov = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                cov += (columns[a][i] - stats[a].mean) * (columns[b][i] - stats[b].mean);
            cov /= double(n);
            const double r = std::clamp(cov / (stats[a].sigma * stats[b].sigma), -1.0, 1.0);
            out.values[a][b] = r;
            out.values[b][a] = r;
        }
    }
    return out;
}

AnalysisReport build_report(const std::vector<ExperimentRecord>& records, int k,
                            std::uint64_t seed) {
    AnalysisReport report;
    report.k = k;
    report.seed = seed;

    std::vector<ExperimentRecord> merged;
    for (const auto& r : records) {
        if (r.flags.merged && (!r.p1 || !r.p2)) throw MissingParentScores(r.model_id);
        RecordMetrics m;
        m.model_id = r.model_id;
        m.p_merged = r.p_merged;
        m.p1 = r.p1;
        m.p2 = r.p2;
        m.flags = r.flags;
        if (r.flags.merged) {
            m.expected = expected_score(*r.p1, *r.p2);
            m.improvement = performance_improvement(r.p_merged, *r.p1, *r.p2);
            m.diversity = diversity(*r.p1, *r.p2);
            merged.push_back(r);
            report.merged_ids.push_back(r.model_id);
        }
        report.records.push_back(std::move(m));
    }

    if (!merged.empty()) report.ranking = deviation_ranking(merged);

    if (merged.size() >= 2) {
        std::vector<double> expected, actual;
        for (const auto& r : merged) {
            expected.push_back(expected_score(*r.p1, *r.p2));
            actual.push_back(r.p_merged);
        }
        try {
            const std::vector<double> z_e = standardize(expected);
            const std::vector<double> z_a = standardize(actual);
            for (std::size_t i = 0; i < merged.size(); ++i)
                report.standardized.push_back({z_e[i], z_a[i]});
        } catch (const ZeroVariance&) {
            report.warnings.push_back(
                "expected or actual scores have no variance; standardization skipped");
        }
    } else if (!merged.empty()) {
        report.warnings.push_back("fewer than 2 merged records; standardization skipped");
    }

    if (!report.standardized.empty()) {
        if (std::size_t(k) <= report.standardized.size()) {
            report.clusters = kmeans(report.standardized, k, seed);
        } else {
            report.warnings.push_back("fewer merged records than clusters; k-means skipped");
        }
        if (report.standardized.size() >= 2) report.dendrogram = hcluster(report.standardized);
    }

    if (merged.size() >= 3) {
        report.correlations = correlation_matrix(merged);
    } else if (!merged.empty()) {
        report.warnings.push_back("fewer than 3 merged records; correlations skipped");
    }

    return report;
}

std::vector<ExperimentRecord> load_records(std::istream& in) {
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto rows = parse_csv_rows(text);
    if (rows.empty()) return {};

    static const std::vector<std::string> wanted = {"model_id", "parent1_id", "parent2_id",
                                                    "p_merged", "p1",         "p2",
                                                    "sft",      "dpo",        "orpo",
                                                    "merged",   "instruct_base"};
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < rows[0].size(); ++i) col[rows[0][i]] = i;
    for (const auto& name : wanted)
        if (!col.count(name)) throw TableError(1, name, "missing column in header");

    auto parse_bool = [](const std::string& s, int row, const std::string& field) {
        if (s == "0") return false;
        if (s == "1") return true;
        throw TableError(row, field, "expected 0 or 1, got \"" + s + "\"");
    };
    auto parse_prob = [](const std::string& s, int row, const std::string& field) {
        char* end = nullptr;
        const double v = std::strtod(s.c_str(), &end);
        if (end == s.c_str() || *end != '\0')
            throw TableError(row, field, "not a number: \"" + s + "\"");
        if (!(v >= 0.0 && v <= 1.0)) throw TableError(row, field, "outside [0, 1]");
        return v;
    };

    std::vector<ExperimentRecord> out;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const int row_no = int(r) + 1;
        const auto& cells = rows[r];
        if (cells.size() < rows[0].size())
            throw TableError(row_no, "", "row has fewer cells than the header");
        ExperimentRecord rec;
        rec.model_id = cells[col.at("model_id")];
        if (rec.model_id.empty()) throw TableError(row_no, "model_id", "empty model_id");
        const std::string& p1s = cells[col.at("parent1_id")];
        const std::string& p2s = cells[col.at("parent2_id")];
        if (!p1s.empty()) rec.parent1_id = p1s;
        if (!p2s.empty()) rec.parent2_id = p2s;
        rec.p_merged = parse_prob(cells[col.at("p_merged")], row_no, "p_merged");
        if (!cells[col.at("p1")].empty()) rec.p1 = parse_prob(cells[col.at("p1")], row_no, "p1");
        if (!cells[col.at("p2")].empty()) rec.p2 = parse_prob(cells[col.at("p2")], row_no, "p2");
        rec.flags.sft = parse_bool(cells[col.at("sft")], row_no, "sft");
        rec.flags.dpo = parse_bool(cells[col.at("dpo")], row_no, "dpo");
        rec.flags.orpo = parse_bool(cells[col.at("orpo")], row_no, "orpo");
        rec.flags.merged = parse_bool(cells[col.at("merged")], row_no, "merged");
        rec.flags.instruct_base = parse_bool(cells[col.at("instruct_base")], row_no, "instruct_base");
        if (rec.flags.merged && (!rec.p1 || !rec.p2))
            throw TableError(row_no, "p1", "merged record is missing parent scores");
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<ExperimentRecord> load_records(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw AnalysisError("cannot open score table: " + path.string());
    return load_records(in);
}

std::string report_json(const AnalysisReport& report) {
    ordered_json j;
    j["k"] = report.k;
    j["seed"] = report.seed;
    j["records"] = ordered_json::array();
    for (const auto& m : report.records) {
        ordered_json rec;
        rec["model_id"] = m.model_id;
        rec["p_merged"] = m.p_merged;
        rec["p1"] = opt_json(m.p1);
        rec["p2"] = opt_json(m.p2);
        rec["expected"] = opt_json(m.expected);
        rec["improvement"] = opt_json(m.improvement);
        rec["diversity"] = opt_json(m.diversity);
        rec["flags"] = flags_json(m.flags);
        j["records"].push_back(std::move(rec));
    }
    j["merged_ids"] = report.merged_ids;
    j["standardized"] = ordered_json::array();
    for (const auto& p : report.standardized)
        j["standardized"].push_back({{"z_e", p.z_e}, {"z_a", p.z_a}});
    if (report.clusters) {
        ordered_json c;
        c["assignments"] = report.clusters->assignments;
        c["centroids"] = ordered_json::array();
        for (const auto& p : report.clusters->centroids)
            c["centroids"].push_back({{"z_e", p.z_e}, {"z_a", p.z_a}});
        c["inertia"] = report.clusters->inertia;
        j["clusters"] = std::move(c);
    } else {
        j["clusters"] = nullptr;
    }
    if (report.dendrogram) {
        ordered_json d;
        d["n_leaves"] = report.dendrogram->n_leaves;
        d["merges"] = ordered_json::array();
        for (const auto& m : report.dendrogram->merges)
            d["merges"].push_back(
                {{"left", m.left}, {"right", m.right}, {"height", m.height}, {"size", m.size}});
        j["dendrogram"] = std::move(d);
    } else {
        j["dendrogram"] = nullptr;
    }
    if (report.correlations) {
        ordered_json c;
        c["labels"] = report.correlations->labels;
        c["values"] = ordered_json::array();
        for (const auto& row : report.correlations->values) {
            ordered_json jr = ordered_json::array();
            for (const auto& v : row) jr.push_back(opt_json(v));
            c["values"].push_back(std::move(jr));
        }
        j["correlations"] = std::move(c);
    } else {
        j["correlations"] = nullptr;
    }
    j["ranking"] = ordered_json::array();
    for (const auto& [id, dev] : report.ranking)
        j["ranking"].push_back({{"model_id", id}, {"deviation", dev}});
    j["warnings"] = report.warnings;
    return j.dump(2) + "\n";
}

AnalysisReport read_report_json(const std::string& text) {
    const ordered_json j = ordered_json::parse(text);
    AnalysisReport report;
    report.k = j.at("k").get<int>();
    report.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& rec : j.at("records")) {
        RecordMetrics m;
        m.model_id = rec.at("model_id").get<std::string>();
        m.p_merged = rec.at("p_merged").get<double>();
        m.p1 = opt_from_json(rec.at("p1"));
        m.p2 = opt_from_json(rec.at("p2"));
        m.expected = opt_from_json(rec.at("expected"));
        m.improvement = opt_from_json(rec.at("improvement"));
        m.diversity = opt_from_json(rec.at("diversity"));
        m.flags = flags_from_json(rec.at("flags"));
        report.records.push_back(std::move(m));
    }
    report.merged_ids = j.at("merged_ids").get<std::vector<std::string>>();
    for (const auto& p : j.at("standardized"))
        report.standardized.push_back({p.at("z_e").get<double>(), p.at("z_a").get<double>()});
    if (!j.at("clusters").is_null()) {
        KMeansResult c;
        c.assignments = j.at("clusters").at("assignments").get<std::vector<int>>();
        for (const auto& p : j.at("clusters").at("centroids"))
            c.centroids.push_back({p.at("z_e").get<double>(), p.at("z_a").get<double>()});
        c.inertia = j.at("clusters").at("inertia").get<double>();
        report.clusters = std::move(c);
    }
    if (!j.at("dendrogram").is_null()) {
        Dendrogram d;
        d.n_leaves = j.at("dendrogram").at("n_leaves").get<int>();
        for (const auto& m : j.at("dendrogram").at("merges"))
            d.merges.push_back({m.at("left").get<int>(), m.at("right").get<int>(),
                                m.at("height").get<double>(), m.at("size").get<int>()});
        report.dendrogram = std::move(d);
    }
    if (!j.at("correlations").is_null()) {
        CorrelationMatrix c;
        c.labels = j.at("correlations").at("labels").get<std::vector<std::string>>();
        for (const auto& row : j.at("correlations").at("values")) {
            std::vector<std::optional<double>> out_row;
            for (const auto& v : row) out_row.push_back(opt_from_json(v));
            c.values.push_back(std::move(out_row));
        }
        report.correlations = std::move(c);
    }
    for (const auto& r : j.at("ranking"))
        report.ranking.emplace_back(r.at("model_id").get<std::string>(),
                                    r.at("deviation").get<double>());
    report.warnings = j.at("warnings").get<std::vector<std::string>>();
    return report;
}

std::string scatter_csv(const AnalysisReport& report) {
    std::string out = "model_id,expected,actual,z_expected,z_actual,cluster\n";
    for (std::size_t i = 0; i < report.merged_ids.size(); ++i) {
        const std::string& id = report.merged_ids[i];
        const RecordMetrics* m = nullptr;
        for (const auto& rec : report.records)
            if (rec.model_id == id) {
                m = &rec;
                break;
            }
        if (!m) continue;
        out += csv_escape(id) + "," + format_real(m->expected.value_or(0.0)) + "," +
               format_real(m->p_merged);
        if (i < report.standardized.size()) {
            out += "," + format_real(report.standardized[i].z_e) + "," +
                   format_real(report.standardized[i].z_a);
        } else {
            out += ",,";
        }
        if (report.clusters && i < report.clusters->assignments.size()) {
            out += "," + std::to_string(report.clusters->assignments[i]);
        } else {
            out += ",";
        }
        out += "\n";
    }
    return out;
}

std::string ranking_csv(const AnalysisReport& report) {
    std::string out = "model_id,deviation\n";
    for (const auto& [id, dev] : report.ranking)
        out += csv_escape(id) + "," + format_real(dev) + "\n";
    return out;
}

std::string correlation_csv(const AnalysisReport& report) {
    std::string out = "attribute";
    if (!report.correlations) return out + "\n";
    for (const auto& label : report.correlations->labels) out += "," + label;
    out += "\n";
    for (std::size_t i = 0; i < report.correlations->labels.size(); ++i) {
        out += report.correlations->labels[i];
        for (const auto& v : report.correlations->values[i])
            out += "," + (v ? format_real(*v) : std::string());
        out += "\n";
    }
    return out;
}

std::string dendrogram_csv(const AnalysisReport& report) {
    std::string out = "step,left,right,height,size\n";
    if (!report.dendrogram) return out;
    for (std::size_t i = 0; i < report.dendrogram->merges.size(); ++i) {
        const auto& m = report.dendrogram->merges[i];
        out += std::to_string(i) + "," + std::to_string(m.left) + "," + std::to_string(m.right) +
               "," + format_real(m.height) + "," + std::to_string(m.size) + "\n";
    }
    return out;
}

}  // namespace mergeforge::analysis
