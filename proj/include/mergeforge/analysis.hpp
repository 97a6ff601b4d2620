#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mergeforge::analysis {

struct AnalysisError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct OutOfRange : AnalysisError {
    using AnalysisError::AnalysisError;
};
struct MissingParentScores : AnalysisError {
    using AnalysisError::AnalysisError;
};
struct ZeroVariance : AnalysisError {
    using AnalysisError::AnalysisError;
};
struct TooFew : AnalysisError {
    using AnalysisError::AnalysisError;
};
struct BadK : AnalysisError {
    using AnalysisError::AnalysisError;
};
struct TableError : AnalysisError {
    TableError(int row_, const std::string& field_, const std::string& message)
        : AnalysisError("row " + std::to_string(row_) + ", field \"" + field_ +
                        "\": " + message),
          row(row_),
          field(field_) {}
    int row;
    std::string field;
};

struct ExperimentFlags {
    bool sft = false;
    bool dpo = false;
    bool orpo = false;
    bool merged = false;
    bool instruct_base = false;
    bool operator==(const ExperimentFlags&) const = default;
};

// One experiment row: merged-model score plus optional parent scores.
struct ExperimentRecord {
    std::string model_id;
    std::optional<std::string> parent1_id;
    std::optional<std::string> parent2_id;
    double p_merged = 0.0;
    std::optional<double> p1;
    std::optional<double> p2;
    ExperimentFlags flags;
    bool operator==(const ExperimentRecord&) const = default;
};

// (Z_E, Z_A): standardized expected and actual scores.
struct StandardizedPoint {
    double z_e = 0.0;
    double z_a = 0.0;
    bool operator==(const StandardizedPoint&) const = default;
};

// (P1 + P2) / 2.
double expected_score(double p1, double p2);

// P_merged - max(P1, P2); negative means the merge underperforms its best
// parent.
double performance_improvement(double p_merged, double p1, double p2);

// |P1 - P2|.
double diversity(double p1, double p2);

// Records sorted by improvement, best first; ties break on model_id.
std::vector<std::pair<std::string, double>> deviation_ranking(
    const std::vector<ExperimentRecord>& records);

// Population z-scores: (x - mean) / sigma with sigma = sqrt(sum((x-m)^2)/N).
std::vector<double> standardize(const std::vector<double>& values);

struct KMeansResult {
    std::vector<int> assignments;
    std::vector<StandardizedPoint> centroids;
    double inertia = 0.0;
};

// Per-restart inertia sequences, for inspecting Lloyd convergence.
struct KMeansTrace {
    std::vector<std::vector<double>> inertia_per_iteration;
};

// Lloyd's algorithm with seeded k-means++ initialization, deterministic for
// a fixed seed. Runs n_init restarts and keeps the lowest-inertia result;
// clusters that empty out are re-seeded to the farthest point.
KMeansResult kmeans(const std::vector<StandardizedPoint>& points, int k, std::uint64_t seed,
                    int n_init = 10, int max_iterations = 300, KMeansTrace* trace = nullptr);

// Agglomerative merge tree. Ids 0..n_leaves-1 are leaves; merge i creates
// node id n_leaves+i. Heights are single-linkage Euclidean distances.
struct Dendrogram {
    struct Merge {
        int left = 0;
        int right = 0;
        double height = 0.0;
        int size = 0;
        bool operator==(const Merge&) const = default;
    };
    int n_leaves = 0;
    std::vector<Merge> merges;
    bool operator==(const Dendrogram&) const = default;
};

// Single-linkage agglomerative clustering; distance ties break toward the
// pair containing the smallest leaf index.
Dendrogram hcluster(const std::vector<StandardizedPoint>& points);

enum class Attribute { Diversity, Improvement, Sft, DpoOrpo, InstructBase, PMerged };

std::vector<Attribute> all_attributes();
const char* attribute_name(Attribute a);

// Pearson correlations over the selected attribute columns of the merged
// records (flags encoded 0/1, dpo and orpo folded into one column). Entries
// involving a constant column are absent; the diagonal is exactly 1.
struct CorrelationMatrix {
    std::vector<std::string> labels;
    std::vector<std::vector<std::optional<double>>> values;
};
CorrelationMatrix correlation_matrix(const std::vector<ExperimentRecord>& records,
                                     const std::vector<Attribute>& attributes = all_attributes());

// Per-record derived metrics; the optionals are absent for non-merged rows.
struct RecordMetrics {
    std::string model_id;
    double p_merged = 0.0;
    std::optional<double> p1;
    std::optional<double> p2;
    std::optional<double> expected;
    std::optional<double> improvement;
    std::optional<double> diversity;
    ExperimentFlags flags;
};

struct AnalysisReport {
    std::vector<RecordMetrics> records;  // input order
    std::vector<std::string> merged_ids;
    std::vector<StandardizedPoint> standardized;  // parallel to merged_ids
    std::optional<KMeansResult> clusters;
    std::optional<Dendrogram> dendrogram;
    std::optional<CorrelationMatrix> correlations;
    std::vector<std::pair<std::string, double>> ranking;
    int k = 2;
    std::uint64_t seed = 0;
    std::vector<std::string> warnings;
};

// Aggregates all analytics. Sections that need more data than the input
// provides (standardization, clustering, correlations) are omitted with a
// warning instead of failing.
AnalysisReport build_report(const std::vector<ExperimentRecord>& records, int k = 2,
                            std::uint64_t seed = 0);

// Score table: CSV with header model_id,parent1_id,parent2_id,p_merged,p1,
// p2,sft,dpo,orpo,merged,instruct_base (booleans 0/1, absent parents empty).
std::vector<ExperimentRecord> load_records(std::istream& in);
std::vector<ExperimentRecord> load_records(const std::filesystem::path& path);

std::string report_json(const AnalysisReport& report);
AnalysisReport read_report_json(const std::string& text);

// Companion CSVs for external plotting.
std::string scatter_csv(const AnalysisReport& report);
std::string ranking_csv(const AnalysisReport& report);
std::string correlation_csv(const AnalysisReport& report);
std::string dendrogram_csv(const AnalysisReport& report);

}  // namespace mergeforge::analysis
