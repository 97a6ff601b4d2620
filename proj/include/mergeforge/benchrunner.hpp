#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mergeforge::benchrunner {

struct BenchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SchemaError : BenchError {
    SchemaError(int row_, const std::string& field_, const std::string& message)
        : BenchError("row " + std::to_string(row_) + ", field \"" + field_ + "\": " + message),
          row(row_),
          field(field_) {}
    int row;
    std::string field;
};
struct RoleOrderError : BenchError {
    using BenchError::BenchError;
};
struct UnknownQuestionId : BenchError {
    using BenchError::BenchError;
};
struct ZeroBaseline : BenchError {
    using BenchError::BenchError;
};
struct EmptyInput : BenchError {
    using BenchError::BenchError;
};
struct TranscriptError : BenchError {
    using BenchError::BenchError;
};

enum class QType { MC, TF };

// One benchmark item. MC text carries its answer choices inline.
struct Question {
    std::string id;
    std::string text;
    QType qtype = QType::MC;
    char answer_key = 'A';  // MC: A-D, TF: T/F
    std::string category;
    std::string assessment_area;
    std::string reference;

    bool operator==(const Question&) const = default;
};

struct GenerationConfig {
    double temperature = 0.0;
    int top_k = 0;
    double top_p = 1.0;
    double repetition_penalty = 1.0;
    int max_tokens = 16;

    // Deterministic scoring setup (greedy, T=0).
    static GenerationConfig benchmark_preset() { return {0.0, 0, 1.0, 1.0, 16}; }
    // Open-ended multi-turn conversation setup.
    static GenerationConfig conversation_preset() { return {1.0, 512, 0.9, 1.1, 1024}; }
};

// Raw model responses keyed by question id.
struct Transcript {
    std::string model_id;
    std::vector<std::pair<std::string, std::string>> entries;
};

struct CategoryScore {
    std::uint64_t correct = 0;
    std::uint64_t total = 0;
    double accuracy = 0.0;
    bool operator==(const CategoryScore&) const = default;
};

struct ScoreReport {
    std::string model_id;
    std::uint64_t correct = 0;
    std::uint64_t total = 0;
    double overall_accuracy = 0.0;
    std::map<std::string, CategoryScore> per_category;
    std::map<std::string, CategoryScore> per_qtype;  // keys "MC", "TF"
    std::uint64_t invalid_count = 0;
};

// Question banks: CSV with header id,question,qtype,answer,category,
// assessment_area,reference, or JSON-lines with the same field names
// (sniffed from the first non-space byte).
std::vector<Question> load_questions(std::istream& in);
std::vector<Question> load_questions(const std::filesystem::path& path);

// The fixed scoring prompt around the question text.
std::string build_prompt(const Question& q);

enum class ChatFamily { Llama, Mistral, SmolLM };

// Byte-exact chat-template rendering. `turns` alternate user/assistant and
// must start with a user message; when the last turn is a user message the
// output ends with the assistant generation cue.
std::string render_chat(ChatFamily family, const std::string& system,
                        const std::vector<std::string>& turns);

// Reduces a raw response to a single answer letter, or nullopt when no rule
// applies (graded as incorrect). Strips surrounding whitespace and
// .()":' punctuation, uppercases, accepts a leading option letter, and maps
// leading TRUE/FALSE for TF questions.
std::optional<char> normalize_answer(std::string_view raw, QType qtype);

// Grades a transcript against the bank; bank questions without a response
// (or with an unnormalizable one) count as incorrect and raise invalid_count.
ScoreReport grade(const Transcript& tr, const std::vector<Question>& bank);

// (p - baseline) / baseline.
double relative_improvement(double p, double baseline);

// Arithmetic mean of per-benchmark accuracies.
double average_scores(const std::vector<double>& scores);

// Transcript files: JSON-lines, a leading {"model_id": ...} header object
// then one {"id": ..., "response": ...} per line.
Transcript read_transcript(std::istream& in);
Transcript read_transcript(const std::filesystem::path& path);
void write_transcript(const Transcript& tr, std::ostream& out);

std::string score_report_json(const ScoreReport& report);
std::string score_report_csv(const ScoreReport& report);

}  // namespace mergeforge::benchrunner
