#include "mergeforge/benchrunner.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mergeforge::benchrunner {

namespace {

using nlohmann::ordered_json;

// RFC 4180 CSV: quoted fields may contain commas, quotes ("") and newlines.
std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool any = false;
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
        switch (c) {
            case '"':
                quoted = true;
                any = true;
                break;
            case ',':
                row.push_back(std::move(field));
                field.clear();
                any = true;
                break;
            case '\r':
                break;
            case '\n':
                if (any || !field.empty() || !row.empty()) {
                    row.push_back(std::move(field));
                    rows.push_back(std::move(row));
                }
                field.clear();
                row.clear();
                any = false;
                break;
            default:
                field += c;
                any = true;
                break;
        }
    }
    if (any || !field.empty() || !row.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
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

std::string format_real(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, p);
}

void check_question(Question& q, int row) {
    if (q.id.empty()) throw SchemaError(row, "id", "empty id");
    if (q.qtype == QType::MC) {
        if (q.answer_key < 'A' || q.answer_key > 'D')
            throw SchemaError(row, "answer", "MC answer must be A-D");
    } else {
        if (q.answer_key != 'T' && q.answer_key != 'F')
            throw SchemaError(row, "answer", "TF answer must be T or F");
    }
}

QType parse_qtype(const std::string& s, int row) {
    std::string up = s;
    std::transform(up.begin(), up.end(), up.begin(),
                   [](unsigned char c) { return char(std::toupper(c)); });
    if (up == "MC") return QType::MC;
    if (up == "TF") return QType::TF;
    throw SchemaError(row, "qtype", "expected MC or TF, got \"" + s + "\"");
}

char parse_answer(const std::string& s, int row) {
    if (s.size() != 1) throw SchemaError(row, "answer", "expected a single letter");
    return char(std::toupper(static_cast<unsigned char>(s[0])));
}

std::vector<Question> load_questions_csv(const std::string& text) {
    const auto rows = parse_csv(text);
    if (rows.empty()) return {};

    static const std::vector<std::string> wanted = {
        "id", "question", "qtype", "answer", "category", "assessment_area", "reference"};
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < rows[0].size(); ++i) col[rows[0][i]] = i;
    for (const auto& name : wanted)
        if (!col.count(name)) throw SchemaError(1, name, "missing column in header");

    std::vector<Question> out;
    std::set<std::string> seen;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const int row_no = int(r) + 1;
        const auto& cells = rows[r];
        if (cells.size() < rows[0].size())
            throw SchemaError(row_no, "", "row has fewer cells than the header");
        Question q;
        q.id = cells[col.at("id")];
        q.text = cells[col.at("question")];
        q.qtype = parse_qtype(cells[col.at("qtype")], row_no);
        q.answer_key = parse_answer(cells[col.at("answer")], row_no);
        q.category = cells[col.at("category")];
        q.assessment_area = cells[col.at("assessment_area")];
        q.reference = cells[col.at("reference")];
        check_question(q, row_no);
        if (!seen.insert(q.id).second) throw SchemaError(row_no, "id", "duplicate id: " + q.id);
        out.push_back(std::move(q));
    }
    return out;
}

std::vector<Question> load_questions_jsonl(const std::string& text) {
    std::vector<Question> out;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int row_no = 0;
    while (std::getline(in, line)) {
        ++row_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const ordered_json j = ordered_json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw SchemaError(row_no, "", "line is not a JSON object");
        auto str = [&](const char* field, bool required) -> std::string {
            auto it = j.find(field);
            if (it == j.end()) {
                if (required) throw SchemaError(row_no, field, "missing field");
                return "";
            }
            if (!it->is_string()) throw SchemaError(row_no, field, "not a string");
            return it->get<std::string>();
        };
        Question q;
        q.id = str("id", true);
        q.text = str("question", true);
        q.qtype = parse_qtype(str("qtype", true), row_no);
        q.answer_key = parse_answer(str("answer", true), row_no);
        q.category = str("category", false);
        q.assessment_area = str("assessment_area", false);
        q.reference = str("reference", false);
        check_question(q, row_no);
        if (!seen.insert(q.id).second) throw SchemaError(row_no, "id", "duplicate id: " + q.id);
        out.push_back(std::move(q));
    }
    return out;
}

}  // namespace

std::vector<Question> load_questions(std::istream& in) {
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    if (text[first] == '{') return load_questions_jsonl(text);
    return load_questions_csv(text);
}

std::vector<Question> load_questions(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw BenchError("cannot open question bank: " + path.string());
    return load_questions(in);
}

std::string build_prompt(const Question& q) {
    return "You respond with one word or letter. Select the correct answer to this question: " +
           q.text + "\n\n" + "The correct answer is:";
}

std::string render_chat(ChatFamily family, const std::string& system,
                        const std::vector<std::string>& turns) {
    if (turns.empty()) throw RoleOrderError("conversation must start with a user message");
    const bool awaiting_assistant = turns.size() % 2 == 1;
    std::string out;
    switch (family) {
        case ChatFamily::Llama: {
            auto header = [](const char* role) {
                return std::string("<|start_header_id|>") + role + "<|end_header_id|>\n\n";
            };
            out = "<|begin_of_text|>" + header("system") + system + "<|eot_id|>\n";
            for (std::size_t i = 0; i < turns.size(); ++i) {
                const bool user = i % 2 == 0;
                out += header(user ? "user" : "assistant") + turns[i] + "<|eot_id|>\n";
                if (!user) out += "\n";  // blank line after each completed response
            }
            if (awaiting_assistant) out += header("assistant");
            break;
        }
        case ChatFamily::Mistral: {
            out = "<s>[INST] " + system + "\n\n" + turns[0] + "[/INST]";
            for (std::size_t i = 1; i < turns.size(); ++i) {
                if (i % 2 == 1) {
                    out += " " + turns[i] + "</s>";
                } else {
                    out += "[INST] " + turns[i] + "[/INST]";
                }
            }
            break;
        }
        case ChatFamily::SmolLM: {
            out = "<|im_start|>system\n" + system + "<|im_end|>\n";
            for (std::size_t i = 0; i < turns.size(); ++i) {
                const bool user = i % 2 == 0;
                out += std::string("<|im_start|>") + (user ? "user" : "assistant") + "\n" +
                       turns[i] + "<|im_end|>\n";
            }
            if (awaiting_assistant) out += "<|im_start|>assistant\n";
            break;
        }
    }
    return out;
}

std::optional<char> normalize_answer(std::string_view raw, QType qtype) {
    auto strippable = [](char c) {
        return std::isspace(static_cast<unsigned char>(c)) || c == '.' || c == '(' || c == ')' ||
               c == ':' || c == '"' || c == '\'';
    };
    std::size_t b = 0, e = raw.size();
    while (b < e && strippable(raw[b])) ++b;
    while (e > b && strippable(raw[e - 1])) --e;
    if (b == e) return std::nullopt;

    // leading whitespace-delimited token, stripped of the same punctuation
    std::size_t te = b;
    while (te < e && !std::isspace(static_cast<unsigned char>(raw[te]))) ++te;
    std::size_t tb = b;
    while (tb < te && strippable(raw[tb])) ++tb;
    while (te > tb && strippable(raw[te - 1])) --te;
    if (tb == te) return std::nullopt;

    std::string token(raw.substr(tb, te - tb));
    std::transform(token.begin(), token.end(), token.begin(),
                   [](unsigned char c) { return char(std::toupper(c)); });

    if (token.size() == 1) {
        const char c = token[0];
        if (qtype == QType::MC && c >= 'A' && c <= 'D') return c;
        if (qtype == QType::TF && (c == 'T' || c == 'F')) return c;
        return std::nullopt;
    }
    if (qtype == QType::TF) {
        if (token == "TRUE") return 'T';
        if (token == "FALSE") return 'F';
    }
    return std::nullopt;
}

ScoreReport grade(const Transcript& tr, const std::vector<Question>& bank) {
    std::map<std::string, const Question*> by_id;
    for (const Question& q : bank) by_id[q.id] = &q;

    std::map<std::string, const std::string*> responses;
    for (const auto& [id, response] : tr.entries) {
        if (!by_id.count(id)) throw UnknownQuestionId("transcript id not in bank: " + id);
        responses[id] = &response;
    }

    ScoreReport report;
    report.model_id = tr.model_id;
    auto bump = [](CategoryScore& s, bool correct) {
        ++s.total;
        if (correct) ++s.correct;
    };
    for (const Question& q : bank) {
        bool correct = false;
        const auto it = responses.find(q.id);
        if (it == responses.end()) {
            ++report.invalid_count;
        } else {
            const auto letter = normalize_answer(*it->second, q.qtype);
            if (!letter) {
                ++report.invalid_count;
            } else {
                correct = *letter == q.answer_key;
            }
        }
        ++report.total;
        if (correct) ++report.correct;
        bump(report.per_category[q.category], correct);
        bump(report.per_qtype[q.qtype == QType::MC ? "MC" : "TF"], correct);
    }
    auto finish = [](CategoryScore& s) {
        s.accuracy = s.total == 0 ? 0.0 : double(s.correct) / double(s.total);
    };
    for (auto& [k, s] : report.per_category) finish(s);
    for (auto& [k, s] : report.per_qtype) finish(s);
    report.overall_accuracy =
        report.total == 0 ? 0.0 : double(report.correct) / double(report.total);
    return report;
}

double relative_improvement(double p, double baseline) {
    if (!(baseline > 0.0)) throw ZeroBaseline("baseline must be positive");
    return (p - baseline) / baseline;
}

double average_scores(const std::vector<double>& scores) {
    if (scores.empty()) throw EmptyInput("no scores to average");
    double sum = 0.0;
    for (double s : scores) sum += s;
    return sum / double(scores.size());
}

Transcript read_transcript(std::istream& in) {
    Transcript tr;
    std::string line;
    std::set<std::string> seen;
    bool have_header = false;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const ordered_json j = ordered_json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw TranscriptError("line " + std::to_string(line_no) + ": not a JSON object");
        if (!have_header) {
            auto it = j.find("model_id");
            if (it == j.end() || !it->is_string())
                throw TranscriptError("first line must be a {\"model_id\": ...} header");
            tr.model_id = it->get<std::string>();
            have_header = true;
            continue;
        }
        auto id = j.find("id");
        auto response = j.find("response");
        if (id == j.end() || !id->is_string() || response == j.end() || !response->is_string())
            throw TranscriptError("line " + std::to_string(line_no) +
                                  ": expected {\"id\": ..., \"response\": ...}");
        if (!seen.insert(id->get<std::string>()).second)
            throw TranscriptError("duplicate question id: " + id->get<std::string>());
        tr.entries.emplace_back(id->get<std::string>(), response->get<std::string>());
    }
    if (!have_header) throw TranscriptError("transcript has no header line");
    return tr;
}

Transcript read_transcript(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw BenchError("cannot open transcript: " + path.string());
    return read_transcript(in);
}

void write_transcript(const Transcript& tr, std::ostream& out) {
    ordered_json header;
    header["model_id"] = tr.model_id;
    out << header.dump() << "\n";
    for (const auto& [id, response] : tr.entries) {
        ordered_json j;
        j["id"] = id;
        j["response"] = response;
        out << j.dump() << "\n";
    }
}

std::string score_report_json(const ScoreReport& report) {
    ordered_json j;
    j["model_id"] = report.model_id;
    j["correct"] = report.correct;
    j["total"] = report.total;
    j["overall_accuracy"] = report.overall_accuracy;
    j["invalid_count"] = report.invalid_count;
    auto section = [](const std::map<std::string, CategoryScore>& scores) {
        ordered_json out = ordered_json::object();
        for (const auto& [name, s] : scores) {
            out[name] = {{"correct", s.correct}, {"total", s.total}, {"accuracy", s.accuracy}};
        }
        return out;
    };
    j["per_category"] = section(report.per_category);
    j["per_qtype"] = section(report.per_qtype);
    return j.dump(2) + "\n";
}

std::string score_report_csv(const ScoreReport& report) {
    std::string out = "model_id,category,correct,total,accuracy\n";
    auto row = [&](const std::string& category, const CategoryScore& s) {
        out += csv_escape(report.model_id) + "," + csv_escape(category) + "," +
               std::to_string(s.correct) + "," + std::to_string(s.total) + "," +
               format_real(s.accuracy) + "\n";
    };
    row("overall", {report.correct, report.total, report.overall_accuracy});
    for (const auto& [name, s] : report.per_qtype) row("qtype:" + name, s);
    for (const auto& [name, s] : report.per_category) row(name, s);
    return out;
}

}  // namespace mergeforge::benchrunner
