#include "mergeforge/recipe.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mergeforge::recipe {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr int kMaxNestingDepth = 64;

struct Line {
    int number;  // 1-based
    int indent;
    std::string text;  // content after the indent
};

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string unquote(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                          (s.front() == '\'' && s.back() == '\'')))
        return s.substr(1, s.size() - 2);
    return s;
}

std::vector<Line> split_lines(const std::string& text) {
    std::vector<Line> lines;
    int number = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string raw = text.substr(start, end - start);
        ++number;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        int indent = 0;
        std::size_t i = 0;
        for (; i < raw.size() && raw[i] == ' '; ++i) ++indent;
        if (i < raw.size() && raw[i] == '\t')
            throw ParseError(number, "tab indentation is not supported");
        const std::string content = raw.substr(i);
        if (!content.empty() && content[0] != '#') lines.push_back({number, indent, content});
        if (end == text.size()) break;
        start = end + 1;
    }
    return lines;
}

// Scalar or flow list. Scalars stay strings; numeric interpretation happens
// at extraction so the YAML and JSON paths share it.
ordered_json parse_inline_value(const std::string& value, int line) {
    if (!value.empty() && value.front() == '[') {
        if (value.back() != ']') throw ParseError(line, "unterminated flow list");
        ordered_json arr = ordered_json::array();
        const std::string inner = value.substr(1, value.size() - 2);
        if (trim(inner).empty()) return arr;
        std::size_t start = 0;
        while (true) {
            std::size_t comma = inner.find(',', start);
            std::string item = trim(inner.substr(
                start, comma == std::string::npos ? std::string::npos : comma - start));
            if (item.find('[') != std::string::npos)
                throw ParseError(line, "nested flow lists are not supported");
            if (item.empty()) throw ParseError(line, "empty flow-list element");
            arr.push_back(unquote(item));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return arr;
    }
    return unquote(value);
}

// Splits "key: value" / "key:"; returns false when the line has no key shape.
bool split_key(const std::string& text, std::string& key, std::string& rest) {
    const std::size_t colon = text.find(':');
    if (colon == std::string::npos || colon == 0) return false;
    if (colon + 1 < text.size() && text[colon + 1] != ' ') return false;
    key = trim(text.substr(0, colon));
    rest = colon + 1 < text.size() ? trim(text.substr(colon + 2)) : std::string();
    if (key.empty()) return false;
    return true;
}

class BlockParser {
public:
    explicit BlockParser(std::vector<Line> lines) : lines_(std::move(lines)) {}

    ordered_json parse_document() {
        if (lines_.empty()) throw ParseError(0, "empty recipe");
        ordered_json doc = parse_block(lines_[0].indent, 0);
        if (pos_ < lines_.size())
            throw ParseError(lines_[pos_].number, "unexpected indentation");
        return doc;
    }

private:
    ordered_json parse_block(int indent, int depth) {
        if (depth > kMaxNestingDepth)
            throw ParseError(lines_[pos_].number, "nesting too deep");
        if (lines_[pos_].text.rfind("- ", 0) == 0 || lines_[pos_].text == "-")
            return parse_sequence(indent, depth);
        return parse_mapping(indent, depth);
    }

    ordered_json parse_mapping(int indent, int depth) {
        ordered_json map = ordered_json::object();
        while (pos_ < lines_.size()) {
            const Line& line = lines_[pos_];
            if (line.indent < indent) break;
            if (line.indent > indent) throw ParseError(line.number, "unexpected indentation");
            if (line.text.rfind("- ", 0) == 0 || line.text == "-")
                throw ParseError(line.number, "sequence item where a key was expected");
            std::string key, rest;
            if (!split_key(line.text, key, rest))
                throw ParseError(line.number, "expected \"key: value\"");
            if (map.contains(key)) throw ParseError(line.number, "duplicate key: " + key);
            ++pos_;
            if (!rest.empty()) {
                map[key] = parse_inline_value(rest, line.number);
            } else {
                if (pos_ >= lines_.size() || lines_[pos_].indent <= indent)
                    throw ParseError(line.number, "key \"" + key + "\" has no value");
                map[key] = parse_block(lines_[pos_].indent, depth + 1);
            }
        }
        return map;
    }

    ordered_json parse_sequence(int indent, int depth) {
        ordered_json arr = ordered_json::array();
        while (pos_ < lines_.size()) {
            const Line& line = lines_[pos_];
            if (line.indent != indent) break;
            if (!(line.text.rfind("- ", 0) == 0 || line.text == "-")) break;
            const std::string rest = line.text == "-" ? std::string() : trim(line.text.substr(2));
            if (rest.empty()) {
                ++pos_;
                if (pos_ >= lines_.size() || lines_[pos_].indent <= indent)
                    throw ParseError(line.number, "sequence item has no value");
                arr.push_back(parse_block(lines_[pos_].indent, depth + 1));
                continue;
            }
            std::string key, inline_rest;
            if (split_key(rest, key, inline_rest)) {
                // compact mapping: first entry inline after "- ", the rest
                // aligned two columns deeper
                ordered_json item = ordered_json::object();
                if (inline_rest.empty()) {
                    ++pos_;
                    if (pos_ >= lines_.size() || lines_[pos_].indent <= indent + 2)
                        throw ParseError(line.number, "key \"" + key + "\" has no value");
                    item[key] = parse_block(lines_[pos_].indent, depth + 1);
                } else {
                    item[key] = parse_inline_value(inline_rest, line.number);
                    ++pos_;
                }
                while (pos_ < lines_.size() && lines_[pos_].indent == indent + 2 &&
                       !(lines_[pos_].text.rfind("- ", 0) == 0 || lines_[pos_].text == "-")) {
                    const Line& cont = lines_[pos_];
                    std::string ck, cr;
                    if (!split_key(cont.text, ck, cr))
                        throw ParseError(cont.number, "expected \"key: value\"");
                    if (item.contains(ck)) throw ParseError(cont.number, "duplicate key: " + ck);
                    ++pos_;
                    if (!cr.empty()) {
                        item[ck] = parse_inline_value(cr, cont.number);
                    } else {
                        if (pos_ >= lines_.size() || lines_[pos_].indent <= cont.indent)
                            throw ParseError(cont.number, "key \"" + ck + "\" has no value");
                        item[ck] = parse_block(lines_[pos_].indent, depth + 1);
                    }
                }
                arr.push_back(std::move(item));
            } else {
                arr.push_back(parse_inline_value(rest, line.number));
                ++pos_;
            }
        }
        if (arr.empty()) throw ParseError(lines_.empty() ? 0 : lines_.back().number, "empty sequence");
        return arr;
    }

    std::vector<Line> lines_;
    std::size_t pos_ = 0;
};

double scalar_to_real(const ordered_json& v, const std::string& what) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        const char* begin = s.c_str();
        char* end = nullptr;
        errno = 0;
        const double d = std::strtod(begin, &end);
        if (end == begin || *end != '\0' || errno == ERANGE)
            throw ParseError(0, what + " is not a number: \"" + s + "\"");
        return d;
    }
    throw ParseError(0, what + " is not a number");
}

std::uint64_t scalar_to_uint(const ordered_json& v, const std::string& what) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        std::uint64_t out = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
        if (ec != std::errc() || p != s.data() + s.size())
            throw ParseError(0, what + " is not a non-negative integer: \"" + s + "\"");
        return out;
    }
    throw ParseError(0, what + " is not a non-negative integer");
}

std::string scalar_to_string(const ordered_json& v, const std::string& what) {
    if (v.is_string()) return v.get<std::string>();
    throw ParseError(0, what + " is not a string");
}

mergecore::TSchedule anchors_from_value(const ordered_json& v) {
    mergecore::TSchedule s;
    if (v.is_array()) {
        for (const auto& item : v) s.anchors.push_back(scalar_to_real(item, "anchor"));
    } else {
        s.anchors.push_back(scalar_to_real(v, "anchor"));
    }
    if (s.anchors.empty()) throw ParseError(0, "anchor list is empty");
    for (double a : s.anchors)
        if (!(a >= 0.0 && a <= 1.0))
            throw InvalidAnchor("anchor outside [0, 1]: " + std::to_string(a));
    return s;
}

LayerRange range_from_value(const ordered_json& v) {
    if (!v.is_array() || v.size() != 2) throw ParseError(0, "layer_range must be [begin, end]");
    LayerRange r{scalar_to_uint(v[0], "layer_range begin"), scalar_to_uint(v[1], "layer_range end")};
    if (r.end < r.begin) throw ParseError(0, "layer_range end before begin");
    return r;
}

MergeRecipe extract(const ordered_json& doc) {
    if (!doc.is_object()) throw ParseError(0, "recipe root must be a mapping");

    MergeRecipe r;

    auto slices = doc.find("slices");
    if (slices == doc.end()) throw MissingField("slices");
    if (!slices->is_array() || slices->size() != 1)
        throw ParseError(0, "exactly one slice is supported");
    const auto& slice = (*slices)[0];
    if (!slice.is_object()) throw ParseError(0, "slice must be a mapping");
    auto sources = slice.find("sources");
    if (sources == slice.end()) throw MissingField("sources");
    if (!sources->is_array() || sources->size() != 2)
        throw ParseError(0, "exactly two sources are supported");
    for (int i = 0; i < 2; ++i) {
        const auto& src = (*sources)[i];
        if (!src.is_object()) throw ParseError(0, "source must be a mapping");
        auto model = src.find("model");
        if (model == src.end()) throw MissingField("model");
        auto range = src.find("layer_range");
        if (range == src.end()) throw MissingField("layer_range");
        (i == 0 ? r.source1 : r.source2) = scalar_to_string(*model, "model");
        (i == 0 ? r.layer_range1 : r.layer_range2) = range_from_value(*range);
    }
    if (r.layer_range1.length() != r.layer_range2.length())
        throw ParseError(0, "layer ranges differ in length");
    if (!(r.layer_range1 == r.layer_range2))
        throw ParseError(0, "offset layer ranges are not supported");

    auto method = doc.find("merge_method");
    if (method == doc.end()) throw MissingField("merge_method");
    const std::string method_name = scalar_to_string(*method, "merge_method");
    if (method_name == "slerp") {
        r.method = mergecore::MergeMethod::Slerp;
    } else if (method_name == "lerp") {
        r.method = mergecore::MergeMethod::Lerp;
    } else {
        throw UnknownMethod("unknown merge_method: " + method_name);
    }

    auto base = doc.find("base_model");
    if (base == doc.end()) throw MissingField("base_model");
    r.base_model = scalar_to_string(*base, "base_model");
    if (r.base_model != r.source1 && r.base_model != r.source2)
        throw ParseError(0, "base_model must name one of the sources");

    auto params = doc.find("parameters");
    if (params == doc.end()) throw MissingField("parameters");
    if (!params->is_object()) throw ParseError(0, "parameters must be a mapping");
    auto tentry = params->find("t");
    if (tentry == params->end()) throw MissingField("parameters.t");
    if (!tentry->is_array()) throw ParseError(0, "parameters.t must be a list");
    bool have_default = false;
    for (const auto& entry : *tentry) {
        if (!entry.is_object()) throw ParseError(0, "parameters.t entry must be a mapping");
        auto value = entry.find("value");
        if (value == entry.end()) throw MissingField("value");
        auto filter = entry.find("filter");
        if (filter != entry.end()) {
            mergecore::FilterRule rule;
            rule.pattern = scalar_to_string(*filter, "filter");
            if (rule.pattern.empty()) throw ParseError(0, "filter pattern is empty");
            rule.schedule = anchors_from_value(*value);
            r.policy.rules.push_back(std::move(rule));
        } else {
            if (have_default) throw ParseError(0, "multiple unfiltered t entries");
            r.policy.default_schedule = anchors_from_value(*value);
            have_default = true;
        }
    }
    if (!have_default) throw MissingField("parameters.t default");

    auto dtype = doc.find("dtype");
    if (dtype == doc.end()) throw MissingField("dtype");
    const std::string dtype_str = scalar_to_string(*dtype, "dtype");
    if (dtype_str == "bfloat16") {
        r.out_dtype = DType::BF16;
    } else if (dtype_str == "float16") {
        r.out_dtype = DType::F16;
    } else if (dtype_str == "float32") {
        r.out_dtype = DType::F32;
    } else if (dtype_str == "float64") {
        r.out_dtype = DType::F64;
    } else {
        throw ParseError(0, "unknown dtype: " + dtype_str);
    }

    return r;
}

int flow_depth_max(const std::string& text) {
    int depth = 0, max_depth = 0;
    for (char c : text) {
        if (c == '[' || c == '{') max_depth = std::max(max_depth, ++depth);
        if (c == ']' || c == '}') --depth;
    }
    return max_depth;
}

std::string format_real(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, p);
}

std::string format_anchors(const mergecore::TSchedule& s) {
    if (s.anchors.size() == 1) return format_real(s.anchors[0]);
    std::string out = "[";
    for (std::size_t i = 0; i < s.anchors.size(); ++i) {
        if (i) out += ", ";
        out += format_real(s.anchors[i]);
    }
    out += "]";
    return out;
}

}  // namespace

MergeRecipe parse_recipe(const std::string& text) {
    std::size_t first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) throw ParseError(0, "empty recipe");
    if (text[first] == '{') {
        if (flow_depth_max(text) > 256) throw ParseError(0, "nesting too deep");
        const ordered_json doc = ordered_json::parse(text, nullptr, false);
        if (doc.is_discarded()) throw ParseError(0, "invalid JSON");
        return extract(doc);
    }
    BlockParser parser(split_lines(text));
    return extract(parser.parse_document());
}

std::string emit_recipe(const MergeRecipe& r) {
    std::ostringstream out;
    out << "slices:\n";
    out << "  - sources:\n";
    out << "      - model: " << r.source1 << "\n";
    out << "        layer_range: [" << r.layer_range1.begin << ", " << r.layer_range1.end
        << "]\n";
    out << "      - model: " << r.source2 << "\n";
    out << "        layer_range: [" << r.layer_range2.begin << ", " << r.layer_range2.end
        << "]\n";
    out << "merge_method: " << (r.method == mergecore::MergeMethod::Slerp ? "slerp" : "lerp")
        << "\n";
    out << "base_model: " << r.base_model << "\n";
    out << "parameters:\n";
    out << "  t:\n";
    for (const auto& rule : r.policy.rules) {
        out << "    - filter: " << rule.pattern << "\n";
        out << "      value: " << format_anchors(rule.schedule) << "\n";
    }
    out << "    - value: " << format_anchors(r.policy.default_schedule) << "\n";
    const char* dtype_str = r.out_dtype == DType::BF16   ? "bfloat16"
                            : r.out_dtype == DType::F16  ? "float16"
                            : r.out_dtype == DType::F32  ? "float32"
                                                         : "float64";
    out << "dtype: " << dtype_str << "\n";
    return out.str();
}

ValidationReport validate(const MergeRecipe& r, const tensorstore::Checkpoint& A,
                          const tensorstore::Checkpoint& B) {
    ValidationReport report;

    auto relevant = [&](const std::string& name) {
        const auto layer = mergecore::layer_index(name);
        return !layer || r.layer_range1.contains(*layer);
    };

    for (const auto& [name, ta] : A.tensors) {
        if (!relevant(name)) continue;
        const auto itb = B.tensors.find(name);
        if (itb == B.tensors.end()) {
            report.violations.push_back(
                {Violation::Kind::MissingTensor, name, "missing from source2: " + name});
        } else if (ta.shape != itb->second.shape) {
            report.violations.push_back(
                {Violation::Kind::ShapeMismatch, name, "shape mismatch: " + name});
        }
    }
    for (const auto& [name, tb] : B.tensors) {
        if (!relevant(name)) continue;
        if (!A.tensors.count(name))
            report.violations.push_back(
                {Violation::Kind::MissingTensor, name, "missing from source1: " + name});
    }

    std::set<std::uint64_t> layers_a, layers_b;
    for (const auto& [name, t] : A.tensors)
        if (auto l = mergecore::layer_index(name)) layers_a.insert(*l);
    for (const auto& [name, t] : B.tensors)
        if (auto l = mergecore::layer_index(name)) layers_b.insert(*l);
    for (std::uint64_t l = r.layer_range1.begin; l < r.layer_range1.end; ++l) {
        if (!layers_a.count(l) || !layers_b.count(l)) {
            report.violations.push_back({Violation::Kind::LayerCount,
                                         "layer " + std::to_string(l),
                                         "layer_range covers layer " + std::to_string(l) +
                                             " which is absent from a source"});
        }
    }
    return report;
}

}  // namespace mergeforge::recipe
