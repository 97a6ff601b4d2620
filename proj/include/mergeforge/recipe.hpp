#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mergeforge/mergecore.hpp"
#include "mergeforge/tensorstore.hpp"

namespace mergeforge::recipe {

struct RecipeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParseError : RecipeError {
    ParseError(int line_, const std::string& message)
        : RecipeError("line " + std::to_string(line_) + ": " + message), line(line_) {}
    int line;
};
struct UnknownMethod : RecipeError {
    using RecipeError::RecipeError;
};
struct MissingField : RecipeError {
    explicit MissingField(const std::string& field_)
        : RecipeError("missing field: " + field_), field(field_) {}
    std::string field;
};
struct InvalidAnchor : RecipeError {
    using RecipeError::RecipeError;
};

// Half-open layer interval [begin, end).
struct LayerRange {
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
    std::uint64_t length() const { return end - begin; }
    bool contains(std::uint64_t i) const { return i >= begin && i < end; }
    bool operator==(const LayerRange&) const = default;
};

// Declarative two-model merge description.
struct MergeRecipe {
    std::string source1;
    std::string source2;
    LayerRange layer_range1;
    LayerRange layer_range2;
    mergecore::MergeMethod method = mergecore::MergeMethod::Slerp;
    std::string base_model;  // equals source1 or source2
    mergecore::ParameterPolicy policy;
    DType out_dtype = DType::BF16;

    bool base_is_source1() const { return base_model == source1; }
    bool operator==(const MergeRecipe&) const = default;
};

// Parses the YAML merge-recipe shape (slices/sources/model/layer_range,
// merge_method, base_model, parameters.t with filter entries and a trailing
// unfiltered default, dtype), or an equivalent JSON document with the same
// field names. Total: every input yields a recipe or a RecipeError.
MergeRecipe parse_recipe(const std::string& text);

// Canonical YAML emission; parse_recipe(emit_recipe(r)) == r.
std::string emit_recipe(const MergeRecipe& r);

struct Violation {
    enum class Kind { MissingTensor, ShapeMismatch, LayerCount };
    Kind kind;
    std::string subject;  // tensor name or layer description
    std::string message;
    bool operator==(const Violation&) const = default;
};

struct ValidationReport {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
};

// Structural compatibility check of the two sources against the recipe:
// name-set compatibility inside the layer range, per-tensor shape equality,
// and layer-count consistency with the range. All violations are collected.
ValidationReport validate(const MergeRecipe& r, const tensorstore::Checkpoint& A,
                          const tensorstore::Checkpoint& B);

}  // namespace mergeforge::recipe
