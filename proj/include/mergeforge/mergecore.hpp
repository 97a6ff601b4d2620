#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mergeforge/tensorstore.hpp"

namespace mergeforge::recipe {
struct MergeRecipe;
}

namespace mergeforge::mergecore {

struct MergeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct LengthMismatch : MergeError {
    using MergeError::MergeError;
};
struct ShapeMismatch : MergeError {
    using MergeError::MergeError;
};
struct NameMismatch : MergeError {
    using MergeError::MergeError;
};
struct MissingTensorInBase : MergeError {
    using MergeError::MergeError;
};
struct EmptyAnchors : MergeError {
    using MergeError::MergeError;
};

enum class MergeMethod { Slerp, Lerp };

// Interpolation-parameter curve over normalized layer depth: k anchors sit
// at equally spaced depths 0, 1/(k-1), ..., 1; a single anchor is constant.
struct TSchedule {
    std::vector<double> anchors;
    bool operator==(const TSchedule&) const = default;
};

// Applies `schedule` to tensors whose name contains `pattern`.
struct FilterRule {
    std::string pattern;
    TSchedule schedule;
    bool operator==(const FilterRule&) const = default;
};

// Ordered filter rules plus the mandatory unfiltered default.
struct ParameterPolicy {
    std::vector<FilterRule> rules;
    TSchedule default_schedule;
    bool operator==(const ParameterPolicy&) const = default;
};

// Above this |cos w| the geodesic is numerically degenerate and the merge
// falls back to linear interpolation of the raw vectors.
inline constexpr double kParallelCosineThreshold = 0.9995;

// Spherical linear interpolation with magnitude re-scaling:
//   |a|^(1-t) * |b|^t * [ sin((1-t)w)/sin(w) * a_hat + sin(tw)/sin(w) * b_hat ]
// where cos w = a_hat . b_hat clamped to [-1, 1]. t = 0 and t = 1 return the
// endpoints exactly; near-parallel or zero-norm operands fall back to lerp.
std::vector<double> slerp_vec(std::span<const double> a, std::span<const double> b, double t);

// (1-t)*a + t*b.
std::vector<double> lerp_vec(std::span<const double> a, std::span<const double> b, double t);

// Piecewise-linear evaluation of the anchor curve at depth x in [0, 1].
double schedule_eval(const TSchedule& s, double x);

// Extracts N from a ".layers.N." component; absent for embeddings, final
// norm, output head and other non-layer tensors.
std::optional<std::uint64_t> layer_index(std::string_view tensor_name);

// First matching filter rule wins; depth is layer_index/(n_layers-1) (0 when
// n_layers is 1). Tensors without a layer index use the default schedule at
// depth 0.5.
double resolve_t(std::string_view tensor_name, std::uint64_t n_layers,
                 const ParameterPolicy& policy);

// Merges two same-shape tensors over their flattened f64 values; the result
// stays in f64 working precision.
tensorstore::TensorRecord merge_tensor(const tensorstore::TensorRecord& a,
                                       const tensorstore::TensorRecord& b, double t,
                                       MergeMethod method);

// Whole-checkpoint merge under a validated recipe. A carries the recipe's
// source1 role, B source2. Tensors inside the layer range (and non-layer
// tensors) present in both are merged; layer tensors outside the range and
// tensors present only in the base source are copied from the base; tensors
// present only in the non-base source raise MissingTensorInBase. The output
// is cast to the recipe dtype and stamped with a recipe fingerprint; the
// result is identical for any thread count.
tensorstore::Checkpoint merge_checkpoints(const recipe::MergeRecipe& r,
                                          const tensorstore::Checkpoint& A,
                                          const tensorstore::Checkpoint& B,
                                          unsigned threads = 0);

}  // namespace mergeforge::mergecore
