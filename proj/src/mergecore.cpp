#include "mergeforge/mergecore.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <thread>

#include "mergeforge/recipe.hpp"

namespace mergeforge::mergecore {

namespace {

double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// FNV-1a, used to stamp merged checkpoints with a recipe fingerprint.
std::string fingerprint(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace

std::vector<double> lerp_vec(std::span<const double> a, std::span<const double> b, double t) {
    if (a.size() != b.size())
        throw LengthMismatch("lerp_vec: lengths " + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - t) * a[i] + t * b[i];
    return out;
}

std::vector<double> slerp_vec(std::span<const double> a, std::span<const double> b, double t) {
    if (a.size() != b.size() || a.empty())
        throw LengthMismatch("slerp_vec: lengths " + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()));
    if (!(t >= 0.0 && t <= 1.0))
        throw std::domain_error("slerp_vec: t outside [0, 1]");
    if (t == 0.0) return {a.begin(), a.end()};
    if (t == 1.0) return {b.begin(), b.end()};

    const double norm_a = l2_norm(a);
    const double norm_b = l2_norm(b);
    if (norm_a == 0.0 || norm_b == 0.0) return lerp_vec(a, b, t);

    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    const double cos_w = std::clamp(dot / (norm_a * norm_b), -1.0, 1.0);
    if (std::abs(cos_w) >= kParallelCosineThreshold) return lerp_vec(a, b, t);

    const double w = std::acos(cos_w);
    const double sin_w = std::sin(w);
    const double c1 = std::sin((1.0 - t) * w) / sin_w;
    const double c2 = std::sin(t * w) / sin_w;
    const double scale = std::pow(norm_a, 1.0 - t) * std::pow(norm_b, t);

    std::vector<double> out(a.size());
    const double f1 = scale * c1 / norm_a;
    const double f2 = scale * c2 / norm_b;
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f1 * a[i] + f2 * b[i];
    return out;
}

double schedule_eval(const TSchedule& s, double x) {
    if (s.anchors.empty()) throw EmptyAnchors("schedule has no anchors");
    if (!(x >= 0.0 && x <= 1.0)) throw std::domain_error("schedule_eval: x outside [0, 1]");
    const std::size_t k = s.anchors.size();
    if (k == 1) return s.anchors[0];
    const double pos = x * double(k - 1);
    std::size_t i = std::size_t(pos);
    if (i >= k - 1) return s.anchors[k - 1];
    const double frac = pos - double(i);
    if (frac == 0.0) return s.anchors[i];
    return s.anchors[i] * (1.0 - frac) + s.anchors[i + 1] * frac;
}

std::optional<std::uint64_t> layer_index(std::string_view tensor_name) {
    static constexpr std::string_view marker = ".layers.";
    std::size_t pos = tensor_name.find(marker);
    while (pos != std::string_view::npos) {
        const std::size_t start = pos + marker.size();
        std::size_t end = start;
        while (end < tensor_name.size() && std::isdigit(static_cast<unsigned char>(tensor_name[end])))
            ++end;
        if (end > start && end - start <= 18 && end < tensor_name.size() &&
            tensor_name[end] == '.') {
            std::uint64_t value = 0;
            for (std::size_t i = start; i < end; ++i) value = value * 10 + (tensor_name[i] - '0');
            return value;
        }
        pos = tensor_name.find(marker, pos + 1);
    }
    return std::nullopt;
}

double resolve_t(std::string_view tensor_name, std::uint64_t n_layers,
                 const ParameterPolicy& policy) {
    const auto idx = layer_index(tensor_name);
    if (!idx) return schedule_eval(policy.default_schedule, 0.5);
    double x = n_layers <= 1 ? 0.0 : double(*idx) / double(n_layers - 1);
    x = std::clamp(x, 0.0, 1.0);
    for (const FilterRule& rule : policy.rules)
        if (tensor_name.find(rule.pattern) != std::string_view::npos)
            return schedule_eval(rule.schedule, x);
    return schedule_eval(policy.default_schedule, x);
}

tensorstore::TensorRecord merge_tensor(const tensorstore::TensorRecord& a,
                                       const tensorstore::TensorRecord& b, double t,
                                       MergeMethod method) {
    if (a.name != b.name) throw NameMismatch("merge_tensor: " + a.name + " vs " + b.name);
    if (a.shape != b.shape) throw ShapeMismatch(a.name);
    const std::vector<double> va = tensorstore::decode_f64(a);
    const std::vector<double> vb = tensorstore::decode_f64(b);
    std::vector<double> merged;
    if (va.empty()) {
        merged = va;  // zero-element tensors have nothing to interpolate
    } else {
        merged = method == MergeMethod::Slerp ? slerp_vec(va, vb, t) : lerp_vec(va, vb, t);
    }
    return tensorstore::tensor_from_values(a.name, DType::F64, a.shape, merged);
}

tensorstore::Checkpoint merge_checkpoints(const recipe::MergeRecipe& r,
                                          const tensorstore::Checkpoint& A,
                                          const tensorstore::Checkpoint& B,
                                          unsigned threads) {
    const std::uint64_t n_layers = r.layer_range1.length();

    enum class Action { Merge, CopyBase };
    struct Task {
        const tensorstore::TensorRecord* a;
        const tensorstore::TensorRecord* b;  // null for copies
        double t;
        Action action;
    };
    std::vector<Task> tasks;

    // Classification is sequential and in name order so errors are
    // deterministic regardless of the worker count used below.
    for (const auto& [name, ta] : A.tensors) {
        const auto itb = B.tensors.find(name);
        const tensorstore::TensorRecord* tb = itb == B.tensors.end() ? nullptr : &itb->second;
        if (!tb) {
            if (!r.base_is_source1()) throw MissingTensorInBase(name);
            tasks.push_back({&ta, nullptr, 0.0, Action::CopyBase});
            continue;
        }
        const auto layer = layer_index(name);
        if (layer && !r.layer_range1.contains(*layer)) {
            const tensorstore::TensorRecord* src = r.base_is_source1() ? &ta : tb;
            tasks.push_back({src, nullptr, 0.0, Action::CopyBase});
            continue;
        }
        if (ta.shape != tb->shape) throw ShapeMismatch(name);
        tasks.push_back({&ta, tb, resolve_t(name, n_layers, r.policy), Action::Merge});
    }
    for (const auto& [name, tb] : B.tensors) {
        if (A.tensors.count(name)) continue;
        if (r.base_is_source1()) throw MissingTensorInBase(name);
        tasks.push_back({&tb, nullptr, 0.0, Action::CopyBase});
    }

    std::vector<tensorstore::TensorRecord> results(tasks.size());
    auto run = [&](std::size_t i) {
        const Task& task = tasks[i];
        if (task.action == Action::CopyBase) {
            results[i] = tensorstore::cast(*task.a, r.out_dtype);
        } else {
            results[i] = tensorstore::cast(merge_tensor(*task.a, *task.b, task.t, r.method),
                                           r.out_dtype);
        }
    };

    unsigned workers = threads == 0 ? std::thread::hardware_concurrency() : threads;
    if (workers < 1) workers = 1;
    if (std::size_t(workers) > tasks.size()) workers = unsigned(std::max<std::size_t>(tasks.size(), 1));
    if (workers <= 1) {
        for (std::size_t i = 0; i < tasks.size(); ++i) run(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(tasks.size());
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < tasks.size(); i = next.fetch_add(1)) {
                    try {
                        run(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
        // Rethrow the first failure in task order so the error is stable.
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    tensorstore::Checkpoint out;
    for (auto& t : results) out.add(std::move(t));
    out.metadata["recipe_fingerprint"] = fingerprint(recipe::emit_recipe(r));
    return out;
}

}  // namespace mergeforge::mergecore
