#include <doctest.h>

#include <random>
#include <string>

#include "mergeforge/recipe.hpp"
#include "test_support.hpp"

using namespace mergeforge;
using namespace mergeforge::recipe;

namespace {

// The published reference recipe, exactly as it appears in merge configs.
const std::string kReferenceYaml =
    "slices:\n"
    "  - sources:\n"
    "      - model: lamm-mit/Llama3.1-8b-Instruct-CPT-SFT-DPO\n"
    "        layer_range: [0, 32]\n"
    "      - model: meta-llama/Meta-Llama-3.1-8B-Instruct\n"
    "        layer_range: [0, 32]\n"
    "merge_method: slerp\n"
    "base_model: meta-llama/Meta-Llama-3.1-8B-Instruct\n"
    "parameters:\n"
    "  t:\n"
    "    - filter: self_attn\n"
    "      value: [0, 0.5, 0.3, 0.7, 1]\n"
    "    - filter: mlp\n"
    "      value: [1, 0.5, 0.7, 0.3, 0]\n"
    "    - value: 0.5\n"
    "dtype: bfloat16\n";

}  // namespace

TEST_CASE("the reference YAML parses to the expected structure") {
    const MergeRecipe r = parse_recipe(kReferenceYaml);
    CHECK(r.source1 == "lamm-mit/Llama3.1-8b-Instruct-CPT-SFT-DPO");
    CHECK(r.source2 == "meta-llama/Meta-Llama-3.1-8B-Instruct");
    CHECK(r.layer_range1 == LayerRange{0, 32});
    CHECK(r.layer_range2 == LayerRange{0, 32});
    CHECK(r.method == mergecore::MergeMethod::Slerp);
    CHECK(r.base_model == r.source2);
    CHECK(!r.base_is_source1());
    REQUIRE(r.policy.rules.size() == 2);
    CHECK(r.policy.rules[0].pattern == "self_attn");
    CHECK(r.policy.rules[0].schedule.anchors == std::vector<double>{0.0, 0.5, 0.3, 0.7, 1.0});
    CHECK(r.policy.rules[1].pattern == "mlp");
    CHECK(r.policy.rules[1].schedule.anchors == std::vector<double>{1.0, 0.5, 0.7, 0.3, 0.0});
    CHECK(r.policy.default_schedule.anchors == std::vector<double>{0.5});
    CHECK(r.out_dtype == DType::BF16);
}

TEST_CASE("the JSON alternative parses to the same recipe") {
    const std::string json = R"({
        "slices": [{"sources": [
            {"model": "lamm-mit/Llama3.1-8b-Instruct-CPT-SFT-DPO", "layer_range": [0, 32]},
            {"model": "meta-llama/Meta-Llama-3.1-8B-Instruct", "layer_range": [0, 32]}
        ]}],
        "merge_method": "slerp",
        "base_model": "meta-llama/Meta-Llama-3.1-8B-Instruct",
        "parameters": {"t": [
            {"filter": "self_attn", "value": [0, 0.5, 0.3, 0.7, 1]},
            {"filter": "mlp", "value": [1, 0.5, 0.7, 0.3, 0]},
            {"value": 0.5}
        ]},
        "dtype": "bfloat16"
    })";
    CHECK(parse_recipe(json) == parse_recipe(kReferenceYaml));
}

TEST_CASE("emit and re-parse round-trips the recipe value") {
    const MergeRecipe r = parse_recipe(kReferenceYaml);
    CHECK(parse_recipe(emit_recipe(r)) == r);

    MergeRecipe lerp = r;
    lerp.method = mergecore::MergeMethod::Lerp;
    lerp.out_dtype = DType::F32;
    CHECK(parse_recipe(emit_recipe(lerp)) == lerp);

    // multi-anchor default schedule and anchors that need full precision
    MergeRecipe dense = r;
    dense.policy.default_schedule.anchors = {0.0, 1.0 / 3.0, 0.2, 1.0};
    dense.policy.rules[0].schedule.anchors = {0.1234567890123456, 1.0};
    CHECK(parse_recipe(emit_recipe(dense)) == dense);
}

TEST_CASE("parse errors carry positions and kinds") {
    SUBCASE("unknown merge method") {
        std::string bad = kReferenceYaml;
        const auto pos = bad.find("slerp");
        bad.replace(pos, 5, "ties");
        CHECK_THROWS_AS(parse_recipe(bad), UnknownMethod);
    }
    SUBCASE("missing dtype") {
        std::string bad = kReferenceYaml;
        bad.erase(bad.find("dtype:"));
        try {
            parse_recipe(bad);
            FAIL("expected MissingField");
        } catch (const MissingField& e) {
            CHECK(e.field == "dtype");
        }
    }
    SUBCASE("anchor outside the unit interval") {
        std::string bad = kReferenceYaml;
        const auto pos = bad.find("[0, 0.5, 0.3, 0.7, 1]");
        bad.replace(pos, 21, "[0, 0.5, 1.3, 0.7, 1]");
        CHECK_THROWS_AS(parse_recipe(bad), InvalidAnchor);
    }
    SUBCASE("three sources are rejected") {
        std::string bad = kReferenceYaml;
        const std::string extra =
            "      - model: third/model\n"
            "        layer_range: [0, 32]\n";
        bad.insert(bad.find("merge_method:"), extra);
        CHECK_THROWS_AS(parse_recipe(bad), ParseError);
    }
    SUBCASE("base model must be one of the sources") {
        std::string bad = kReferenceYaml;
        const auto pos = bad.find("base_model: ");
        bad.replace(pos, bad.find('\n', pos) - pos, "base_model: somewhere/else");
        CHECK_THROWS_AS(parse_recipe(bad), ParseError);
    }
    SUBCASE("tab indentation is a positioned error") {
        try {
            parse_recipe("slices:\n\t- sources:\n");
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line == 2);
        }
    }
    SUBCASE("layer ranges of different lengths") {
        std::string bad = kReferenceYaml;
        const auto pos = bad.rfind("layer_range: [0, 32]");
        bad.replace(pos, 20, "layer_range: [0, 16]");
        CHECK_THROWS_AS(parse_recipe(bad), ParseError);
    }
    SUBCASE("empty input") {
        CHECK_THROWS_AS(parse_recipe(""), ParseError);
        CHECK_THROWS_AS(parse_recipe("   \n  \n"), ParseError);
    }
}

TEST_CASE("parser is total under fuzzing") {
    std::mt19937_64 rng(1234);
    const std::string charset = " \n\t-:[]{},.\"'abcdefghijklmnopqrstuvwxyz0123456789_/#";
    int parsed_ok = 0;
    for (int trial = 0; trial < 3000; ++trial) {
        std::string input;
        switch (trial % 3) {
            case 0: {  // random character soup
                const std::size_t len = testsupport::uniform_index(rng, 200);
                for (std::size_t i = 0; i < len; ++i)
                    input += charset[testsupport::uniform_index(rng, charset.size())];
                break;
            }
            case 1: {  // reference recipe with random single-byte mutations
                input = kReferenceYaml;
                const int edits = 1 + int(testsupport::uniform_index(rng, 8));
                for (int e = 0; e < edits; ++e) {
                    const std::size_t at = testsupport::uniform_index(rng, input.size());
                    input[at] = charset[testsupport::uniform_index(rng, charset.size())];
                }
                break;
            }
            default: {  // reference recipe truncated at a random point
                input = kReferenceYaml.substr(0, testsupport::uniform_index(rng, kReferenceYaml.size()));
                break;
            }
        }
        try {
            (void)parse_recipe(input);
            ++parsed_ok;
        } catch (const RecipeError&) {
            // a positioned error is the expected outcome for bad input
        }
    }
    CHECK(parsed_ok >= 0);  // reaching here means no crash and no foreign exception
}

TEST_CASE("validate reports all violations as data") {
    const auto yaml = testsupport::toy_recipe_yaml(2);
    const MergeRecipe r = parse_recipe(yaml);
    const auto a = testsupport::toy_checkpoint(61, 2, 8, 16);

    SUBCASE("identical architectures produce an empty report") {
        const auto b = testsupport::toy_checkpoint(62, 2, 8, 16);
        CHECK(validate(r, a, b).ok());
    }
    SUBCASE("a missing tensor is named") {
        auto b = testsupport::toy_checkpoint(62, 2, 8, 16);
        b.tensors.erase("model.layers.1.mlp.up_proj.weight");
        const auto report = validate(r, a, b);
        REQUIRE(report.violations.size() == 1);
        CHECK(report.violations[0].kind == Violation::Kind::MissingTensor);
        CHECK(report.violations[0].subject == "model.layers.1.mlp.up_proj.weight");
    }
    SUBCASE("shape mismatches are collected, not thrown") {
        auto b = testsupport::toy_checkpoint(62, 2, 8, 16);
        const double v[] = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0};
        b.add(tensorstore::tensor_from_values("model.norm.weight", DType::F32, {8, 1}, v));
        const auto report = validate(r, a, b);
        REQUIRE(report.violations.size() == 1);
        CHECK(report.violations[0].kind == Violation::Kind::ShapeMismatch);
        CHECK(report.violations[0].subject == "model.norm.weight");
    }
    SUBCASE("range covering absent layers is flagged") {
        const MergeRecipe wide = parse_recipe(testsupport::toy_recipe_yaml(4));
        const auto b = testsupport::toy_checkpoint(62, 2, 8, 16);
        const auto report = validate(wide, a, b);
        bool found = false;
        for (const auto& v : report.violations)
            if (v.kind == Violation::Kind::LayerCount) found = true;
        CHECK(found);
    }
}
