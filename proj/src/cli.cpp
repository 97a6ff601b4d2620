#include "mergeforge/cli.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mergeforge/analysis.hpp"
#include "mergeforge/benchrunner.hpp"
#include "mergeforge/endpoint.hpp"
#include "mergeforge/mergecore.hpp"
#include "mergeforge/recipe.hpp"
#include "mergeforge/tensorstore.hpp"

namespace mergeforge::cli {

namespace {

namespace fs = std::filesystem;

int status(ExitStatus s) { return static_cast<int>(s); }

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw tensorstore::IoFailure("cannot open: " + path.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_text_file_atomic(const fs::path& path, const std::string& content) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw tensorstore::IoFailure("cannot open for writing: " + tmp.string());
        out.write(content.data(), std::streamsize(content.size()));
        out.flush();
        if (!out) throw tensorstore::IoFailure("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw tensorstore::IoFailure("rename failed: " + path.string() + ": " + ec.message());
}

std::string format_real(double v) {
    char buf[40];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, p);
}

struct MergeArgs {
    std::string recipe_path;
    std::string source1_path;
    std::string source2_path;
    std::string out_path;
    bool dry_run = false;
    unsigned threads = 0;
};

int cmd_merge(const MergeArgs& args, std::ostream& out, std::ostream& err) {
    const recipe::MergeRecipe r = recipe::parse_recipe(read_text_file(args.recipe_path));
    err << "merging " << r.source1 << " + " << r.source2 << "\n";

    const tensorstore::Checkpoint a = tensorstore::read_checkpoint(fs::path(args.source1_path));
    const tensorstore::Checkpoint b = tensorstore::read_checkpoint(fs::path(args.source2_path));

    const recipe::ValidationReport report = recipe::validate(r, a, b);
    if (!report.ok()) {
        for (const auto& v : report.violations) err << "violation: " << v.message << "\n";
        return status(ExitStatus::Violation);
    }

    if (args.dry_run) {
        const std::uint64_t n_layers = r.layer_range1.length();
        out << "tensor\tt\taction\n";
        for (const auto& [name, t] : a.tensors) {
            const auto layer = mergecore::layer_index(name);
            const bool in_range = !layer || r.layer_range1.contains(*layer);
            if (in_range && b.has(name)) {
                out << name << "\t" << format_real(mergecore::resolve_t(name, n_layers, r.policy))
                    << "\tmerge\n";
            } else {
                out << name << "\t\tcopy\n";
            }
        }
        return status(ExitStatus::Ok);
    }

    if (args.out_path.empty()) {
        err << "error: --out is required unless --dry-run is given\n";
        return status(ExitStatus::Usage);
    }
    const tensorstore::Checkpoint merged = mergecore::merge_checkpoints(r, a, b, args.threads);
    tensorstore::write_checkpoint(merged, fs::path(args.out_path));
    out << args.out_path << "\n";
    err << "wrote " << merged.tensors.size() << " tensors\n";
    return status(ExitStatus::Ok);
}

struct ScoreArgs {
    std::string questions_path;
    std::string transcript_path;
    std::string endpoint_url;
    std::string model;
    std::string template_name = "raw";
    std::string system;
    std::string out_path;
    unsigned max_in_flight = 4;
};

int cmd_score(const ScoreArgs& args, std::ostream& out, std::ostream& err) {
    const bool have_transcript = !args.transcript_path.empty();
    const bool endpoint_flag = !args.endpoint_url.empty();
    if (have_transcript && endpoint_flag) {
        err << "error: give exactly one of --transcript or --endpoint\n";
        return status(ExitStatus::Usage);
    }
    // flags beat the environment: the env endpoint only applies when neither
    // flag selected a source
    std::string endpoint_url = args.endpoint_url;
    if (!have_transcript && !endpoint_flag) {
        if (const char* env = std::getenv("MERGEFORGE_ENDPOINT")) endpoint_url = env;
    }
    if (!have_transcript && endpoint_url.empty()) {
        err << "error: give exactly one of --transcript or --endpoint\n";
        return status(ExitStatus::Usage);
    }

    const auto bank = benchrunner::load_questions(fs::path(args.questions_path));
    err << "loaded " << bank.size() << " questions\n";

    benchrunner::Transcript transcript;
    if (have_transcript) {
        transcript = benchrunner::read_transcript(fs::path(args.transcript_path));
    } else {
        if (args.model.empty()) {
            err << "error: --endpoint requires --model\n";
            return status(ExitStatus::Usage);
        }
        endpoint::PromptMode mode;
        if (args.template_name == "raw") {
            mode = endpoint::PromptMode::Raw;
        } else if (args.template_name == "llama") {
            mode = endpoint::PromptMode::Llama;
        } else if (args.template_name == "mistral") {
            mode = endpoint::PromptMode::Mistral;
        } else if (args.template_name == "smollm") {
            mode = endpoint::PromptMode::SmolLM;
        } else {
            err << "error: unknown template: " << args.template_name << "\n";
            return status(ExitStatus::Usage);
        }
        const endpoint::EndpointClient client(endpoint_url);
        transcript = endpoint::collect_transcript(
            client, args.model, bank, mode, args.system,
            benchrunner::GenerationConfig::benchmark_preset(), args.max_in_flight);
    }

    const benchrunner::ScoreReport report = benchrunner::grade(transcript, bank);
    if (!args.out_path.empty()) {
        write_text_file_atomic(args.out_path, benchrunner::score_report_json(report));
        fs::path csv_path = args.out_path;
        csv_path.replace_extension(".csv");
        write_text_file_atomic(csv_path, benchrunner::score_report_csv(report));
        err << "wrote " << args.out_path << " and " << csv_path.string() << "\n";
    }
    out << "overall accuracy: " << format_real(report.overall_accuracy) << " (" << report.correct
        << "/" << report.total << ")\n";
    return status(ExitStatus::Ok);
}

struct AnalyzeArgs {
    std::string table_path;
    int k = 2;
    std::uint64_t seed = 0;
    std::string out_dir;
};

int cmd_analyze(const AnalyzeArgs& args, std::ostream& out, std::ostream& err) {
    const auto records = analysis::load_records(fs::path(args.table_path));
    if (records.empty()) err << "warning: score table is empty\n";

    const analysis::AnalysisReport report = analysis::build_report(records, args.k, args.seed);
    for (const auto& w : report.warnings) err << "warning: " << w << "\n";

    if (!args.out_dir.empty()) {
        const fs::path dir(args.out_dir);
        fs::create_directories(dir);
        write_text_file_atomic(dir / "report.json", analysis::report_json(report));
        write_text_file_atomic(dir / "expected_vs_actual.csv", analysis::scatter_csv(report));
        write_text_file_atomic(dir / "deviation_ranking.csv", analysis::ranking_csv(report));
        write_text_file_atomic(dir / "correlation_matrix.csv", analysis::correlation_csv(report));
        write_text_file_atomic(dir / "dendrogram.csv", analysis::dendrogram_csv(report));
        err << "wrote report files to " << dir.string() << "\n";
    }

    for (const auto& [id, dev] : report.ranking)
        out << id << "\t" << format_real(dev) << "\n";
    return status(ExitStatus::Ok);
}

struct RenderArgs {
    std::string family = "llama";
    std::string system;
    std::vector<std::string> turns;
};

int cmd_render_chat(const RenderArgs& args, std::ostream& out, std::ostream& err) {
    benchrunner::ChatFamily family;
    if (args.family == "llama") {
        family = benchrunner::ChatFamily::Llama;
    } else if (args.family == "mistral") {
        family = benchrunner::ChatFamily::Mistral;
    } else if (args.family == "smollm") {
        family = benchrunner::ChatFamily::SmolLM;
    } else {
        err << "error: unknown family: " << args.family << "\n";
        return status(ExitStatus::Usage);
    }
    out << benchrunner::render_chat(family, args.system, args.turns);
    return status(ExitStatus::Ok);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"mergeforge: checkpoint merging, benchmark scoring and merge analytics"};
    app.require_subcommand(1);

    MergeArgs merge_args;
    auto* merge = app.add_subcommand("merge", "merge two checkpoints under a recipe");
    merge->add_option("recipe", merge_args.recipe_path, "recipe file (YAML or JSON)")->required();
    merge->add_option("source1", merge_args.source1_path, "first source checkpoint")->required();
    merge->add_option("source2", merge_args.source2_path, "second source checkpoint")->required();
    merge->add_option("--out", merge_args.out_path, "output checkpoint path");
    merge->add_flag("--dry-run", merge_args.dry_run,
                    "print the resolved per-tensor t table without writing");
    merge->add_option("--threads", merge_args.threads, "worker threads (0 = auto)");

    ScoreArgs score_args;
    auto* score = app.add_subcommand("score", "grade a model on a question bank");
    score->add_option("--questions", score_args.questions_path, "question bank (CSV or JSONL)")
        ->required();
    score->add_option("--transcript", score_args.transcript_path, "recorded transcript (JSONL)");
    score->add_option("--endpoint", score_args.endpoint_url,
                      "chat-completions endpoint URL (or MERGEFORGE_ENDPOINT)");
    score->add_option("--model", score_args.model, "model id for endpoint mode");
    score->add_option("--template", score_args.template_name,
                      "prompt wrapping: raw, llama, mistral or smollm");
    score->add_option("--system", score_args.system, "system message for endpoint mode");
    score->add_option("--max-in-flight", score_args.max_in_flight,
                      "concurrent endpoint requests");
    score->add_option("--out", score_args.out_path, "score report output path (JSON)");

    AnalyzeArgs analyze_args;
    auto* analyze = app.add_subcommand("analyze", "compute merge-experiment analytics");
    analyze->add_option("--table", analyze_args.table_path, "experiment score table (CSV)")
        ->required();
    analyze->add_option("--k", analyze_args.k, "cluster count");
    analyze->add_option("--seed", analyze_args.seed, "clustering seed")
        ->envname("MERGEFORGE_SEED");
    analyze->add_option("--out", analyze_args.out_dir, "report output directory");

    RenderArgs render_args;
    auto* render = app.add_subcommand("render-chat", "render a chat template to stdout");
    render->add_option("--family", render_args.family, "llama, mistral or smollm");
    render->add_option("--system", render_args.system, "system message");
    render->add_option("turns", render_args.turns,
                       "conversation turns, alternating user/assistant");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return status(ExitStatus::Ok);
        }
        err << "error: " << e.what() << "\n";
        return status(ExitStatus::Usage);
    }

    try {
        if (merge->parsed()) return cmd_merge(merge_args, out, err);
        if (score->parsed()) return cmd_score(score_args, out, err);
        if (analyze->parsed()) return cmd_analyze(analyze_args, out, err);
        if (render->parsed()) return cmd_render_chat(render_args, out, err);
        return status(ExitStatus::Usage);
    } catch (const tensorstore::IoFailure& e) {
        err << "error: " << e.what() << "\n";
        return status(ExitStatus::Io);
    } catch (const endpoint::EndpointError& e) {
        err << "error: " << e.what() << "\n";
        return status(ExitStatus::Io);
    } catch (const mergecore::MergeError& e) {
        err << "error: " << e.what() << "\n";
        return status(ExitStatus::Violation);
    } catch (const recipe::RecipeError& e) {
        err << "error: " << e.what() << "\n";
        return status(ExitStatus::Violation);
    } catch (const benchrunner::BenchError& e) {
        err << "error: " << e.what() << "\n";
        return status(ExitStatus::Violation);
    } catch (const analysis::AnalysisError& e) {
        err << "error: " << e.what() << "\n";
        return status(ExitStatus::Violation);
    } catch (const tensorstore::StoreError& e) {
        err << "error: " << e.what() << "\n";
        return status(ExitStatus::Violation);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return status(ExitStatus::Violation);
    }
}

}  // namespace mergeforge::cli
