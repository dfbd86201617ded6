// Command-line front end: pipeline, evaluate, project.

#include <iostream>

#include <CLI11.hpp>

#include "scalpel/scalpel.hpp"

using namespace scalpel;

namespace {

/// PATH or PATH=LABEL; without a label the file stem is used when it names a manifold.
ProjectInput parse_tensor_arg(const std::string& arg) {
    const auto eq = arg.rfind('=');
    if (eq != std::string::npos) return {arg.substr(0, eq), arg.substr(eq + 1)};
    const std::string stem = fs::path(arg).stem().string();
    for (Manifold m : {Manifold::trusted, Manifold::halluc_image, Manifold::halluc_object})
        if (stem == to_string(m)) return {arg, stem};
    return {arg, "unlabelled"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Activation-manifold steering on a toy multimodal transformer"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::string> pipeline_out;
    auto* pipeline = app.add_subcommand("pipeline", "Run every stage for one config");
    pipeline->add_option("--config", config_path, "RunConfig JSON")->required();
    pipeline->add_option("--out-dir", pipeline_out, "Output directory (overrides the config)");

    std::string eval_dir = ".", model_path, plan_path, episodes_path;
    std::optional<std::string> eval_out;
    auto* evaluate = app.add_subcommand("evaluate", "Vanilla versus intervened metrics on an episode file");
    evaluate->add_option("--out-dir", eval_dir, "Directory every other path is relative to");
    evaluate->add_option("--model", model_path, "Model checkpoint")->required();
    evaluate->add_option("--plan", plan_path, "Intervention plan JSON")->required();
    evaluate->add_option("--episodes", episodes_path, "Episodes (JSON lines)")->required();
    evaluate->add_option("--out", eval_out, "Write metrics here instead of stdout");

    std::vector<std::string> tensors;
    int layer = 0, head = 0;
    std::string project_out;
    std::optional<std::string> gmm_path;
    std::string project_dir = ".";
    std::size_t k = 8;
    std::uint64_t seed = 1;
    auto* project = app.add_subcommand("project", "2-D PCA projection of one head's activations as CSV");
    project->add_option("--tensor", tensors, "Activation tensor, optionally PATH=LABEL (repeatable)")->required();
    project->add_option("--layer", layer, "Layer index")->required();
    project->add_option("--head", head, "Head index")->required();
    project->add_option("--out", project_out, "CSV output")->required();
    project->add_option("--gmm", gmm_path, "Mixture used for component_id (default: fit one)");
    project->add_option("--k", k, "Components when fitting a mixture")->check(CLI::PositiveNumber);
    project->add_option("--seed", seed, "Seed when fitting a mixture");
    project->add_option("--out-dir", project_dir, "Directory every other path is relative to");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (pipeline->parsed()) return cmd_pipeline(config_path, pipeline_out, std::cout, std::cerr);
    if (evaluate->parsed()) {
        std::optional<fs::path> out;
        if (eval_out) out = *eval_out;
        return cmd_evaluate(eval_dir, model_path, plan_path, episodes_path, out, std::cout, std::cerr);
    }
    try {
        const fs::path dir = project_dir;
        std::vector<ProjectInput> inputs;
        for (const auto& t : tensors) {
            auto in = parse_tensor_arg(t);
            in.tensor = dir / in.tensor;
            inputs.push_back(std::move(in));
        }
        std::optional<fs::path> g;
        if (gmm_path) g = dir / *gmm_path;
        const Vector explained = project_to_csv(inputs, layer, head, dir / project_out, g, k, seed);
        std::cout << dump_json(Json{{"explained_variance_ratio", {explained(0), explained(1)}}});
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}
