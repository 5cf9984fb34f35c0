// ivae-lab: command-line experiment runner.
//
//   ivae-lab <generate|train|eval|sweep|causal|demo-2d> --config <path> [--out <dir>] [--seed <int>] [--parallel <int>]
//   ivae-lab schema
//
// Exit codes: 0 success, 1 configuration error, 2 runtime or numeric failure. Errors are
// reported on stderr as a single JSON line.

#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "ivae/ivae.hpp"

namespace {

int fail(int code, const std::string& kind, const std::string& message) {
    std::cerr << nlohmann::json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << std::endl;
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"iVAE experiment runner"};
    app.require_subcommand(1);
    std::string config_path, out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> parallel;

    const std::vector<std::string> commands = {"generate", "train", "eval", "sweep", "causal", "demo-2d"};
    for (const auto& name : commands) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "experiment configuration (JSON)")->required();
        sub->add_option("--out", out, "output root (default: $IVAE_LAB_OUT, then the config's output_dir)");
        sub->add_option("--seed", seed, "global seed override");
        sub->add_option("--parallel", parallel, "worker threads for sweep and causal")->check(CLI::PositiveNumber);
    }
    app.add_subcommand("schema", "print the configuration JSON Schema");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(1, "usage", e.what());
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        if (command == "schema") {
            std::cout << ivae::config_schema().dump(2) << std::endl;
            return 0;
        }
        ivae::ExperimentConfig cfg = ivae::load_config(config_path);
        if (!cfg.command.empty() && cfg.command != command)
            throw ivae::ConfigError("config is for command '" + cfg.command + "', not '" + command + "'");
        cfg.command = command;
        if (seed) cfg.seed = *seed;
        if (parallel) cfg.parallel = *parallel;
        const auto root = ivae::output_root(out, cfg);
        const auto res = ivae::run_command(command, cfg, root, cfg.parallel);
        std::cout << res.summary.dump() << std::endl;
        return 0;
    } catch (const ivae::ConfigError& e) {
        return fail(1, "config", e.what());
    } catch (const nlohmann::json::exception& e) {
        return fail(1, "config", e.what());
    } catch (const ivae::ShapeError& e) {
        return fail(2, "shape", e.what());
    } catch (const ivae::NumericError& e) {
        return fail(2, "numeric", e.what());
    } catch (const ivae::DomainError& e) {
        return fail(2, "domain", e.what());
    } catch (const std::exception& e) {
        return fail(2, "runtime", e.what());
    }
}
