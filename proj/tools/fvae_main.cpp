#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "fvae/pipeline.hpp"

namespace {

struct CliArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string seed, out, temperature, epochs;
};

void add_common(CLI::App* cmd, CliArgs& args) {
    cmd->add_option("--config", args.config_path, "config file (key = value lines)");
    cmd->add_option("--set", args.overrides, "override a config key (key=value, repeatable)");
    cmd->add_option("--seed", args.seed, "master seed (overrides config)");
    cmd->add_option("--out", args.out, "output directory");
    cmd->add_option("--temperature", args.temperature, "sampling temperature for the Glow base");
    cmd->add_option("--epochs", args.epochs, "epoch count for the trained phase");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-phase VAE + conditional Glow pipeline"};
    app.require_subcommand(1);

    const std::vector<std::string> commands = {"train-vae", "train-glow",  "sample", "interpolate",
                                               "eval",      "compare-prior", "report"};
    CliArgs args;
    for (const auto& name : commands) add_common(app.add_subcommand(name), args);

    CLI11_PARSE(app, argc, argv);
    const std::string command = app.get_subcommands().front()->get_name();

    try {
        fvae::ConfigMap cfg = fvae::resolve_config(args.config_path, {});
        // command-line flags beat file values beat defaults
        for (const std::string& o : args.overrides) cfg.apply_override(o);
        if (!args.seed.empty()) cfg.set("seed", args.seed);
        if (!args.out.empty()) cfg.set("out", args.out);
        if (!args.temperature.empty()) {
            cfg.set("sample.temperature", args.temperature);
            cfg.set("interpolate.temperature", args.temperature);
        }
        if (!args.epochs.empty()) {
            if (command == "train-glow")
                cfg.set("train.epochs_phase2", args.epochs);
            else
                cfg.set("train.epochs_phase1", args.epochs);
        }
        return fvae::pipeline::run_command(command, cfg);
    } catch (const fvae::CliError& e) {
        std::cerr << "error: " << e.slug << (e.detail.empty() ? "" : " " + e.detail) << "\n";
        return e.exit_code;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: precondition-failed " << e.what() << "\n";
        return 2;
    } catch (const std::logic_error& e) {
        std::cerr << "error: precondition-failed " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: runtime-failure " << e.what() << "\n";
        return 1;
    }
}
