#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metanas/errors.hpp"
#include "metanas/run.hpp"

namespace {

namespace fs = std::filesystem;
using metanas::run::apply_overrides;
using metanas::run::load_config_file;

nlohmann::json resolved_config(const std::string& config_path,
                               const std::vector<std::string>& overrides) {
    nlohmann::json config = load_config_file(config_path);
    apply_overrides(config, overrides);
    return config;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"architecture search + meta-learning experiment runner"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string archs_path;
    std::string task_config_path;
    std::string log_path;
    std::string table_out_path;
    std::string svg_out_path;
    double plot_beta = 0.95;

    auto add_config_opts = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run configuration JSON file")->required();
        cmd->add_option("--set", overrides,
                        "override a config leaf, e.g. --set search.steps=50");
    };

    CLI::App* cmd_search = app.add_subcommand("search", "run the architecture search");
    add_config_opts(cmd_search);

    CLI::App* cmd_retrain =
        app.add_subcommand("retrain", "retrain architectures from scratch and rank them");
    add_config_opts(cmd_retrain);
    cmd_retrain->add_option("--archs", archs_path, "text file, one architecture per line")
        ->required();

    CLI::App* cmd_transfer =
        app.add_subcommand("transfer", "retrain architectures under a new task configuration");
    add_config_opts(cmd_transfer);
    cmd_transfer->add_option("--archs", archs_path, "text file, one architecture per line")
        ->required();
    cmd_transfer
        ->add_option("--task-config", task_config_path,
                     "JSON overlay merged over the base config (new episode settings)")
        ->required();

    CLI::App* cmd_plot = app.add_subcommand("plot", "moving-average reward curve from a log");
    cmd_plot->add_option("--log", log_path, "transitions.jsonl produced by search")->required();
    cmd_plot->add_option("--beta", plot_beta, "EMA decay (matches the search baseline)");
    cmd_plot->add_option("--out", table_out_path, "write the text table here instead of stdout");
    cmd_plot->add_option("--svg", svg_out_path, "also write an SVG curve");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (cmd_search->parsed()) {
            metanas::run::search_command(resolved_config(config_path, overrides));
        } else if (cmd_retrain->parsed()) {
            metanas::run::retrain_command(resolved_config(config_path, overrides), archs_path);
        } else if (cmd_transfer->parsed()) {
            metanas::run::transfer_command(resolved_config(config_path, overrides), archs_path,
                                           load_config_file(task_config_path));
        } else if (cmd_plot->parsed()) {
            const fs::path svg(svg_out_path);
            if (table_out_path.empty()) {
                metanas::run::plot_command(log_path, plot_beta, std::cout,
                                           svg_out_path.empty() ? nullptr : &svg);
            } else {
                std::ofstream out(table_out_path);
                if (!out) throw metanas::Error("cannot open " + table_out_path);
                metanas::run::plot_command(log_path, plot_beta, out,
                                           svg_out_path.empty() ? nullptr : &svg);
            }
        }
    } catch (const metanas::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const metanas::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
