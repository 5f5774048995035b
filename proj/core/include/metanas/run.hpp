#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metanas/child_model.hpp"
#include "metanas/episodes.hpp"
#include "metanas/pg_trainer.hpp"
#include "metanas/reptile.hpp"

namespace metanas::run {

// Fully resolved run configuration. One JSON file is the single source of
// truth; command-line --set overrides patch leaves by dotted path before
// parsing.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir;

    struct EpisodeSection {
        std::string dataset = "synthetic";  // "synthetic" | "corpus"
        TaskSpec task;
        std::size_t image_size = 16;
        std::size_t classes = 60;
        std::array<double, 3> split_fractions = {0.64, 0.16, 0.20};
        SyntheticGlyphSpec glyph;
        std::string corpus_root;
    } episode;

    ModelConfig model;

    struct SearchSection {
        SearchConfig loop;
        std::size_t hidden_size = 100;
        std::size_t embed_size = 32;
        ReptileConfig reward;  // truncated schedule used per sampled arch
    } search;

    ReptileConfig reptile;  // full retrain schedule
    int test_episodes = 50;
};

nlohmann::json load_config_file(const std::filesystem::path& path);

// Each override is "dotted.path=value"; values parse as JSON when possible
// and fall back to strings.
void apply_overrides(nlohmann::json& config, const std::vector<std::string>& overrides);

// Deep merge: objects merge recursively, everything else is replaced.
nlohmann::json merge_configs(nlohmann::json base, const nlohmann::json& overlay);

// Throws ConfigError naming the offending field.
RunConfig parse_run_config(const nlohmann::json& config);

PoolTriple build_pools(const RunConfig& cfg);

// Commands. All throw on error; the CLI maps ConfigError/ParseError to exit
// code 2 and anything else to 1.
void search_command(const nlohmann::json& config);
void retrain_command(const nlohmann::json& config, const std::filesystem::path& archs_file);
void transfer_command(const nlohmann::json& config, const std::filesystem::path& archs_file,
                      const nlohmann::json& task_overlay);
void plot_command(const std::filesystem::path& log_file, double beta, std::ostream& table_out,
                  const std::filesystem::path* svg_path = nullptr);

std::vector<ArchitectureString> read_arch_file(const std::filesystem::path& path);

}  // namespace metanas::run
