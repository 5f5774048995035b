#include "metanas/run.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "metanas/checkpoint.hpp"
#include "metanas/controller.hpp"

namespace metanas::run {

namespace fs = std::filesystem;
using nlohmann::json;

nlohmann::json load_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    return j;
}

void apply_overrides(json& config, const std::vector<std::string>& overrides) {
    for (const std::string& ov : overrides) {
        const std::size_t eq = ov.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("override '" + ov + "' must look like path.to.field=value");
        const std::string path = ov.substr(0, eq);
        const std::string raw = ov.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::exception&) {
            value = raw;  // unquoted strings are passed through
        }
        json* node = &config;
        std::size_t pos = 0;
        while (true) {
            const std::size_t dot = path.find('.', pos);
            const std::string key = path.substr(pos, dot - pos);
            if (key.empty()) throw ConfigError("override '" + ov + "' has an empty path segment");
            if (dot == std::string::npos) {
                (*node)[key] = value;
                break;
            }
            node = &(*node)[key];
            if (!node->is_object() && !node->is_null())
                throw ConfigError("override '" + ov + "': '" + key + "' is not an object");
            pos = dot + 1;
        }
    }
}

json merge_configs(json base, const json& overlay) {
    if (!overlay.is_object() || !base.is_object()) return overlay;
    for (const auto& [key, value] : overlay.items()) {
        if (base.contains(key) && base[key].is_object() && value.is_object())
            base[key] = merge_configs(base[key], value);
        else
            base[key] = value;
    }
    return base;
}

namespace {

template <typename T>
T get_field(const json& j, const std::string& section, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: field '" + (section.empty() ? key : section + "." + key) +
                          "' has the wrong type");
    }
}

ReptileConfig parse_reptile(const json& j, const std::string& section, ReptileConfig base) {
    base.outer_iterations = get_field(j, section, "outer_iterations", base.outer_iterations);
    base.outer_step_size = get_field(j, section, "outer_step_size", base.outer_step_size);
    base.meta_batch = get_field(j, section, "meta_batch", base.meta_batch);
    base.inner_iterations = get_field(j, section, "inner_iterations", base.inner_iterations);
    base.inner_batch = get_field(j, section, "inner_batch", base.inner_batch);
    base.inner_lr = get_field(j, section, "inner_lr", base.inner_lr);
    base.train_shots = get_field(j, section, "train_shots", base.train_shots);
    base.eval_inner_iterations =
        get_field(j, section, "eval_inner_iterations", base.eval_inner_iterations);
    base.eval_inner_batch = get_field(j, section, "eval_inner_batch", base.eval_inner_batch);
    base.linear_decay = get_field(j, section, "linear_decay", base.linear_decay);
    base.outer_adam = get_field(j, section, "outer_adam", base.outer_adam);
    base.outer_adam_lr = get_field(j, section, "outer_adam_lr", base.outer_adam_lr);
    base.eval_episodes = get_field(j, section, "eval_episodes", base.eval_episodes);
    try {
        validate(base);
    } catch (const ConfigError& e) {
        throw ConfigError("config: section '" + section + "': " + e.what());
    }
    return base;
}

// Truncated schedule used per sampled architecture during search.
ReptileConfig default_search_reward_config() {
    ReptileConfig cfg;
    cfg.outer_iterations = 100;
    cfg.outer_adam = false;
    cfg.eval_episodes = 10;
    return cfg;
}

// Retrain schedule; outer delta routed through Adam as in the final-retrain
// setup.
ReptileConfig default_retrain_config() {
    ReptileConfig cfg;
    cfg.outer_adam = true;
    return cfg;
}

}  // namespace

RunConfig parse_run_config(const json& config) {
    RunConfig rc;
    if (!config.contains("seed"))
        throw ConfigError("config: missing required field 'seed'");
    try {
        rc.seed = config.at("seed").get<std::uint64_t>();
    } catch (const json::exception&) {
        throw ConfigError("config: field 'seed' must be a non-negative integer");
    }
    rc.output_dir = get_field(config, "", "output_dir", std::string());

    const json episode = config.value("episode", json::object());
    rc.episode.dataset = get_field(episode, "episode", "dataset", rc.episode.dataset);
    if (rc.episode.dataset != "synthetic" && rc.episode.dataset != "corpus")
        throw ConfigError("config: episode.dataset must be 'synthetic' or 'corpus'");
    rc.episode.task.n_way = get_field(episode, "episode", "n_way", rc.episode.task.n_way);
    rc.episode.task.k_shot = get_field(episode, "episode", "k_shot", rc.episode.task.k_shot);
    rc.episode.task.k_test = get_field(episode, "episode", "k_test", rc.episode.task.k_test);
    rc.episode.image_size = get_field(episode, "episode", "image_size", rc.episode.image_size);
    rc.episode.classes = get_field(episode, "episode", "classes", rc.episode.classes);
    if (episode.contains("split_fractions")) {
        const auto fr = episode.at("split_fractions");
        if (!fr.is_array() || fr.size() != 3)
            throw ConfigError("config: episode.split_fractions must be an array of 3 numbers");
        for (std::size_t i = 0; i < 3; ++i) rc.episode.split_fractions[i] = fr[i].get<double>();
    }
    const json glyph = episode.value("glyph", json::object());
    rc.episode.glyph.grid = rc.episode.image_size;
    rc.episode.glyph.strokes = get_field(glyph, "episode.glyph", "strokes", rc.episode.glyph.strokes);
    rc.episode.glyph.jitter = get_field(glyph, "episode.glyph", "jitter", rc.episode.glyph.jitter);
    rc.episode.glyph.rotations =
        get_field(glyph, "episode.glyph", "rotations", rc.episode.glyph.rotations);
    rc.episode.glyph.pixel_noise =
        get_field(glyph, "episode.glyph", "pixel_noise", rc.episode.glyph.pixel_noise);
    rc.episode.glyph.instances_per_class =
        get_field(glyph, "episode.glyph", "instances_per_class", rc.episode.glyph.instances_per_class);
    rc.episode.corpus_root = get_field(episode, "episode", "corpus_root", rc.episode.corpus_root);
    if (rc.episode.dataset == "corpus" && rc.episode.corpus_root.empty())
        throw ConfigError("config: episode.corpus_root required for dataset 'corpus'");
    if (rc.episode.task.n_way < 2) throw ConfigError("config: episode.n_way must be >= 2");
    if (rc.episode.task.k_shot < 1 || rc.episode.task.k_test < 1)
        throw ConfigError("config: episode shot counts must be positive");

    const json model = config.value("model", json::object());
    rc.model.base_channels = get_field(model, "model", "base_channels", rc.model.base_channels);
    rc.model.image_channels = 1;
    rc.model.image_size = rc.episode.image_size;
    rc.model.dropout_rate = get_field(model, "model", "dropout_rate", rc.model.dropout_rate);
    rc.model.dropout_enabled = get_field(model, "model", "dropout_enabled", rc.model.dropout_enabled);
    rc.model.dropout_per_layer =
        get_field(model, "model", "dropout_per_layer", rc.model.dropout_per_layer);
    if (rc.model.base_channels == 0) throw ConfigError("config: model.base_channels must be >= 1");
    if (rc.model.dropout_rate < 0.0 || rc.model.dropout_rate >= 1.0)
        throw ConfigError("config: model.dropout_rate must lie in [0,1)");

    const json search = config.value("search", json::object());
    rc.search.loop.layers = get_field(search, "search", "layers", rc.search.loop.layers);
    rc.search.loop.steps = get_field(search, "search", "steps", rc.search.loop.steps);
    rc.search.loop.learning_rate =
        get_field(search, "search", "learning_rate", rc.search.loop.learning_rate);
    rc.search.loop.baseline_decay =
        get_field(search, "search", "baseline_decay", rc.search.loop.baseline_decay);
    rc.search.loop.replay_period =
        get_field(search, "search", "replay_period", rc.search.loop.replay_period);
    rc.search.loop.replay_count =
        get_field(search, "search", "replay_count", rc.search.loop.replay_count);
    rc.search.loop.buffer_capacity =
        get_field(search, "search", "buffer_capacity", rc.search.loop.buffer_capacity);
    rc.search.loop.top_n = get_field(search, "search", "top_n", rc.search.loop.top_n);
    rc.search.hidden_size = get_field(search, "search", "hidden_size", rc.search.hidden_size);
    rc.search.embed_size = get_field(search, "search", "embed_size", rc.search.embed_size);
    if (rc.search.loop.layers == 0) throw ConfigError("config: search.layers must be >= 1");
    if (rc.search.loop.steps < 0) throw ConfigError("config: search.steps must be >= 0");
    if (rc.search.loop.learning_rate <= 0.0)
        throw ConfigError("config: search.learning_rate must be positive");
    rc.search.reward =
        parse_reptile(search.value("reward", json::object()), "search.reward",
                      default_search_reward_config());

    rc.reptile = parse_reptile(config.value("reptile", json::object()), "reptile",
                               default_retrain_config());
    rc.test_episodes = get_field(config, "", "test_episodes", rc.test_episodes);
    if (rc.test_episodes < 1) throw ConfigError("config: test_episodes must be >= 1");
    return rc;
}

PoolTriple build_pools(const RunConfig& cfg) {
    Rng rng(derive_seed(cfg.seed, 100));
    if (cfg.episode.dataset == "synthetic") {
        SyntheticGlyphSpec spec = cfg.episode.glyph;
        spec.grid = cfg.episode.image_size;
        return make_synthetic_pool(spec, cfg.episode.classes, cfg.episode.split_fractions, rng);
    }
    const fs::path root = cfg.episode.corpus_root;
    if (fs::is_directory(root / "meta-train")) {
        PoolTriple pools;
        pools.train = load_corpus(root / "meta-train", cfg.episode.image_size);
        pools.val = load_corpus(root / "meta-val", cfg.episode.image_size);
        pools.test = load_corpus(root / "meta-test", cfg.episode.image_size);
        pools.train.split = "meta-train";
        pools.val.split = "meta-val";
        pools.test.split = "meta-test";
        return pools;
    }
    return split_pool(load_corpus(root, cfg.episode.image_size), cfg.episode.split_fractions, rng);
}

namespace {

void write_text_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << content;
    if (!out) throw Error("write failed for " + path.string());
}

void write_manifest(const fs::path& path, const PoolTriple& pools) {
    json manifest;
    for (const ClassPool* pool : {&pools.train, &pools.val, &pools.test})
        for (const auto& cls : pool->classes) manifest[cls.name] = pool->split;
    write_text_file(path, manifest.dump(2) + "\n");
}

void write_run_meta(const fs::path& path, double wall_seconds) {
    // wall-clock data lives in this side file only, so every other output is
    // byte-identical across reruns
    json meta;
    meta["wall_clock_seconds"] = wall_seconds;
    meta["finished_at_unix"] =
        std::chrono::duration_cast<std::chrono::seconds>(
            std::chrono::system_clock::now().time_since_epoch())
            .count();
    write_text_file(path, meta.dump(2) + "\n");
}

fs::path prepare_output_dir(const RunConfig& rc) {
    if (rc.output_dir.empty())
        throw ConfigError("config: missing required field 'output_dir'");
    const fs::path dir(rc.output_dir);
    fs::create_directories(dir);
    return dir;
}

void save_policy(const fs::path& path, ControllerPolicy& policy) {
    std::vector<NamedTensor> tensors;
    const auto names = policy.param_names();
    const auto params = policy.params();
    for (std::size_t i = 0; i < params.size(); ++i) tensors.push_back({names[i], *params[i]});
    save_checkpoint(path, tensors);
}

struct RetrainArtifacts {
    std::vector<RetrainOutcome> outcomes;
    json report;
};

RetrainArtifacts run_retrain_core(const RunConfig& rc, const json& resolved,
                                  const std::vector<ArchitectureString>& archs,
                                  const fs::path& dir) {
    const PoolTriple pools = build_pools(rc);
    write_manifest(dir / "manifest.json", pools);
    write_text_file(dir / "resolved_config.json", resolved.dump(2) + "\n");

    std::size_t max_depth = 1;
    for (const auto& a : archs) max_depth = std::max(max_depth, a.depth());
    SharedWeightBank bank(max_depth, static_cast<std::size_t>(rc.episode.task.n_way), rc.model,
                          derive_seed(rc.seed, 200));

    std::ofstream metrics(dir / "retrain_metrics.jsonl");
    RetrainArtifacts art;
    art.outcomes = retrain_top(archs, bank, pools.train, pools.val, pools.test, rc.episode.task,
                               rc.reptile, rc.test_episodes, derive_seed(rc.seed, 600),
                               metrics ? &metrics : nullptr);
    art.report = json::array();
    for (std::size_t i = 0; i < art.outcomes.size(); ++i) {
        const RetrainOutcome& o = art.outcomes[i];
        json row;
        row["arch"] = serialize(o.arch);
        row["test_accuracy"] = o.test_accuracy;
        row["episodes_evaluated"] = o.episodes_evaluated;
        row["seed"] = rc.seed;
        art.report.push_back(row);
        save_checkpoint(dir / ("theta_" + std::to_string(i) + ".ckpt"),
                        {{"theta", Tensor({o.theta.size()}, o.theta)}});
    }
    write_text_file(dir / "final_report.json", art.report.dump(2) + "\n");
    return art;
}

}  // namespace

std::vector<ArchitectureString> read_arch_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open architecture file " + path.string());
    std::vector<ArchitectureString> archs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        archs.push_back(parse_architecture(line));
    }
    return archs;
}

void search_command(const json& config) {
    const auto start = std::chrono::steady_clock::now();
    const RunConfig rc = parse_run_config(config);
    const fs::path dir = prepare_output_dir(rc);
    const PoolTriple pools = build_pools(rc);
    write_manifest(dir / "manifest.json", pools);
    write_text_file(dir / "resolved_config.json", config.dump(2) + "\n");

    SharedWeightBank bank(rc.search.loop.layers, static_cast<std::size_t>(rc.episode.task.n_way),
                          rc.model, derive_seed(rc.seed, 200));
    Rng policy_rng(derive_seed(rc.seed, 300));
    ControllerPolicy policy({rc.search.hidden_size, rc.search.embed_size}, policy_rng);
    auto reward = reward_fn_for_search(bank, pools.train, pools.val, rc.episode.task,
                                       rc.search.reward, derive_seed(rc.seed, 400));

    std::ofstream transitions(dir / "transitions.jsonl");
    if (!transitions) throw Error("cannot open transitions.jsonl for writing");
    Rng search_rng(derive_seed(rc.seed, 500));
    const SearchResult result = search(policy, rc.search.loop, reward, search_rng, &transitions);
    transitions.close();

    std::string top_text;
    for (const auto& entry : result.top) top_text += serialize(entry.first) + "\n";
    write_text_file(dir / "top_archs.txt", top_text);

    save_policy(dir / "controller.ckpt", policy);
    save_checkpoint(dir / "bank.ckpt", bank.named_tensors());
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_run_meta(dir / "run_meta.json", secs);
}

void retrain_command(const json& config, const fs::path& archs_file) {
    const auto start = std::chrono::steady_clock::now();
    const RunConfig rc = parse_run_config(config);
    const fs::path dir = prepare_output_dir(rc);
    const auto archs = read_arch_file(archs_file);
    const RetrainArtifacts art = run_retrain_core(rc, config, archs, dir);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_run_meta(dir / "run_meta.json", secs);
}

void transfer_command(const json& config, const fs::path& archs_file, const json& task_overlay) {
    // retrain from scratch under the overlaid task configuration
    retrain_command(merge_configs(config, task_overlay), archs_file);
}

void plot_command(const fs::path& log_file, double beta, std::ostream& table_out,
                  const fs::path* svg_path) {
    std::ifstream in(log_file);
    if (!in) throw ConfigError("plot: cannot open " + log_file.string());
    std::vector<std::pair<int, double>> series;  // (step, ema)
    BaselineTracker ema(beta);
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw Error("plot: bad JSONL line: " + std::string(e.what()));
        }
        const int step = rec.at("step").get<int>();
        const double reward = rec.at("reward").get<double>();
        series.emplace_back(step, ema.observe(reward));
    }
    table_out << std::setprecision(17);
    for (const auto& [step, value] : series) table_out << step << "\t" << value << "\n";

    if (svg_path && !series.empty()) {
        double lo = series[0].second, hi = series[0].second;
        for (const auto& [s, v] : series) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (hi - lo < 1e-12) {
            lo -= 0.5;
            hi += 0.5;
        }
        const double width = 640, height = 360, margin = 40;
        std::ostringstream svg;
        svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
            << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
            << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<polyline fill=\"none\" "
               "stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
        svg << std::setprecision(6);
        for (std::size_t i = 0; i < series.size(); ++i) {
            const double x =
                margin + (width - 2 * margin) * (series.size() == 1 ? 0.5 : static_cast<double>(i) / (series.size() - 1));
            const double y =
                height - margin - (height - 2 * margin) * (series[i].second - lo) / (hi - lo);
            svg << (i ? " " : "") << x << "," << y;
        }
        svg << "\"/>\n</svg>\n";
        write_text_file(*svg_path, svg.str());
    }
}

}  // namespace metanas::run
