#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mg/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"melgraph: siamese + graph-network music-genre experiment pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::vector<double> fractions;
    std::vector<std::string> overrides;

    std::vector<CLI::App*> stages;
    for (const char* name : {"prepare", "train-siamese", "embed", "train-gnn", "evaluate",
                             "explain", "all"}) {
        CLI::App* sub = app.add_subcommand(name, std::string("run the ") + name + " stage");
        sub->add_option("--config", config_path, "experiment config file")->required();
        sub->add_option("--seed", seed, "master seed (overrides [run] seed)")
            ->each([&](const std::string&) { seed_given = true; });
        sub->add_option("--out", out_dir, "output dir (overrides [run] out)");
        sub->add_option("--labeled-fraction", fractions,
                        "labeled fraction, repeatable (overrides [split] labeled_fractions)");
        sub->add_option("--set", overrides, "extra override as section.key=value, repeatable");
        stages.push_back(sub);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        mg::pipe::ExperimentConfig config = mg::pipe::parse_config_file(config_path);
        if (seed_given) {
            config.seed = seed;
            config.seed_set = true;
        }
        if (!out_dir.empty()) config.out = out_dir;
        if (!fractions.empty()) config.labeled_fractions = fractions;
        for (const auto& kv : overrides) {
            size_t eq = kv.find('=');
            if (eq == std::string::npos)
                throw mg::pipe::ConfigError("--set expects section.key=value, got '" + kv + "'");
            mg::pipe::apply_override(config, kv.substr(0, eq), kv.substr(eq + 1));
        }
        mg::pipe::run_stage(config, app.get_subcommands().front()->get_name());
    } catch (const mg::pipe::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
