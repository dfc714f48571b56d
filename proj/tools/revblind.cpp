#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "revblind/errors.hpp"
#include "revblind/pipeline.hpp"

namespace {

nlohmann::json load_config_json(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw revblind::ConfigError("cannot open config file '" + path + "'");
    std::ostringstream text;
    text << f.rdbuf();
    try {
        return nlohmann::json::parse(text.str());
    } catch (const nlohmann::json::exception& e) {
        throw revblind::ConfigError("config file '" + path + "': " + e.what());
    }
}

} // namespace

int main(int argc, char** argv) {
    using namespace revblind;

    CLI::App app{"Blind T60/C50 estimation workbench: data synthesis, three-stage "
                 "training, evaluation, ablation and reporting"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    std::vector<std::string> overrides;
    int jobs = 1;
    bool force = false;
    std::string condition = "proposed";

    auto* config_opt = app.add_option("--config", config_path, "JSON config file");
    auto* seed_opt = app.add_option("--seed", seed, "master seed (overrides the config)");
    auto* out_opt = app.add_option("--out", out_dir, "artifact root (overrides the config)");
    app.add_option("--set", overrides, "config override, section.key=value (repeatable)");
    app.add_option("--jobs", jobs, "worker bound for ablate")->check(CLI::PositiveNumber);
    app.add_flag("--force", force, "redo a finished run");

    const char* commands[] = {"synth-data",  "groundtruth", "train-stage1", "train-stage2",
                              "train-stage3", "eval",        "reconstruct",  "ablate",
                              "report"};
    const char* blurbs[] = {"generate the synthetic dataset",
                            "recompute acoustic parameters from the stored waveforms",
                            "train the RIR auto-encoder",
                            "train the speech-to-latent encoder",
                            "train the downstream parameter regressor",
                            "cross-validated metrics for one condition",
                            "decode latents and score reconstructions",
                            "latent size / quantizer grid study",
                            "merge evaluation artifacts into one report"};
    for (std::size_t i = 0; i < std::size(commands); ++i) {
        CLI::App* sub = app.add_subcommand(commands[i], blurbs[i]);
        sub->fallthrough();
        if (std::string(commands[i]) == "eval")
            sub->add_option("--condition", condition, "proposed | e2e | upper-bound")
                ->check(CLI::IsMember({"proposed", "e2e", "upper-bound"}));
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2; // usage problems are config errors
    }

    try {
        nlohmann::json j = config_opt->count() > 0 ? load_config_json(config_path)
                                                   : pipeline_to_json(default_pipeline_config());
        for (const std::string& o : overrides) apply_override(j, o);
        PipelineConfig cfg = pipeline_from_json(j);
        if (seed_opt->count() > 0) cfg.seed = seed;
        if (out_opt->count() > 0) cfg.out = out_dir;

        std::string command = app.get_subcommands().front()->get_name();
        if (command == "eval")
            command += condition == "upper-bound" ? "-upper-bound" : "-" + condition;

        run_command(command, cfg, force, jobs, std::cout);
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for_current_exception();
    }
}
