#pragma once

#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "revblind/dataset.hpp"
#include "revblind/downstream.hpp"
#include "revblind/speech_encoder.hpp"
#include "revblind/vae.hpp"
#include "json.hpp"

namespace revblind {

/// A command was issued before the stage that feeds it had produced its
/// artifacts; `stage` names exactly what to run first.
struct MissingStageError : std::runtime_error {
    std::string stage;
    explicit MissingStageError(std::string missing)
        : std::runtime_error("missing prerequisite artifacts: run '" + missing + "' first"),
          stage(std::move(missing)) {}
};

struct StageTrainParams {
    std::size_t epochs = 1;
    std::size_t batch_size = 16;
    double lr = 1e-3;
};

struct EvalOptions {
    std::vector<int> e2e_folds = {0}; // joint baseline is costly; fold subset
};

struct AblationOptions {
    std::vector<std::size_t> latent_dims = {4, 16};
    std::vector<int> quant_bits = {0, 4};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    // reduced budgets so a full grid stays tractable on one core
    std::size_t stage1_epochs = 12;
    std::size_t stage2_epochs = 3;
    std::size_t stage3_epochs = 30;
};

struct PipelineConfig {
    DatasetConfig dataset;
    VaeConfig vae;
    SpeechEncoderConfig speech;
    RegressorConfig regressor;
    StageTrainParams stage1{50, 16, 1e-3};
    StageTrainParams stage2{12, 16, 1e-3};
    StageTrainParams stage3{60, 32, 1e-3};
    EvalOptions eval;
    AblationOptions ablation;
    std::uint64_t seed = 1;
    std::string out = "runs";

    /// Propagates the shared geometry (mel shape from the dataset frontend,
    /// latent width across stages), seeds the dataset from the master seed
    /// and validates every section.
    void derive_and_validate();
};

PipelineConfig default_pipeline_config();

nlohmann::json pipeline_to_json(const PipelineConfig& cfg);
PipelineConfig pipeline_from_json(const nlohmann::json& j);

/// Applies one `--set dotted.path=value` override; the value is parsed as
/// JSON when possible and kept as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

std::uint64_t fnv1a(const std::string& bytes);

/// The slice of the config that affects a command's artifacts; commands
/// whose inputs did not change keep their run directory across edits
/// elsewhere in the config.
nlohmann::json command_projection(const PipelineConfig& cfg, const std::string& command);

/// `<out>/<command>-<16 hex digits of the projection hash>`.
std::string run_dir(const PipelineConfig& cfg, const std::string& command);

bool run_done(const std::string& dir);

/// Executes one subcommand. Logs machine-parseable key=value lines. Returns
/// the process exit code contract: 0 ok; throws ConfigError (2),
/// MissingStageError (3) or NumericalError (4) for the CLI to map.
void run_command(const std::string& command, const PipelineConfig& cfg, bool force,
                 int jobs, std::ostream& log);

/// Maps a thrown pipeline error onto the CLI exit code contract.
int exit_code_for_current_exception();

} // namespace revblind
