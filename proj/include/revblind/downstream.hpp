#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "revblind/acoustics.hpp"
#include "revblind/layers.hpp"
#include "revblind/speech_encoder.hpp"
#include "revblind/vae.hpp"

namespace revblind {

// ------------------------------------------------------------ metrics

/// Per-column regression metrics. A column whose prediction or truth has
/// zero variance leaves the correlation undefined; it is flagged rather
/// than substituted.
struct ColumnMetrics {
    double mae = 0.0;
    double bias = 0.0;
    double pcc = 0.0;
    bool pcc_defined = true;
};

/// Column-wise MAE / BIAS / Pearson correlation between two (N, C) tables,
/// N >= 2.
std::vector<ColumnMetrics> compute_metrics(const Tensor& pred, const Tensor& truth);

// ------------------------------------------------------------ regressor

struct RegressorConfig {
    std::size_t input_dim = 16;
    std::vector<std::size_t> hidden = {64};
    std::size_t output_dim = 2 * kNumOctaveBands; // 7-band T60 + 7-band C50

    void validate() const;
};

/// Per-column normalization constants fitted on the training targets.
struct TargetStats {
    std::vector<double> mean;
    std::vector<double> sd; // floored at 1e-12

    bool fitted() const { return !mean.empty(); }
};

TargetStats fit_target_stats(const Tensor& targets);
Tensor zscore(const Tensor& y, const TargetStats& s);
Tensor unzscore(const Tensor& z, const TargetStats& s);

/// Shallow MLP over frozen embeddings, trained in z-scored target space and
/// reporting in physical units.
class ParamRegressor {
  public:
    explicit ParamRegressor(RegressorConfig cfg);

    const RegressorConfig& config() const { return cfg_; }
    void init(std::uint64_t seed);
    std::vector<Param*> params() { return stack_.params(); }
    void set_precision(Precision p) { stack_.set_precision(p); }
    void zero_grad() { stack_.zero_grad(); }
    std::size_t param_count() { return stack_.param_count(); }

    const TargetStats& stats() const { return stats_; }
    void set_stats(TargetStats s);

    /// Raw network output in z-scored space, (N, input_dim) -> (N, output_dim).
    Tensor forward_z(const Tensor& x, bool training);
    Tensor backward(const Tensor& dz) { return stack_.backward(dz); }

    /// De-normalized predictions in physical units; requires fitted stats.
    Tensor predict(const Tensor& x);

    Sequential& stack() { return stack_; }

  private:
    RegressorConfig cfg_;
    Sequential stack_;
    TargetStats stats_;
};

// ------------------------------------------------------------ stage III

struct Stage3TrainConfig {
    std::size_t epochs = 60;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    std::uint64_t seed = 1;
};

struct Stage3EpochLoss {
    double train_mse = 0.0; // z-scored space
    double val_mse = 0.0;
};

struct Stage3Result {
    std::vector<Stage3EpochLoss> epochs;
    std::size_t best_epoch = 0;
    double best_val_mse = 0.0;
    double val_target_variance = 0.0; // mean distance^2 from the val mean, z-space
};

/// Fits normalization stats on y_train, z-scores both target tables and
/// trains the regressor with Adam; the best-validation parameters are
/// restored on return. Inputs are precomputed embeddings, so upstream
/// encoders stay untouched by construction.
Stage3Result train_stage3(ParamRegressor& model, const Tensor& x_train, const Tensor& y_train,
                          const Tensor& x_val, const Tensor& y_val, const Stage3TrainConfig& cfg);

/// Frozen-encoder embeddings for a batch of speech mels, (N, D).
Tensor speech_embeddings(SpeechEncoder& enc, const std::vector<const MelSpectrogram*>& segments);

void save_regressor(const std::string& path, ParamRegressor& model, std::uint64_t encoder_hash);

struct LoadedRegressor {
    std::unique_ptr<ParamRegressor> model;
    std::uint64_t encoder_hash = 0;
};

LoadedRegressor load_regressor(const std::string& path);

// ------------------------------------------------------------ end-to-end baseline

/// Speech-encoder trunk and regression head trained jointly from scratch —
/// the ablation answering what the two-stage pretraining buys.
class E2eBaseline {
  public:
    E2eBaseline(SpeechEncoderConfig enc_cfg, RegressorConfig head_cfg);

    SpeechEncoder& encoder() { return enc_; }
    ParamRegressor& head() { return head_; }
    void init(std::uint64_t seed);
    std::vector<Param*> params();
    std::size_t param_count() { return enc_.param_count() + head_.param_count(); }
    void set_precision(Precision p);

    Tensor predict(const Tensor& mels); // (N,1,F,T) -> (N, 14) physical units

  private:
    SpeechEncoder enc_;
    ParamRegressor head_;
};

Stage3Result train_e2e_baseline(E2eBaseline& model, const Tensor& x_train, const Tensor& y_train,
                                const Tensor& x_val, const Tensor& y_val,
                                const Stage3TrainConfig& cfg);

void save_e2e(const std::string& path, E2eBaseline& model);
std::unique_ptr<E2eBaseline> load_e2e(const std::string& path);

// ------------------------------------------------------------ cross-validation

enum class Condition : int { proposed = 0, e2e = 1, upper_bound = 2 };
const char* to_string(Condition c);

/// Splits ids into k nearly equal folds in the order given; the remainder
/// goes to the earliest folds. Every id lands in exactly one fold.
std::vector<std::vector<int>> kfold_split(const std::vector<int>& ids, int k);

struct MetricRow {
    std::string parameter; // "t60" | "c50"
    double band_hz = 0.0;
    std::string metric; // "mae" | "bias" | "pcc" | "mae_std"
    Condition condition = Condition::proposed;
    int fold = -1; // -1 = averaged over folds
    double value = 0.0;
    bool defined = true;
};

struct EvalReport {
    std::vector<MetricRow> rows;
};

/// Embedding table, per-row physical targets and fold labels for the
/// held-out split used by the downstream stage.
struct Stage3Data {
    Tensor inputs;  // (N, D)
    Tensor targets; // (N, 14) physical units
    std::vector<int> rir_ids;
    std::vector<int> folds; // 0..k-1 per row
};

/// Builds the standard metric-row block from per-fold column metrics:
/// per-fold rows in the order given, then a fold-mean row (fold -1) and an
/// "_std" spread row per column and metric. A mean PCC is only defined when
/// every fold's PCC was.
EvalReport fold_metric_rows(const std::vector<std::vector<ColumnMetrics>>& per_fold,
                            const std::vector<int>& fold_ids, Condition cond);

/// Rotating cross-validation: fold f tests, fold (f+1) mod k validates, the
/// rest trains a fresh regressor. Emits per-fold metric rows plus fold-mean
/// (fold -1) and an "_std" row with the across-fold standard deviation.
EvalReport kfold_evaluate(const Stage3Data& data, const RegressorConfig& rcfg,
                          const Stage3TrainConfig& tcfg, Condition cond, int k);

EvalReport merge_reports(const std::vector<EvalReport>& parts);
std::string eval_report_csv(const EvalReport& r);
/// Fold-averaged values as a fixed-width table, one row per parameter/band,
/// one column group per condition.
std::string eval_report_table(const EvalReport& r);

// ------------------------------------------------------------ reconstruction study

struct ReconHistogram {
    double bin_width = 0.25;
    double lo = 0.0, hi = 12.0; // dB; the last bin absorbs anything above
    std::vector<std::size_t> counts;
};

struct ReconReport {
    std::vector<double> estimated_mae_db; // decode(speech embedding) vs RIR mel, per segment
    std::vector<double> true_mae_db;      // decode(posterior mean) vs RIR mel, per RIR
    ReconHistogram estimated_hist;
    ReconHistogram true_hist;
};

ReconHistogram histogram(const std::vector<double>& values);
double median(std::vector<double> values);

/// Decodes speech-estimated and true RIR latents through the frozen
/// auto-encoder and scores both against the RIR log-mel target in dB.
/// segment_rirs[i] is the RIR mel underlying segments[i].
ReconReport reconstruction_report(RirVae& vae, SpeechEncoder& enc,
                                  const std::vector<const MelSpectrogram*>& segments,
                                  const std::vector<const MelSpectrogram*>& segment_rirs,
                                  const std::vector<const MelSpectrogram*>& unique_rirs);

// ------------------------------------------------------------ ablation grid

struct AblationCell {
    std::size_t latent_dim = 0;
    int quant_bits = 0; // 0 = continuous
    double t60_mae = 0.0;
    double c50_mae = 0.0;
    double recon_mae_db = 0.0;
};

struct AblationReport {
    std::vector<AblationCell> cells; // row-major over (latent_dim, quant_bits)
};

using CellRunner = std::function<AblationCell(std::size_t latent_dim, int quant_bits)>;

/// Runs the supplied trainer for every (D, B) combination in order. The
/// runner owns the heavy lifting so grids can be driven by the full
/// pipeline or by a stub in tests.
AblationReport ablation_grid(const std::vector<std::size_t>& d_list, const std::vector<int>& b_list,
                             const CellRunner& run_cell);

std::string ablation_csv(const AblationReport& r);

} // namespace revblind
