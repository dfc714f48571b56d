#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "revblind/layers.hpp"
#include "revblind/spectral.hpp"

namespace revblind {

/// Affine map from log-mel dB into the roughly unit-scale domain the models
/// train in, and back. An error of e in the scaled domain is 50 e dB.
inline double scale_mel(double db) { return (db + 50.0) / 50.0; }
inline double unscale_mel(double s) { return 50.0 * s - 50.0; }

/// Stack mel spectrograms into an (N, 1, F, T) tensor in the scaled domain.
/// Every input must have the given kind and F x T shape.
Tensor mel_batch(const std::vector<const MelSpectrogram*>& mels, SpecKind kind, std::size_t bands,
                 std::size_t frames, Precision prec = Precision::train32);

struct VaeConfig {
    std::size_t latent_dim = 16;               // D
    std::size_t quant_bits = 0;                // B; 0 disables the bottleneck quantizer
    double quant_range = 3.0;                  // R: quantizer grid spans [-R, R]
    std::vector<std::size_t> channels = {16, 32, 32, 32}; // stride-2 conv ladder
    std::size_t mel_bands = 16;                // F of the input spectrogram
    std::size_t frames = 247;                  // T of the input spectrogram
    double kl_weight = 0.01;                   // beta
    double warmup_fraction = 0.1;              // share of steps over which beta ramps 0 -> beta
    int frame_hop = 16;                        // carried into decoded spectrograms

    void validate() const;
};

/// Diagonal-Gaussian posterior over one latent vector.
struct LatentPosterior {
    std::vector<double> mu;
    std::vector<double> var; // strictly positive (exponential of the log-variance head)
};

/// Batched posterior: mu and log-variance, each (N, D).
struct BatchPosterior {
    Tensor mu;
    Tensor logvar;
};

struct ElboTerms {
    double total = 0.0;
    double recon = 0.0;
    double kl = 0.0;
};

/// z = mu + sqrt(var) * eps with eps ~ N(0, I) drawn from the seed.
std::vector<double> reparameterize(const LatentPosterior& post, std::uint64_t seed);

/// Quantizer grid spacing: 2R / (2^B - 1).
double quant_step(std::size_t bits, double range);

/// Training-time quantizer surrogate: additive noise uniform in
/// (-step/2, step/2) per entry. Pass-through when bits = 0.
std::vector<double> quantize_train(const std::vector<double>& z, std::size_t bits, double range,
                                   std::uint64_t seed);

/// Inference-time quantizer: clamp to [-R, R], then round to the nearest of
/// the 2^B uniform levels spanning [-R, R]. Pass-through when bits = 0.
std::vector<double> quantize_infer(const std::vector<double>& z, std::size_t bits, double range);

/// Inference-grid quantization applied to every row of an (N, D) latent
/// table; pass-through when bits = 0.
Tensor quantize_latent_rows(const Tensor& z, std::size_t bits, double range);

/// KL(N(mu, diag var) || N(0, I)) = 0.5 sum_d (mu_d^2 + var_d - 1 - ln var_d).
double gaussian_kl(const std::vector<double>& mu, const std::vector<double>& var);

/// Losses for one sample: recon = mean squared error over the spectrogram,
/// kl as above, total = recon + beta * kl (the minimized negated bound).
ElboTerms elbo_terms(const std::vector<double>& target, const std::vector<double>& recon,
                     const LatentPosterior& post, double beta);

/// Convolutional auto-encoder over RIR mel spectrograms with a variational
/// bottleneck: encoder -> mean/log-variance heads -> D-vector latent ->
/// output projection -> learned temporal tokens -> transposed-conv decoder.
class RirVae {
public:
    explicit RirVae(VaeConfig cfg);

    const VaeConfig& config() const { return cfg_; }
    std::size_t feature_width() const { return feat_; } // C * F' entering the heads

    void init(std::uint64_t seed);
    std::vector<Param*> params();
    void set_precision(Precision p);
    void zero_grad();
    std::size_t param_count();

    /// x: (N, 1, F, T) scaled mel batch -> posterior over (N, D).
    BatchPosterior encode_batch(const Tensor& x, bool training);
    /// z: (N, D) -> (N, 1, F, T) scaled reconstruction.
    Tensor decode_batch(const Tensor& z, bool training);

    /// Backward through decoder + output projection; returns d loss / d z.
    Tensor decode_backward(const Tensor& grad_recon);
    /// Backward through both heads and the encoder stack; returns d loss / d x.
    Tensor encode_backward(const Tensor& dmu, const Tensor& dlogvar);

    /// Single-spectrogram conveniences in the dB domain.
    LatentPosterior encode(const MelSpectrogram& h);
    MelSpectrogram decode(const std::vector<double>& z);

    Sequential& encoder_stack() { return encoder_; }
    Dense& mean_head() { return mu_head_; }
    Dense& logvar_head() { return logvar_head_; }
    Dense& output_projection() { return out_proj_; }
    Sequential& decoder_stack() { return decoder_; }

private:
    VaeConfig cfg_;
    Sequential encoder_;
    Dense mu_head_;
    Dense logvar_head_;
    Dense out_proj_;
    Sequential decoder_;
    std::size_t feat_ = 0;
};

struct VaeTrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    std::uint64_t seed = 1;
};

struct EpochLoss {
    double train_total = 0.0;
    double train_recon = 0.0;
    double train_kl = 0.0;
    double val_total = 0.0;
    double val_recon = 0.0;
    double val_kl = 0.0;
};

struct Stage1Result {
    std::vector<EpochLoss> epochs;
    std::size_t best_epoch = 0; // index into epochs of the restored checkpoint
    double best_val_total = 0.0;
};

/// Adam on total = recon + beta_t * kl with reparameterized sampling and the
/// training-time quantizer in the loop when bits are set. Validation runs the
/// inference path (posterior mean, grid rounding) each epoch; the best
/// validation-loss parameters are restored into the model on return.
Stage1Result train_stage1(RirVae& model, const std::vector<MelSpectrogram>& train_mels,
                          const std::vector<MelSpectrogram>& val_mels, const VaeTrainConfig& cfg);

/// Sidecar config record stored in checkpoints so later stages can validate
/// compatibility before use.
nlohmann::json vae_meta(const VaeConfig& cfg);
VaeConfig vae_config_from_meta(const nlohmann::json& j);
void save_vae(const std::string& path, RirVae& model);
std::unique_ptr<RirVae> load_vae(const std::string& path);

} // namespace revblind
