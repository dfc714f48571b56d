#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "revblind/layers.hpp"
#include "revblind/spectral.hpp"
#include "revblind/vae.hpp"

namespace revblind {

struct SpeechEncoderConfig {
    std::size_t latent_dim = 16;               // D; must match the paired auto-encoder
    std::vector<std::size_t> channels = {16, 32, 64}; // stride-2 conv ladder
    std::size_t transformer_layers = 2;
    std::size_t heads = 4;
    std::size_t ffn_mult = 2;
    std::size_t mel_bands = 16;                // F of the input spectrogram
    std::size_t frames = 499;                  // T of the input spectrogram

    void validate() const;
};

/// Encoder from reverberant-speech mel spectrograms to estimates of the RIR
/// latent: conv features -> per-frame tokens of width C * F' -> positional
/// encoding -> transformer encoder layers -> temporal mean-pool -> dense
/// projection to R^D.
class SpeechEncoder {
public:
    explicit SpeechEncoder(SpeechEncoderConfig cfg);

    const SpeechEncoderConfig& config() const { return cfg_; }
    std::size_t token_width() const { return token_width_; }
    std::size_t token_count() const { return token_count_; }

    void init(std::uint64_t seed);
    std::vector<Param*> params() { return stack_.params(); }
    void set_precision(Precision p) { stack_.set_precision(p); }
    void zero_grad() { stack_.zero_grad(); }
    std::size_t param_count() { return stack_.param_count(); }

    /// x: (N, 1, F, T) scaled mel batch -> (N, D) latent estimates.
    Tensor encode_batch(const Tensor& x, bool training);
    /// Backward from d loss / d z; returns d loss / d x.
    Tensor backward(const Tensor& dz) { return stack_.backward(dz); }

    /// Single-spectrogram convenience in the dB domain.
    std::vector<double> encode_speech(const MelSpectrogram& y);

    Sequential& stack() { return stack_; }

private:
    SpeechEncoderConfig cfg_;
    Sequential stack_;
    std::size_t token_width_ = 0;
    std::size_t token_count_ = 0;
};

/// Mean over the batch of the squared Euclidean distance per row.
double latent_loss(const Tensor& z_hat, const Tensor& z);

/// Posterior-mean latent targets from a frozen auto-encoder, one row per
/// spectrogram, rounded onto the inference grid when its bottleneck
/// quantizer is enabled.
Tensor vae_latent_targets(RirVae& vae, const std::vector<const MelSpectrogram*>& rirs);

struct Stage2TrainConfig {
    std::size_t epochs = 12;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    std::uint64_t seed = 1;
};

struct Stage2EpochLoss {
    double train_mse = 0.0;
    double val_mse = 0.0;
};

struct Stage2Result {
    std::vector<Stage2EpochLoss> epochs;
    std::size_t best_epoch = 0;
    double best_val_mse = 0.0;
    double val_target_variance = 0.0; // mean squared distance of val targets to their mean
};

/// Adam on the latent regression loss against fixed targets; validation each
/// epoch, best-validation parameters restored on return.
Stage2Result train_stage2(SpeechEncoder& model, const std::vector<MelSpectrogram>& train_speech,
                          const Tensor& train_z, const std::vector<MelSpectrogram>& val_speech,
                          const Tensor& val_z, const Stage2TrainConfig& cfg);

nlohmann::json speech_encoder_meta(const SpeechEncoderConfig& cfg, std::uint64_t vae_hash);
void save_speech_encoder(const std::string& path, SpeechEncoder& model, std::uint64_t vae_hash);

struct LoadedSpeechEncoder {
    std::unique_ptr<SpeechEncoder> model;
    std::uint64_t vae_hash = 0; // parameter hash of the auto-encoder it was trained against
};
LoadedSpeechEncoder load_speech_encoder(const std::string& path);

} // namespace revblind
