#include "revblind/speech_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "revblind/checkpoint.hpp"
#include "revblind/errors.hpp"
#include "revblind/optim.hpp"
#include "revblind/rng.hpp"

namespace revblind {

void SpeechEncoderConfig::validate() const {
    if (latent_dim < 1) throw ConfigError("speech encoder: latent_dim must be >= 1");
    if (channels.empty()) throw ConfigError("speech encoder: need at least one conv channel");
    for (std::size_t c : channels)
        if (c < 1) throw ConfigError("speech encoder: channel counts must be >= 1");
    if (transformer_layers < 1) throw ConfigError("speech encoder: need >= 1 transformer layer");
    if (heads < 1 || ffn_mult < 1) throw ConfigError("speech encoder: heads/ffn_mult must be >= 1");
    if (mel_bands < 1 || frames < 1) throw ConfigError("speech encoder: input shape must be positive");
}

namespace {

SpeechEncoderConfig checked(SpeechEncoderConfig c) {
    c.validate();
    return c;
}

} // namespace

SpeechEncoder::SpeechEncoder(SpeechEncoderConfig cfg)
    : cfg_(checked(std::move(cfg))), stack_("spenc") {
    std::size_t cin = 1, f = cfg_.mel_bands, t = cfg_.frames;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
        stack_.add<Conv2d>("spenc.conv" + std::to_string(i), cin, cfg_.channels[i], 3, 2, 1);
        stack_.add<ReLU>("spenc.relu" + std::to_string(i));
        cin = cfg_.channels[i];
        f = Conv2d::out_extent(f, 3, 2, 1);
        t = Conv2d::out_extent(t, 3, 2, 1);
    }
    token_width_ = cin * f;
    token_count_ = t;
    if (token_width_ % cfg_.heads != 0) {
        throw ConfigError("speech encoder: token width " + std::to_string(token_width_) +
                          " not divisible by " + std::to_string(cfg_.heads) + " heads");
    }
    stack_.add<TokensFromFeatureMap>("spenc.tokens");
    // Normalize token scale before mixing in the fixed-amplitude positions,
    // so the conv features are not drowned out.
    stack_.add<LayerNorm>("spenc.toknorm", token_width_);
    stack_.add<PositionalEncoding>("spenc.pos", token_count_, token_width_);
    for (std::size_t i = 0; i < cfg_.transformer_layers; ++i) {
        stack_.add_layer(make_transformer_block("spenc.block" + std::to_string(i), token_width_,
                                                cfg_.heads, cfg_.ffn_mult));
    }
    stack_.add<TokenMeanPool>("spenc.pool");
    stack_.add<Dense>("spenc.proj", token_width_, cfg_.latent_dim);
}

void SpeechEncoder::init(std::uint64_t seed) { stack_.init(seed); }

Tensor SpeechEncoder::encode_batch(const Tensor& x, bool training) {
    if (x.rank() != 4 || x.shape[1] != 1 || x.shape[2] != cfg_.mel_bands ||
        x.shape[3] != cfg_.frames) {
        throw ValueError("speech encoder: expected (N, 1, " + std::to_string(cfg_.mel_bands) +
                         ", " + std::to_string(cfg_.frames) + "), got " + shape_str(x.shape));
    }
    return stack_.forward(x, training);
}

std::vector<double> SpeechEncoder::encode_speech(const MelSpectrogram& y) {
    const Tensor x =
        mel_batch({&y}, SpecKind::speech, cfg_.mel_bands, cfg_.frames, stack_.precision());
    const Tensor z = encode_batch(x, false);
    return std::vector<double>(z.v.begin(), z.v.end());
}

double latent_loss(const Tensor& z_hat, const Tensor& z) {
    if (z_hat.shape != z.shape || z_hat.rank() != 2)
        throw ValueError("latent_loss: expected matching (N, D) tensors, got " +
                         shape_str(z_hat.shape) + " vs " + shape_str(z.shape));
    double acc = 0.0;
    for (std::size_t i = 0; i < z_hat.size(); ++i) {
        const double d = z_hat.v[i] - z.v[i];
        acc += d * d;
    }
    return acc / static_cast<double>(z_hat.shape[0]);
}

Tensor vae_latent_targets(RirVae& vae, const std::vector<const MelSpectrogram*>& rirs) {
    if (rirs.empty()) throw ValueError("latent targets: empty input");
    const VaeConfig& vc = vae.config();
    const Tensor x = mel_batch(rirs, SpecKind::rir, vc.mel_bands, vc.frames,
                               vae.encoder_stack().precision());
    const BatchPosterior p = vae.encode_batch(x, false);
    Tensor z = p.mu;
    return quantize_latent_rows(z, vc.quant_bits, vc.quant_range);
}

namespace {

struct ParamSnapshot {
    std::vector<std::vector<double>> values;

    static ParamSnapshot take(const std::vector<Param*>& params) {
        ParamSnapshot s;
        s.values.reserve(params.size());
        for (const Param* p : params) s.values.push_back(p->value.v);
        return s;
    }
    void restore(const std::vector<Param*>& params) const {
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value.v = values[i];
    }
};

} // namespace

Stage2Result train_stage2(SpeechEncoder& model, const std::vector<MelSpectrogram>& train_speech,
                          const Tensor& train_z, const std::vector<MelSpectrogram>& val_speech,
                          const Tensor& val_z, const Stage2TrainConfig& cfg) {
    if (train_speech.empty() || val_speech.empty())
        throw ValueError("stage2: empty training or validation set");
    if (cfg.epochs < 1 || cfg.batch_size < 1) throw ConfigError("stage2: epochs/batch_size >= 1");
    const std::size_t d = model.config().latent_dim;
    if (train_z.rank() != 2 || train_z.shape[0] != train_speech.size() || train_z.shape[1] != d ||
        val_z.rank() != 2 || val_z.shape[0] != val_speech.size() || val_z.shape[1] != d) {
        throw ValueError("stage2: latent targets do not match the segments or latent dim");
    }

    const std::size_t f = model.config().mel_bands, t = model.config().frames;
    const std::size_t per = f * t;
    const Precision prec = model.stack().precision();

    std::vector<const MelSpectrogram*> tp(train_speech.size()), vp(val_speech.size());
    for (std::size_t i = 0; i < train_speech.size(); ++i) tp[i] = &train_speech[i];
    for (std::size_t i = 0; i < val_speech.size(); ++i) vp[i] = &val_speech[i];
    const Tensor train_x = mel_batch(tp, SpecKind::speech, f, t, prec);
    const Tensor val_x = mel_batch(vp, SpecKind::speech, f, t, prec);

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    Adam opt(model.params(), acfg);
    Rng rng(derive_seed(cfg.seed, "stage2"));

    const std::size_t n_train = train_speech.size();
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);

    auto gather = [&](const Tensor& xs, const Tensor& zs, const std::size_t* idx, std::size_t nb) {
        Tensor xb({nb, 1, f, t}, prec);
        Tensor zb({nb, d}, prec);
        for (std::size_t i = 0; i < nb; ++i) {
            std::copy_n(xs.v.data() + idx[i] * per, per, xb.v.data() + i * per);
            std::copy_n(zs.v.data() + idx[i] * d, d, zb.v.data() + i * d);
        }
        return std::make_pair(xb, zb);
    };

    auto evaluate = [&]() {
        double acc = 0.0;
        const std::size_t n = val_speech.size();
        std::vector<std::size_t> idx;
        for (std::size_t at = 0; at < n; at += cfg.batch_size) {
            const std::size_t nb = std::min(cfg.batch_size, n - at);
            idx.resize(nb);
            std::iota(idx.begin(), idx.end(), at);
            const auto [xb, zb] = gather(val_x, val_z, idx.data(), nb);
            const Tensor z_hat = model.encode_batch(xb, false);
            acc += latent_loss(z_hat, zb) * static_cast<double>(nb);
        }
        return acc / static_cast<double>(n);
    };

    Stage2Result result;
    {
        const std::size_t n = val_speech.size();
        std::vector<double> mean(d, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) mean[j] += val_z.v[i * d + j];
        for (double& m : mean) m /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                const double e = val_z.v[i * d + j] - mean[j];
                var += e * e;
            }
        result.val_target_variance = var / static_cast<double>(n);
    }

    ParamSnapshot best;
    result.best_val_mse = std::numeric_limits<double>::infinity();

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double ep_mse = 0.0;
        for (std::size_t at = 0; at < n_train; at += cfg.batch_size) {
            const std::size_t nb = std::min(cfg.batch_size, n_train - at);
            const auto [xb, zb] = gather(train_x, train_z, order.data() + at, nb);
            const Tensor z_hat = model.encode_batch(xb, true);
            const double mse = latent_loss(z_hat, zb);
            if (!std::isfinite(mse)) throw NumericalError("stage2: non-finite loss");
            Tensor dz(z_hat.shape, prec);
            for (std::size_t i = 0; i < dz.size(); ++i) {
                dz.v[i] = 2.0 * (z_hat.v[i] - zb.v[i]) / static_cast<double>(nb);
            }
            model.zero_grad();
            model.backward(dz);
            opt.step();
            ep_mse += mse * static_cast<double>(nb) / static_cast<double>(n_train);
        }
        Stage2EpochLoss loss;
        loss.train_mse = ep_mse;
        loss.val_mse = evaluate();
        result.epochs.push_back(loss);
        if (loss.val_mse < result.best_val_mse) {
            result.best_val_mse = loss.val_mse;
            result.best_epoch = epoch;
            best = ParamSnapshot::take(model.params());
        }
    }

    best.restore(model.params());
    return result;
}

nlohmann::json speech_encoder_meta(const SpeechEncoderConfig& cfg, std::uint64_t vae_hash) {
    nlohmann::json j;
    j["kind"] = "speech-encoder";
    j["latent_dim"] = cfg.latent_dim;
    j["channels"] = cfg.channels;
    j["transformer_layers"] = cfg.transformer_layers;
    j["heads"] = cfg.heads;
    j["ffn_mult"] = cfg.ffn_mult;
    j["mel_bands"] = cfg.mel_bands;
    j["frames"] = cfg.frames;
    j["vae_hash"] = vae_hash;
    return j;
}

void save_speech_encoder(const std::string& path, SpeechEncoder& model, std::uint64_t vae_hash) {
    save_checkpoint(path, model.params(), speech_encoder_meta(model.config(), vae_hash));
}

LoadedSpeechEncoder load_speech_encoder(const std::string& path) {
    const nlohmann::json j = read_checkpoint_meta(path);
    try {
        if (j.at("kind").get<std::string>() != "speech-encoder")
            throw IoError("speech encoder meta: wrong checkpoint kind '" +
                          j.at("kind").get<std::string>() + "'");
        SpeechEncoderConfig cfg;
        cfg.latent_dim = j.at("latent_dim").get<std::size_t>();
        cfg.channels = j.at("channels").get<std::vector<std::size_t>>();
        cfg.transformer_layers = j.at("transformer_layers").get<std::size_t>();
        cfg.heads = j.at("heads").get<std::size_t>();
        cfg.ffn_mult = j.at("ffn_mult").get<std::size_t>();
        cfg.mel_bands = j.at("mel_bands").get<std::size_t>();
        cfg.frames = j.at("frames").get<std::size_t>();
        LoadedSpeechEncoder out;
        out.vae_hash = j.at("vae_hash").get<std::uint64_t>();
        out.model = std::make_unique<SpeechEncoder>(cfg);
        load_checkpoint(path, out.model->params());
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("speech encoder meta: malformed config record: ") + e.what());
    }
}

} // namespace revblind
