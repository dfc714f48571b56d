#include "revblind/vae.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "revblind/checkpoint.hpp"
#include "revblind/errors.hpp"
#include "revblind/optim.hpp"
#include "revblind/rng.hpp"

namespace revblind {

namespace {

void add_quant_noise(double* z, std::size_t n, std::size_t bits, double range, Rng& rng) {
    const double half = 0.5 * quant_step(bits, range);
    for (std::size_t i = 0; i < n; ++i) z[i] += rng.uniform(-half, half);
}

std::string idx_name(const std::string& base, std::size_t i) {
    return base + std::to_string(i);
}

VaeConfig checked(VaeConfig c) {
    c.validate();
    return c;
}

std::size_t halved(std::size_t x, std::size_t times) {
    for (std::size_t i = 0; i < times; ++i) x = Conv2d::out_extent(x, 3, 2, 1);
    return x;
}

} // namespace

Tensor mel_batch(const std::vector<const MelSpectrogram*>& mels, SpecKind kind, std::size_t bands,
                 std::size_t frames, Precision prec) {
    if (mels.empty()) throw ValueError("mel_batch: empty batch");
    Tensor x({mels.size(), 1, bands, frames}, prec);
    const std::size_t per = bands * frames;
    for (std::size_t n = 0; n < mels.size(); ++n) {
        const MelSpectrogram& m = *mels[n];
        if (m.kind != kind) throw ValueError("mel_batch: unexpected spectrogram kind");
        if (static_cast<std::size_t>(m.values.rows) != bands ||
            static_cast<std::size_t>(m.values.cols) != frames) {
            throw ValueError("mel_batch: expected " + std::to_string(bands) + "x" +
                             std::to_string(frames) + ", got " + std::to_string(m.values.rows) +
                             "x" + std::to_string(m.values.cols));
        }
        for (std::size_t i = 0; i < per; ++i) x.v[n * per + i] = scale_mel(m.values.v[i]);
    }
    apply_precision(x);
    return x;
}

void VaeConfig::validate() const {
    if (latent_dim < 1) throw ConfigError("vae: latent_dim must be >= 1");
    if (quant_bits > 16) throw ConfigError("vae: quant_bits must be in 0..16");
    if (quant_bits > 0 && !(quant_range > 0.0)) throw ConfigError("vae: quant_range must be > 0");
    if (channels.empty()) throw ConfigError("vae: need at least one conv channel");
    for (std::size_t c : channels)
        if (c < 1) throw ConfigError("vae: channel counts must be >= 1");
    if (mel_bands < 1 || frames < 1) throw ConfigError("vae: input shape must be positive");
    if (kl_weight < 0.0) throw ConfigError("vae: kl_weight must be >= 0");
    if (warmup_fraction < 0.0 || warmup_fraction > 1.0)
        throw ConfigError("vae: warmup_fraction must lie in [0, 1]");
}

std::vector<double> reparameterize(const LatentPosterior& post, std::uint64_t seed) {
    if (post.mu.size() != post.var.size()) throw ValueError("reparameterize: mu/var size mismatch");
    Rng rng(seed);
    std::vector<double> z(post.mu.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (!(post.var[i] > 0.0)) throw ValueError("reparameterize: variance must be positive");
        z[i] = post.mu[i] + std::sqrt(post.var[i]) * rng.normal();
    }
    return z;
}

double quant_step(std::size_t bits, double range) {
    if (bits < 1 || bits > 16) throw ValueError("quant_step: bits must be in 1..16");
    if (!(range > 0.0)) throw ValueError("quant_step: range must be > 0");
    return 2.0 * range / static_cast<double>((1u << bits) - 1u);
}

std::vector<double> quantize_train(const std::vector<double>& z, std::size_t bits, double range,
                                   std::uint64_t seed) {
    if (bits == 0) return z;
    std::vector<double> out = z;
    Rng rng(seed);
    add_quant_noise(out.data(), out.size(), bits, range, rng);
    return out;
}

std::vector<double> quantize_infer(const std::vector<double>& z, std::size_t bits, double range) {
    if (bits == 0) return z;
    const double delta = quant_step(bits, range);
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double c = std::clamp(z[i], -range, range);
        out[i] = -range + std::round((c + range) / delta) * delta;
    }
    return out;
}

Tensor quantize_latent_rows(const Tensor& z, std::size_t bits, double range) {
    if (z.rank() != 2) throw ValueError("quantize_latent_rows: expected (N, D), got " + shape_str(z.shape));
    Tensor out = z;
    if (bits == 0) return out;
    const std::vector<double> q = quantize_infer(out.v, bits, range);
    out.v = q;
    apply_precision(out);
    return out;
}

double gaussian_kl(const std::vector<double>& mu, const std::vector<double>& var) {
    if (mu.size() != var.size()) throw ValueError("gaussian_kl: mu/var size mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        if (!(var[i] > 0.0)) throw ValueError("gaussian_kl: variance must be positive");
        kl += mu[i] * mu[i] + var[i] - 1.0 - std::log(var[i]);
    }
    return 0.5 * kl;
}

ElboTerms elbo_terms(const std::vector<double>& target, const std::vector<double>& recon,
                     const LatentPosterior& post, double beta) {
    if (target.size() != recon.size() || target.empty())
        throw ValueError("elbo_terms: target/reconstruction shape mismatch");
    double se = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double d = recon[i] - target[i];
        se += d * d;
    }
    ElboTerms t;
    t.recon = se / static_cast<double>(target.size());
    t.kl = gaussian_kl(post.mu, post.var);
    t.total = t.recon + beta * t.kl;
    return t;
}

RirVae::RirVae(VaeConfig cfg)
    : cfg_(checked(std::move(cfg))),
      encoder_("enc"),
      mu_head_("latent.mean", cfg_.channels.back() * halved(cfg_.mel_bands, cfg_.channels.size()),
               cfg_.latent_dim),
      logvar_head_("latent.logvar",
                   cfg_.channels.back() * halved(cfg_.mel_bands, cfg_.channels.size()),
                   cfg_.latent_dim),
      out_proj_("latent.out", cfg_.latent_dim,
                cfg_.channels.back() * halved(cfg_.mel_bands, cfg_.channels.size())),
      decoder_("dec") {
    std::size_t cin = 1, f = cfg_.mel_bands, t = cfg_.frames;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
        encoder_.add<Conv2d>(idx_name("enc.conv", i), cin, cfg_.channels[i], 3, 2, 1);
        encoder_.add<ReLU>(idx_name("enc.relu", i));
        cin = cfg_.channels[i];
        f = Conv2d::out_extent(f, 3, 2, 1);
        t = Conv2d::out_extent(t, 3, 2, 1);
    }
    encoder_.add<PoolTimeFlatten>("enc.pool");
    feat_ = cin * f;

    decoder_.add<BroadcastTokens>("dec.tokens", cin, f, t);
    std::size_t cur = cin, uf = f, ut = t;
    for (std::size_t i = cfg_.channels.size(); i-- > 1;) {
        const std::size_t step = cfg_.channels.size() - 1 - i;
        decoder_.add<ConvTranspose2d>(idx_name("dec.up", step), cur, cfg_.channels[i - 1], 4, 2, 1);
        decoder_.add<ReLU>(idx_name("dec.relu", step));
        cur = cfg_.channels[i - 1];
        uf = ConvTranspose2d::out_extent(uf, 4, 2, 1);
        ut = ConvTranspose2d::out_extent(ut, 4, 2, 1);
    }
    decoder_.add<ConvTranspose2d>(idx_name("dec.up", cfg_.channels.size() - 1), cur, 1, 4, 2, 1);
    uf = ConvTranspose2d::out_extent(uf, 4, 2, 1);
    ut = ConvTranspose2d::out_extent(ut, 4, 2, 1);
    if (uf < cfg_.mel_bands || ut < cfg_.frames) {
        throw ConfigError("vae: decoder output " + std::to_string(uf) + "x" + std::to_string(ut) +
                          " smaller than input " + std::to_string(cfg_.mel_bands) + "x" +
                          std::to_string(cfg_.frames));
    }
    decoder_.add<CropToShape>("dec.crop", cfg_.mel_bands, cfg_.frames);
}

void RirVae::init(std::uint64_t seed) {
    encoder_.init(seed);
    mu_head_.init(seed);
    logvar_head_.init(seed);
    out_proj_.init(seed);
    decoder_.init(seed);
}

std::vector<Param*> RirVae::params() {
    std::vector<Param*> out;
    for (Param* p : encoder_.params()) out.push_back(p);
    for (Param* p : mu_head_.params()) out.push_back(p);
    for (Param* p : logvar_head_.params()) out.push_back(p);
    for (Param* p : out_proj_.params()) out.push_back(p);
    for (Param* p : decoder_.params()) out.push_back(p);
    return out;
}

void RirVae::set_precision(Precision p) {
    encoder_.set_precision(p);
    mu_head_.set_precision(p);
    logvar_head_.set_precision(p);
    out_proj_.set_precision(p);
    decoder_.set_precision(p);
}

void RirVae::zero_grad() {
    for (Param* p : params()) std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0);
}

std::size_t RirVae::param_count() {
    std::size_t n = 0;
    for (Param* p : params()) n += p->value.size();
    return n;
}

BatchPosterior RirVae::encode_batch(const Tensor& x, bool training) {
    if (x.rank() != 4 || x.shape[1] != 1 || x.shape[2] != cfg_.mel_bands ||
        x.shape[3] != cfg_.frames) {
        throw ValueError("vae encode: expected (N, 1, " + std::to_string(cfg_.mel_bands) + ", " +
                         std::to_string(cfg_.frames) + "), got " + shape_str(x.shape));
    }
    const Tensor feats = encoder_.forward(x, training);
    BatchPosterior p;
    p.mu = mu_head_.forward(feats, training);
    p.logvar = logvar_head_.forward(feats, training);
    return p;
}

Tensor RirVae::decode_batch(const Tensor& z, bool training) {
    if (z.rank() != 2 || z.shape[1] != cfg_.latent_dim) {
        throw ValueError("vae decode: expected (N, " + std::to_string(cfg_.latent_dim) +
                         "), got " + shape_str(z.shape));
    }
    const Tensor h = out_proj_.forward(z, training);
    return decoder_.forward(h, training);
}

Tensor RirVae::decode_backward(const Tensor& grad_recon) {
    const Tensor dh = decoder_.backward(grad_recon);
    return out_proj_.backward(dh);
}

Tensor RirVae::encode_backward(const Tensor& dmu, const Tensor& dlogvar) {
    const Tensor g1 = mu_head_.backward(dmu);
    const Tensor g2 = logvar_head_.backward(dlogvar);
    Tensor gfeat = g1;
    for (std::size_t i = 0; i < gfeat.size(); ++i) gfeat.v[i] += g2.v[i];
    return encoder_.backward(gfeat);
}

LatentPosterior RirVae::encode(const MelSpectrogram& h) {
    const Tensor x = mel_batch({&h}, SpecKind::rir, cfg_.mel_bands, cfg_.frames,
                               encoder_.precision());
    const BatchPosterior p = encode_batch(x, false);
    LatentPosterior out;
    out.mu.assign(p.mu.v.begin(), p.mu.v.end());
    out.var.resize(cfg_.latent_dim);
    for (std::size_t d = 0; d < cfg_.latent_dim; ++d) out.var[d] = std::exp(p.logvar.v[d]);
    return out;
}

MelSpectrogram RirVae::decode(const std::vector<double>& z) {
    if (z.size() != cfg_.latent_dim) throw ValueError("vae decode: latent size mismatch");
    Tensor zt({1, cfg_.latent_dim}, encoder_.precision());
    zt.v = z;
    apply_precision(zt);
    const Tensor y = decode_batch(zt, false);
    MelSpectrogram m;
    m.kind = SpecKind::rir;
    m.frame_hop = cfg_.frame_hop;
    m.values = Matrix(static_cast<int>(cfg_.mel_bands), static_cast<int>(cfg_.frames));
    for (std::size_t i = 0; i < y.size(); ++i) m.values.v[i] = unscale_mel(y.v[i]);
    return m;
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

Stage1Result train_stage1(RirVae& model, const std::vector<MelSpectrogram>& train_mels,
                          const std::vector<MelSpectrogram>& val_mels, const VaeTrainConfig& cfg) {
    if (train_mels.empty() || val_mels.empty())
        throw ValueError("stage1: empty training or validation set");
    if (cfg.epochs < 1 || cfg.batch_size < 1) throw ConfigError("stage1: epochs/batch_size >= 1");

    const VaeConfig& mc = model.config();
    const std::size_t f = mc.mel_bands, t = mc.frames, d = mc.latent_dim;
    const std::size_t per = f * t;
    const Precision prec = model.encoder_stack().precision();

    std::vector<const MelSpectrogram*> tp(train_mels.size()), vp(val_mels.size());
    for (std::size_t i = 0; i < train_mels.size(); ++i) tp[i] = &train_mels[i];
    for (std::size_t i = 0; i < val_mels.size(); ++i) vp[i] = &val_mels[i];
    const Tensor train_x = mel_batch(tp, SpecKind::rir, f, t, prec);
    const Tensor val_x = mel_batch(vp, SpecKind::rir, f, t, prec);

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    Adam opt(model.params(), acfg);
    Rng rng(derive_seed(cfg.seed, "stage1"));

    const std::size_t n_train = train_mels.size();
    const std::size_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    const std::size_t warmup_steps =
        static_cast<std::size_t>(mc.warmup_fraction * static_cast<double>(total_steps));

    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);

    auto gather = [&](const Tensor& src, const std::size_t* idx, std::size_t nb) {
        Tensor xb({nb, 1, f, t}, prec);
        for (std::size_t i = 0; i < nb; ++i) {
            std::copy_n(src.v.data() + idx[i] * per, per, xb.v.data() + i * per);
        }
        return xb;
    };

    // Inference-path losses over a full set, in bounded slices.
    auto evaluate = [&](const Tensor& xs) {
        const std::size_t n = xs.shape[0];
        double se = 0.0, kl = 0.0;
        std::vector<std::size_t> idx(cfg.batch_size);
        for (std::size_t at = 0; at < n; at += cfg.batch_size) {
            const std::size_t nb = std::min(cfg.batch_size, n - at);
            idx.resize(nb);
            std::iota(idx.begin(), idx.end(), at);
            const Tensor xb = gather(xs, idx.data(), nb);
            const BatchPosterior p = model.encode_batch(xb, false);
            Tensor zb({nb, d}, prec);
            for (std::size_t i = 0; i < nb; ++i) {
                std::vector<double> mu(p.mu.v.begin() + i * d, p.mu.v.begin() + (i + 1) * d);
                const std::vector<double> zi = quantize_infer(mu, mc.quant_bits, mc.quant_range);
                std::copy(zi.begin(), zi.end(), zb.v.begin() + i * d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double m = p.mu.v[i * d + j], lv = p.logvar.v[i * d + j];
                    kl += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
                }
            }
            apply_precision(zb);
            const Tensor yb = model.decode_batch(zb, false);
            for (std::size_t i = 0; i < yb.size(); ++i) {
                const double e = yb.v[i] - xb.v[i];
                se += e * e;
            }
        }
        EpochLoss out;
        out.val_recon = se / static_cast<double>(n * per);
        out.val_kl = kl / static_cast<double>(n);
        out.val_total = out.val_recon + mc.kl_weight * out.val_kl;
        return out;
    };

    Stage1Result result;
    ParamSnapshot best;
    result.best_val_total = std::numeric_limits<double>::infinity();
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double ep_recon = 0.0, ep_kl = 0.0, ep_total = 0.0;
        for (std::size_t at = 0; at < n_train; at += cfg.batch_size) {
            const std::size_t nb = std::min(cfg.batch_size, n_train - at);
            const Tensor xb = gather(train_x, order.data() + at, nb);

            const BatchPosterior p = model.encode_batch(xb, true);
            std::vector<double> sd(nb * d), eps(nb * d);
            Tensor zb({nb, d}, prec);
            for (std::size_t i = 0; i < nb * d; ++i) {
                sd[i] = std::exp(0.5 * p.logvar.v[i]);
                eps[i] = rng.normal();
                zb.v[i] = p.mu.v[i] + sd[i] * eps[i];
            }
            if (mc.quant_bits > 0)
                add_quant_noise(zb.v.data(), zb.size(), mc.quant_bits, mc.quant_range, rng);
            const Tensor yb = model.decode_batch(zb, true);

            const double numel = static_cast<double>(nb * per);
            double se = 0.0;
            Tensor dy({nb, 1, f, t}, prec);
            for (std::size_t i = 0; i < yb.size(); ++i) {
                const double e = yb.v[i] - xb.v[i];
                se += e * e;
                dy.v[i] = 2.0 * e / numel;
            }
            double kl = 0.0;
            for (std::size_t i = 0; i < nb * d; ++i) {
                const double m = p.mu.v[i], lv = p.logvar.v[i];
                kl += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
            }
            const double recon = se / numel;
            const double kl_mean = kl / static_cast<double>(nb);
            const double beta_t =
                warmup_steps > 0
                    ? mc.kl_weight * std::min(1.0, static_cast<double>(step + 1) /
                                                       static_cast<double>(warmup_steps))
                    : mc.kl_weight;
            const double total = recon + beta_t * kl_mean;
            if (!std::isfinite(total)) throw NumericalError("stage1: non-finite loss");

            model.zero_grad();
            const Tensor dz = model.decode_backward(dy);
            Tensor dmu({nb, d}, prec), dlv({nb, d}, prec);
            for (std::size_t i = 0; i < nb * d; ++i) {
                const double m = p.mu.v[i];
                const double var = sd[i] * sd[i];
                dmu.v[i] = dz.v[i] + beta_t * m / static_cast<double>(nb);
                dlv.v[i] = dz.v[i] * 0.5 * sd[i] * eps[i] +
                           beta_t * 0.5 * (var - 1.0) / static_cast<double>(nb);
            }
            model.encode_backward(dmu, dlv);
            opt.step();

            const double w = static_cast<double>(nb) / static_cast<double>(n_train);
            ep_recon += w * recon;
            ep_kl += w * kl_mean;
            ep_total += w * total;
            ++step;
        }

        EpochLoss loss = evaluate(val_x);
        loss.train_recon = ep_recon;
        loss.train_kl = ep_kl;
        loss.train_total = ep_total;
        result.epochs.push_back(loss);
        if (loss.val_total < result.best_val_total) {
            result.best_val_total = loss.val_total;
            result.best_epoch = epoch;
            best = ParamSnapshot::take(model.params());
        }
    }

    best.restore(model.params());
    return result;
}

nlohmann::json vae_meta(const VaeConfig& cfg) {
    nlohmann::json j;
    j["kind"] = "rir-vae";
    j["latent_dim"] = cfg.latent_dim;
    j["quant_bits"] = cfg.quant_bits;
    j["quant_range"] = cfg.quant_range;
    j["channels"] = cfg.channels;
    j["mel_bands"] = cfg.mel_bands;
    j["frames"] = cfg.frames;
    j["kl_weight"] = cfg.kl_weight;
    j["warmup_fraction"] = cfg.warmup_fraction;
    j["frame_hop"] = cfg.frame_hop;
    return j;
}

VaeConfig vae_config_from_meta(const nlohmann::json& j) {
    try {
        if (j.at("kind").get<std::string>() != "rir-vae")
            throw IoError("vae meta: wrong checkpoint kind '" +
                          j.at("kind").get<std::string>() + "'");
        VaeConfig cfg;
        cfg.latent_dim = j.at("latent_dim").get<std::size_t>();
        cfg.quant_bits = j.at("quant_bits").get<std::size_t>();
        cfg.quant_range = j.at("quant_range").get<double>();
        cfg.channels = j.at("channels").get<std::vector<std::size_t>>();
        cfg.mel_bands = j.at("mel_bands").get<std::size_t>();
        cfg.frames = j.at("frames").get<std::size_t>();
        cfg.kl_weight = j.at("kl_weight").get<double>();
        cfg.warmup_fraction = j.at("warmup_fraction").get<double>();
        cfg.frame_hop = j.at("frame_hop").get<int>();
        cfg.validate();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("vae meta: malformed config record: ") + e.what());
    }
}

void save_vae(const std::string& path, RirVae& model) {
    save_checkpoint(path, model.params(), vae_meta(model.config()));
}

std::unique_ptr<RirVae> load_vae(const std::string& path) {
    const VaeConfig cfg = vae_config_from_meta(read_checkpoint_meta(path));
    auto model = std::make_unique<RirVae>(cfg);
    load_checkpoint(path, model->params());
    return model;
}

} // namespace revblind
