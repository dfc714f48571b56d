#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "revblind/checkpoint.hpp"
#include "revblind/gradcheck.hpp"
#include "revblind/rng.hpp"
#include "revblind/vae.hpp"

using namespace revblind;

namespace {

VaeConfig tiny_config() {
    VaeConfig cfg;
    cfg.latent_dim = 3;
    cfg.channels = {2, 3};
    cfg.mel_bands = 8;
    cfg.frames = 9;
    return cfg;
}

MelSpectrogram fake_rir_mel(std::uint64_t seed, int bands = 8, int frames = 9) {
    Rng rng(seed);
    MelSpectrogram m;
    m.kind = SpecKind::rir;
    m.frame_hop = 16;
    m.values = Matrix(bands, frames);
    const double slope = rng.uniform(20.0, 45.0);
    for (int r = 0; r < bands; ++r) {
        for (int c = 0; c < frames; ++c) {
            const double decay = -3.0 - slope * static_cast<double>(c) / frames;
            m.values.at(r, c) = decay - 0.4 * r + 2.0 * rng.uniform(-1.0, 1.0);
        }
    }
    return m;
}

// Monte-Carlo KL(q || N(0, I)) for a one-dimensional q = N(mu, var).
double mc_kl_1d(double mu, double var, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    const double sd = std::sqrt(var);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = mu + sd * rng.normal();
        const double log_q = -0.5 * std::log(2.0 * M_PI * var) - (z - mu) * (z - mu) / (2.0 * var);
        const double log_p = -0.5 * std::log(2.0 * M_PI) - z * z / 2.0;
        acc += log_q - log_p;
    }
    return acc / static_cast<double>(n);
}

// Deterministic encoder -> sample-with-fixed-noise -> decoder map so the full
// model is checkable by central differences.
class VaeProbe : public Layer {
public:
    VaeProbe(RirVae& m, std::vector<double> eps)
        : Layer("probe"), m_(m), eps_(std::move(eps)) {}

    Tensor forward(const Tensor& x, bool training) override {
        const BatchPosterior p = m_.encode_batch(x, training);
        const std::size_t n = p.mu.size();
        sd_.resize(n);
        Tensor z(p.mu.shape, p.mu.precision);
        for (std::size_t i = 0; i < n; ++i) {
            sd_[i] = std::exp(0.5 * p.logvar.v[i]);
            z.v[i] = p.mu.v[i] + sd_[i] * eps_[i % eps_.size()];
        }
        return m_.decode_batch(z, training);
    }

    Tensor backward(const Tensor& g) override {
        const Tensor dz = m_.decode_backward(g);
        Tensor dmu(dz.shape, dz.precision), dlv(dz.shape, dz.precision);
        for (std::size_t i = 0; i < dz.size(); ++i) {
            dmu.v[i] = dz.v[i];
            dlv.v[i] = dz.v[i] * 0.5 * sd_[i] * eps_[i % eps_.size()];
        }
        return m_.encode_backward(dmu, dlv);
    }

    std::vector<Param*> params() override { return m_.params(); }
    void set_precision(Precision p) override {
        Layer::set_precision(p);
        m_.set_precision(p);
    }

private:
    RirVae& m_;
    std::vector<double> eps_;
    std::vector<double> sd_;
};

} // namespace

TEST_CASE("posterior heads emit latent-sized vectors with positive variance") {
    RirVae vae(tiny_config());
    vae.init(40);
    const MelSpectrogram h = fake_rir_mel(1);
    const LatentPosterior p = vae.encode(h);
    REQUIRE(p.mu.size() == 3);
    REQUIRE(p.var.size() == 3);
    for (double v : p.var) CHECK(v > 0.0);

    const LatentPosterior p2 = vae.encode(h);
    CHECK(p.mu == p2.mu);
    CHECK(p.var == p2.var);
}

TEST_CASE("variance stays positive across ten thousand random inputs") {
    VaeConfig cfg = tiny_config();
    cfg.latent_dim = 4;
    RirVae vae(cfg);
    vae.init(41);
    const std::size_t n = 2500; // 2500 x D=4 -> 1e4 variance entries
    Tensor x({n, 1, 8, 9}, Precision::train32);
    Rng rng(42);
    for (double& v : x.v) v = rng.uniform(-0.5, 1.5);
    apply_precision(x);
    const BatchPosterior p = vae.encode_batch(x, false);
    REQUIRE(p.logvar.size() == n * 4);
    std::size_t positive = 0;
    for (double lv : p.logvar.v) positive += std::exp(lv) > 0.0 ? 1 : 0;
    CHECK(positive == n * 4);
}

TEST_CASE("reparameterization collapses to the mean as variance vanishes") {
    LatentPosterior p;
    p.mu = {0.7, -1.2, 3.0};
    p.var = {1e-20, 1e-20, 1e-20};
    const std::vector<double> z = reparameterize(p, 43);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::fabs(z[i] - p.mu[i]) < 1e-9);
}

TEST_CASE("reparameterization sample moments match the posterior") {
    LatentPosterior p;
    p.mu = {0.5, -2.0};
    p.var = {0.8, 2.5};
    const std::size_t n = 100000;
    std::vector<double> mean(2, 0.0), m2(2, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double> z = reparameterize(p, derive_seed(44, "draw", i));
        for (std::size_t d = 0; d < 2; ++d) mean[d] += z[d];
    }
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double> z = reparameterize(p, derive_seed(44, "draw", i));
        for (std::size_t d = 0; d < 2; ++d) m2[d] += (z[d] - mean[d]) * (z[d] - mean[d]);
    }
    for (std::size_t d = 0; d < 2; ++d) {
        const double bound = 3.0 * std::sqrt(p.var[d] / static_cast<double>(n));
        CHECK(std::fabs(mean[d] - p.mu[d]) < bound);
        const double var_hat = m2[d] / static_cast<double>(n - 1);
        CHECK(var_hat == doctest::Approx(p.var[d]).epsilon(0.05));
    }
}

TEST_CASE("training-time quantizer adds bounded zero-mean noise") {
    const std::vector<double> z = {0.2, -0.7, 1.4};
    SUBCASE("no bits means identity") {
        CHECK(quantize_train(z, 0, 1.0, 45) == z);
        CHECK(quantize_infer(z, 0, 1.0) == z);
    }
    SUBCASE("noise bound and mean") {
        const double delta = quant_step(2, 1.0);
        CHECK(delta == doctest::Approx(2.0 / 3.0));
        double mean = 0.0;
        const std::size_t n = 100000;
        for (std::size_t i = 0; i < n; ++i) {
            const std::vector<double> q = quantize_train(z, 2, 1.0, derive_seed(46, "q", i));
            for (std::size_t d = 0; d < z.size(); ++d) {
                CHECK(std::fabs(q[d] - z[d]) < delta / 2.0);
            }
            mean += q[0];
        }
        mean /= static_cast<double>(n);
        // Uniform(-delta/2, delta/2) has sd = delta / sqrt(12).
        const double bound = 3.0 * (delta / std::sqrt(12.0)) / std::sqrt(static_cast<double>(n));
        CHECK(std::fabs(mean - z[0]) < bound);
    }
}

TEST_CASE("inference-time quantizer snaps to the advertised grids") {
    CHECK(quantize_infer({0.3}, 1, 1.0)[0] == doctest::Approx(1.0));
    CHECK(quantize_infer({-0.3}, 1, 1.0)[0] == doctest::Approx(-1.0));
    CHECK(quantize_infer({0.4}, 2, 1.0)[0] == doctest::Approx(1.0 / 3.0));
    CHECK(quantize_infer({-1.7}, 2, 1.0)[0] == doctest::Approx(-1.0));
    CHECK(quantize_infer({-1.7}, 1, 1.0)[0] == doctest::Approx(-1.0));
    // Full 2-bit grid.
    const std::vector<double> grid = quantize_infer({-1.0, -0.4, 0.4, 1.0}, 2, 1.0);
    CHECK(grid[0] == doctest::Approx(-1.0));
    CHECK(grid[1] == doctest::Approx(-1.0 / 3.0));
    CHECK(grid[2] == doctest::Approx(1.0 / 3.0));
    CHECK(grid[3] == doctest::Approx(1.0));
}

TEST_CASE("quantizer idempotence and error bound hold on random vectors") {
    Rng rng(47);
    const std::size_t bits_list[] = {1, 2, 3, 8};
    const double ranges[] = {1.0, 3.0};
    for (std::size_t bits : bits_list) {
        for (double range : ranges) {
            const double delta = quant_step(bits, range);
            for (std::size_t i = 0; i < 100000 / 8; ++i) {
                const double z = rng.uniform(-1.5 * range, 1.5 * range);
                const std::vector<double> q = quantize_infer({z}, bits, range);
                const std::vector<double> qq = quantize_infer(q, bits, range);
                CHECK(qq[0] == q[0]); // exact, not approximate
                const double clamped = std::clamp(z, -range, range);
                CHECK(std::fabs(q[0] - clamped) <= delta / 2.0 + 1e-12);
            }
        }
    }
}

TEST_CASE("kl term matches closed form and a monte-carlo oracle") {
    CHECK(gaussian_kl({0.0}, {1.0}) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(gaussian_kl({1.0}, {1.0}) == doctest::Approx(0.5));
    CHECK(gaussian_kl({0.0}, {std::exp(1.0)}) == doctest::Approx((std::exp(1.0) - 2.0) / 2.0));

    CHECK(mc_kl_1d(1.0, 1.0, 1000000, 48) == doctest::Approx(0.5).epsilon(0.01));
    CHECK(mc_kl_1d(0.0, std::exp(1.0), 1000000, 49) ==
          doctest::Approx((std::exp(1.0) - 2.0) / 2.0).epsilon(0.01));

    SUBCASE("nonnegative, zero only at the prior") {
        Rng rng(50);
        double off_min = 1e9;
        for (int i = 0; i < 2000; ++i) {
            const double mu = rng.uniform(-2.0, 2.0);
            const double var = std::exp(rng.uniform(-2.0, 2.0));
            const double kl = gaussian_kl({mu}, {var});
            CHECK(kl >= 0.0);
            if (std::fabs(mu) > 0.1 || std::fabs(var - 1.0) > 0.1) off_min = std::min(off_min, kl);
        }
        CHECK(off_min > 1e-4);
    }
}

TEST_CASE("elbo terms combine reconstruction and kl") {
    LatentPosterior p;
    p.mu = {1.0};
    p.var = {1.0};
    const std::vector<double> target = {1.0, 2.0, 3.0, 4.0};
    const std::vector<double> recon = {1.5, 2.0, 2.0, 4.0};
    const ElboTerms t = elbo_terms(target, recon, p, 0.1);
    CHECK(t.recon == doctest::Approx((0.25 + 0.0 + 1.0 + 0.0) / 4.0));
    CHECK(t.kl == doctest::Approx(0.5));
    CHECK(t.total == doctest::Approx(t.recon + 0.1 * t.kl));
    CHECK_THROWS_AS(elbo_terms(target, {1.0}, p, 0.1), ValueError);
}

TEST_CASE("decoder emits the configured spectrogram shape deterministically") {
    RirVae vae(tiny_config());
    vae.init(51);
    const std::vector<double> z = {0.3, -0.8, 1.1};
    const MelSpectrogram m1 = vae.decode(z);
    CHECK(m1.values.rows == 8);
    CHECK(m1.values.cols == 9);
    CHECK(m1.kind == SpecKind::rir);
    const MelSpectrogram m2 = vae.decode(z);
    CHECK(m1.values.v == m2.values.v);
    CHECK_THROWS_AS(vae.decode({0.1}), ValueError);
}

TEST_CASE("encoder rejects wrong input kinds and shapes") {
    RirVae vae(tiny_config());
    vae.init(52);
    MelSpectrogram wrong_kind = fake_rir_mel(2);
    wrong_kind.kind = SpecKind::speech;
    CHECK_THROWS_AS(vae.encode(wrong_kind), ValueError);
    CHECK_THROWS_AS(vae.encode(fake_rir_mel(3, 8, 11)), ValueError);
}

TEST_CASE("config validation guards the architecture") {
    VaeConfig bad = tiny_config();
    bad.latent_dim = 0;
    CHECK_THROWS_AS(RirVae{bad}, ConfigError);
    bad = tiny_config();
    bad.quant_bits = 17;
    CHECK_THROWS_AS(RirVae{bad}, ConfigError);
    bad = tiny_config();
    bad.quant_bits = 4;
    bad.quant_range = 0.0;
    CHECK_THROWS_AS(RirVae{bad}, ConfigError);
    bad = tiny_config();
    bad.channels = {};
    CHECK_THROWS_AS(RirVae{bad}, ConfigError);
    bad = tiny_config();
    bad.warmup_fraction = 1.5;
    CHECK_THROWS_AS(RirVae{bad}, ConfigError);
}

TEST_CASE("full model passes the gradient check at one in a hundred thousand") {
    VaeConfig cfg = tiny_config();
    cfg.latent_dim = 4;
    RirVae vae(cfg);
    vae.init(53);
    Rng rng(derive_seed(53, "probe-eps"));
    std::vector<double> eps(2 * 4);
    for (double& e : eps) e = rng.normal();
    VaeProbe probe(vae, eps);
    probe.set_precision(Precision::check64);
    Tensor x({2, 1, 8, 9}, Precision::check64);
    for (double& v : x.v) v = rng.uniform(-0.3, 1.2);
    const GradCheckResult r = grad_check(probe, x, 1e-5, 40);
    CAPTURE(r.worst_param);
    CHECK(r.max_rel_err < 1e-5);
}

TEST_CASE("stage one training is reproducible and tracks the best epoch") {
    std::vector<MelSpectrogram> train, val;
    for (std::uint64_t i = 0; i < 24; ++i) train.push_back(fake_rir_mel(100 + i));
    for (std::uint64_t i = 0; i < 8; ++i) val.push_back(fake_rir_mel(200 + i));

    VaeTrainConfig tcfg;
    tcfg.epochs = 6;
    tcfg.batch_size = 8;
    tcfg.seed = 54;

    auto run = [&](std::size_t quant_bits) {
        VaeConfig cfg = tiny_config();
        cfg.quant_bits = quant_bits;
        RirVae vae(cfg);
        vae.init(55);
        const Stage1Result r = train_stage1(vae, train, val, tcfg);
        return std::make_pair(params_hash(vae.params()), r);
    };

    const auto [h1, r1] = run(0);
    const auto [h2, r2] = run(0);
    CHECK(h1 == h2);
    REQUIRE(r1.epochs.size() == 6);
    for (std::size_t e = 0; e < 6; ++e) {
        CHECK(r1.epochs[e].val_total == r2.epochs[e].val_total);
        CHECK(r1.epochs[e].train_total == r2.epochs[e].train_total);
        CHECK(std::isfinite(r1.epochs[e].train_recon));
    }
    double best = 1e18;
    std::size_t best_epoch = 0;
    for (std::size_t e = 0; e < 6; ++e) {
        if (r1.epochs[e].val_total < best) {
            best = r1.epochs[e].val_total;
            best_epoch = e;
        }
    }
    CHECK(r1.best_epoch == best_epoch);
    CHECK(r1.best_val_total == doctest::Approx(best));
    CHECK(r1.epochs.back().train_recon < r1.epochs.front().train_recon);

    // The quantized-bottleneck path trains and reproduces too.
    const auto [h3, r3] = run(4);
    const auto [h4, r4] = run(4);
    CHECK(h3 == h4);
    CHECK(h3 != h1);
    CHECK(std::isfinite(r3.epochs.back().val_total));
    (void)r4;

    SUBCASE("empty sets are rejected") {
        VaeConfig cfg = tiny_config();
        RirVae vae(cfg);
        vae.init(56);
        const std::vector<MelSpectrogram> none;
        CHECK_THROWS_AS(train_stage1(vae, none, val, tcfg), ValueError);
        CHECK_THROWS_AS(train_stage1(vae, train, none, tcfg), ValueError);
    }
}

TEST_CASE("model checkpoints carry the config sidecar") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "revblind_vae_ckpt.bin";

    VaeConfig cfg = tiny_config();
    cfg.quant_bits = 4;
    RirVae vae(cfg);
    vae.init(57);
    save_vae(path.string(), vae);

    auto loaded = load_vae(path.string());
    CHECK(loaded->config().latent_dim == 3);
    CHECK(loaded->config().quant_bits == 4);
    CHECK(loaded->config().channels == std::vector<std::size_t>{2, 3});
    CHECK(params_hash(loaded->params()) == params_hash(vae.params()));

    const MelSpectrogram h = fake_rir_mel(4);
    const LatentPosterior a = vae.encode(h);
    const LatentPosterior b = loaded->encode(h);
    CHECK(a.mu == b.mu);

    SUBCASE("foreign checkpoints are rejected") {
        Dense d("d", 3, 3);
        d.init(58);
        nlohmann::json meta;
        meta["kind"] = "something-else";
        save_checkpoint(path.string(), d.params(), meta);
        CHECK_THROWS_AS(load_vae(path.string()), IoError);
    }
    fs::remove(path);
}
