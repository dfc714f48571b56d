#include "revblind/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>

#include "revblind/checkpoint.hpp"
#include "revblind/errors.hpp"
#include "revblind/optim.hpp"
#include "revblind/rng.hpp"

namespace revblind {

// ------------------------------------------------------------ metrics

std::vector<ColumnMetrics> compute_metrics(const Tensor& pred, const Tensor& truth) {
    if (pred.rank() != 2 || pred.shape != truth.shape)
        throw ValueError("compute_metrics: expected matching (N, C) tables, got " +
                         shape_str(pred.shape) + " vs " + shape_str(truth.shape));
    const std::size_t n = pred.shape[0], c = pred.shape[1];
    if (n < 2) throw ValueError("compute_metrics: need at least 2 rows");

    std::vector<ColumnMetrics> out(c);
    for (std::size_t j = 0; j < c; ++j) {
        double mp = 0.0, mt = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            mp += pred.v[i * c + j];
            mt += truth.v[i * c + j];
        }
        mp /= static_cast<double>(n);
        mt /= static_cast<double>(n);

        double mae = 0.0, bias = 0.0, spp = 0.0, stt = 0.0, spt = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double p = pred.v[i * c + j], t = truth.v[i * c + j];
            mae += std::abs(p - t);
            bias += p - t;
            spp += (p - mp) * (p - mp);
            stt += (t - mt) * (t - mt);
            spt += (p - mp) * (t - mt);
        }
        out[j].mae = mae / static_cast<double>(n);
        out[j].bias = bias / static_cast<double>(n);
        if (spp > 0.0 && stt > 0.0) {
            out[j].pcc = spt / std::sqrt(spp * stt);
        } else {
            out[j].pcc = std::numeric_limits<double>::quiet_NaN();
            out[j].pcc_defined = false;
        }
    }
    return out;
}

// ------------------------------------------------------------ regressor

void RegressorConfig::validate() const {
    if (input_dim < 1) throw ConfigError("regressor: input_dim must be >= 1");
    for (std::size_t h : hidden)
        if (h < 1) throw ConfigError("regressor: hidden widths must be >= 1");
    if (output_dim != 2 * kNumOctaveBands)
        throw ConfigError("regressor: output dim must be " +
                          std::to_string(2 * kNumOctaveBands) + " (7-band T60 + 7-band C50)");
}

TargetStats fit_target_stats(const Tensor& targets) {
    if (targets.rank() != 2 || targets.shape[0] < 1)
        throw ValueError("target stats: expected non-empty (N, C), got " + shape_str(targets.shape));
    const std::size_t n = targets.shape[0], c = targets.shape[1];
    TargetStats s;
    s.mean.assign(c, 0.0);
    s.sd.assign(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) s.mean[j] += targets.v[i * c + j];
    for (double& m : s.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const double e = targets.v[i * c + j] - s.mean[j];
            s.sd[j] += e * e;
        }
    for (double& v : s.sd) v = std::max(std::sqrt(v / static_cast<double>(n)), 1e-12);
    return s;
}

namespace {

Tensor affine_columns(const Tensor& t, const TargetStats& s, bool forward) {
    if (t.rank() != 2 || t.shape[1] != s.mean.size())
        throw ValueError("target scaling: table width " + shape_str(t.shape) +
                         " does not match stats width " + std::to_string(s.mean.size()));
    Tensor out = t;
    const std::size_t n = t.shape[0], c = t.shape[1];
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const double x = t.v[i * c + j];
            out.v[i * c + j] = forward ? (x - s.mean[j]) / s.sd[j] : x * s.sd[j] + s.mean[j];
        }
    apply_precision(out);
    return out;
}

} // namespace

Tensor zscore(const Tensor& y, const TargetStats& s) { return affine_columns(y, s, true); }
Tensor unzscore(const Tensor& z, const TargetStats& s) { return affine_columns(z, s, false); }

namespace {

RegressorConfig checked(RegressorConfig c) {
    c.validate();
    return c;
}

} // namespace

ParamRegressor::ParamRegressor(RegressorConfig cfg)
    : cfg_(checked(std::move(cfg))), stack_("reg") {
    std::size_t width = cfg_.input_dim;
    for (std::size_t i = 0; i < cfg_.hidden.size(); ++i) {
        stack_.add<Dense>("reg.fc" + std::to_string(i), width, cfg_.hidden[i]);
        stack_.add<ReLU>("reg.act" + std::to_string(i));
        width = cfg_.hidden[i];
    }
    stack_.add<Dense>("reg.out", width, cfg_.output_dim);
}

void ParamRegressor::init(std::uint64_t seed) { stack_.init(seed); }

void ParamRegressor::set_stats(TargetStats s) {
    if (s.fitted() && (s.mean.size() != cfg_.output_dim || s.sd.size() != cfg_.output_dim))
        throw ValueError("regressor: stats width does not match output dim");
    stats_ = std::move(s);
}

Tensor ParamRegressor::forward_z(const Tensor& x, bool training) {
    if (x.rank() != 2 || x.shape[1] != cfg_.input_dim)
        throw ValueError("regressor: expected (N, " + std::to_string(cfg_.input_dim) + "), got " +
                         shape_str(x.shape));
    return stack_.forward(x, training);
}

Tensor ParamRegressor::predict(const Tensor& x) {
    if (!stats_.fitted()) throw ValueError("regressor: target stats not fitted yet");
    return unzscore(forward_z(x, false), stats_);
}

// ------------------------------------------------------------ shared training loop

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

/// Mini-batch MSE regression over z-scored targets shared by the frozen
/// embedding head and the joint baseline; `forward` and `backward` close
/// over the model.
Stage3Result run_regression_training(const std::function<Tensor(const Tensor&, bool)>& forward,
                                     const std::function<void(const Tensor&)>& backward,
                                     const std::vector<Param*>& params, const Tensor& x_train,
                                     const Tensor& z_train, const Tensor& x_val,
                                     const Tensor& z_val, const Stage3TrainConfig& cfg,
                                     Precision prec) {
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw ConfigError("downstream training: epochs/batch_size >= 1");
    const std::size_t n_train = x_train.shape[0], n_val = x_val.shape[0];
    if (n_train == 0 || n_val == 0) throw ValueError("downstream training: empty split");
    const std::size_t x_per = x_train.size() / n_train;
    const std::size_t d = z_train.shape[1];

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    Adam opt(params, acfg);
    Rng rng(derive_seed(cfg.seed, "stage3"));

    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);

    auto gather = [&](const Tensor& xs, const Tensor& zs, const std::size_t* idx,
                      std::size_t nb) {
        std::vector<std::size_t> xshape = xs.shape;
        xshape[0] = nb;
        Tensor xb(xshape, prec);
        Tensor zb({nb, d}, prec);
        for (std::size_t i = 0; i < nb; ++i) {
            std::copy_n(xs.v.data() + idx[i] * x_per, x_per, xb.v.data() + i * x_per);
            std::copy_n(zs.v.data() + idx[i] * d, d, zb.v.data() + i * d);
        }
        return std::make_pair(xb, zb);
    };

    auto evaluate = [&]() {
        double acc = 0.0;
        std::vector<std::size_t> idx;
        for (std::size_t at = 0; at < n_val; at += cfg.batch_size) {
            const std::size_t nb = std::min(cfg.batch_size, n_val - at);
            idx.resize(nb);
            std::iota(idx.begin(), idx.end(), at);
            const auto [xb, zb] = gather(x_val, z_val, idx.data(), nb);
            acc += latent_loss(forward(xb, false), zb) * static_cast<double>(nb);
        }
        return acc / static_cast<double>(n_val);
    };

    Stage3Result result;
    {
        std::vector<double> mean(d, 0.0);
        for (std::size_t i = 0; i < n_val; ++i)
            for (std::size_t j = 0; j < d; ++j) mean[j] += z_val.v[i * d + j];
        for (double& m : mean) m /= static_cast<double>(n_val);
        double var = 0.0;
        for (std::size_t i = 0; i < n_val; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                const double e = z_val.v[i * d + j] - mean[j];
                var += e * e;
            }
        result.val_target_variance = var / static_cast<double>(n_val);
    }

    ParamSnapshot best;
    result.best_val_mse = std::numeric_limits<double>::infinity();

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double ep_mse = 0.0;
        for (std::size_t at = 0; at < n_train; at += cfg.batch_size) {
            const std::size_t nb = std::min(cfg.batch_size, n_train - at);
            const auto [xb, zb] = gather(x_train, z_train, order.data() + at, nb);
            const Tensor z_hat = forward(xb, true);
            const double mse = latent_loss(z_hat, zb);
            if (!std::isfinite(mse)) throw NumericalError("downstream training: non-finite loss");
            Tensor dz(z_hat.shape, prec);
            for (std::size_t i = 0; i < dz.size(); ++i)
                dz.v[i] = 2.0 * (z_hat.v[i] - zb.v[i]) / static_cast<double>(nb);
            backward(dz);
            opt.step();
            ep_mse += mse * static_cast<double>(nb) / static_cast<double>(n_train);
        }
        Stage3EpochLoss loss;
        loss.train_mse = ep_mse;
        loss.val_mse = evaluate();
        result.epochs.push_back(loss);
        if (loss.val_mse < result.best_val_mse) {
            result.best_val_mse = loss.val_mse;
            result.best_epoch = epoch;
            best = ParamSnapshot::take(params);
        }
    }

    best.restore(params);
    return result;
}

void check_xy(const Tensor& x, const Tensor& y, std::size_t out_dim, const char* who) {
    if (x.shape.empty() || y.rank() != 2 || y.shape[0] != x.shape[0] || y.shape[1] != out_dim)
        throw ValueError(std::string(who) + ": inputs " + shape_str(x.shape) +
                         " and targets " + shape_str(y.shape) + " do not align");
}

} // namespace

Stage3Result train_stage3(ParamRegressor& model, const Tensor& x_train, const Tensor& y_train,
                          const Tensor& x_val, const Tensor& y_val,
                          const Stage3TrainConfig& cfg) {
    check_xy(x_train, y_train, model.config().output_dim, "stage3");
    check_xy(x_val, y_val, model.config().output_dim, "stage3");
    model.set_stats(fit_target_stats(y_train));
    const Tensor z_train = zscore(y_train, model.stats());
    const Tensor z_val = zscore(y_val, model.stats());
    auto forward = [&](const Tensor& x, bool training) { return model.forward_z(x, training); };
    auto backward = [&](const Tensor& dz) {
        model.zero_grad();
        model.backward(dz);
    };
    return run_regression_training(forward, backward, model.params(), x_train, z_train, x_val,
                                   z_val, cfg, model.stack().precision());
}

Tensor speech_embeddings(SpeechEncoder& enc, const std::vector<const MelSpectrogram*>& segments) {
    if (segments.empty()) throw ValueError("speech embeddings: empty input");
    const std::size_t f = enc.config().mel_bands, t = enc.config().frames;
    const std::size_t d = enc.config().latent_dim;
    const Precision prec = enc.stack().precision();
    Tensor out({segments.size(), d}, prec);
    // Chunked so layer activation caches stay small on long segment lists.
    const std::size_t chunk = 64;
    for (std::size_t at = 0; at < segments.size(); at += chunk) {
        const std::size_t nb = std::min(chunk, segments.size() - at);
        const std::vector<const MelSpectrogram*> part(segments.begin() + at,
                                                      segments.begin() + at + nb);
        const Tensor x = mel_batch(part, SpecKind::speech, f, t, prec);
        const Tensor z = enc.encode_batch(x, false);
        std::copy(z.v.begin(), z.v.end(), out.v.begin() + at * d);
    }
    return out;
}

// ------------------------------------------------------------ checkpoints

namespace {

nlohmann::json stats_json(const TargetStats& s) {
    nlohmann::json j;
    j["mean"] = s.mean;
    j["sd"] = s.sd;
    return j;
}

TargetStats stats_from_json(const nlohmann::json& j) {
    TargetStats s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.sd = j.at("sd").get<std::vector<double>>();
    return s;
}

nlohmann::json regressor_json(const RegressorConfig& cfg) {
    nlohmann::json j;
    j["input_dim"] = cfg.input_dim;
    j["hidden"] = cfg.hidden;
    j["output_dim"] = cfg.output_dim;
    return j;
}

RegressorConfig regressor_from_json(const nlohmann::json& j) {
    RegressorConfig cfg;
    cfg.input_dim = j.at("input_dim").get<std::size_t>();
    cfg.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    cfg.output_dim = j.at("output_dim").get<std::size_t>();
    return cfg;
}

nlohmann::json encoder_json(const SpeechEncoderConfig& cfg) {
    nlohmann::json j;
    j["latent_dim"] = cfg.latent_dim;
    j["channels"] = cfg.channels;
    j["transformer_layers"] = cfg.transformer_layers;
    j["heads"] = cfg.heads;
    j["ffn_mult"] = cfg.ffn_mult;
    j["mel_bands"] = cfg.mel_bands;
    j["frames"] = cfg.frames;
    return j;
}

SpeechEncoderConfig encoder_from_json(const nlohmann::json& j) {
    SpeechEncoderConfig cfg;
    cfg.latent_dim = j.at("latent_dim").get<std::size_t>();
    cfg.channels = j.at("channels").get<std::vector<std::size_t>>();
    cfg.transformer_layers = j.at("transformer_layers").get<std::size_t>();
    cfg.heads = j.at("heads").get<std::size_t>();
    cfg.ffn_mult = j.at("ffn_mult").get<std::size_t>();
    cfg.mel_bands = j.at("mel_bands").get<std::size_t>();
    cfg.frames = j.at("frames").get<std::size_t>();
    return cfg;
}

} // namespace

void save_regressor(const std::string& path, ParamRegressor& model, std::uint64_t encoder_hash) {
    nlohmann::json j = regressor_json(model.config());
    j["kind"] = "param-regressor";
    j["encoder_hash"] = encoder_hash;
    if (model.stats().fitted()) j["stats"] = stats_json(model.stats());
    save_checkpoint(path, model.params(), j);
}

LoadedRegressor load_regressor(const std::string& path) {
    const nlohmann::json j = read_checkpoint_meta(path);
    try {
        if (j.at("kind").get<std::string>() != "param-regressor")
            throw IoError("regressor meta: wrong checkpoint kind '" +
                          j.at("kind").get<std::string>() + "'");
        LoadedRegressor out;
        out.model = std::make_unique<ParamRegressor>(regressor_from_json(j));
        out.encoder_hash = j.at("encoder_hash").get<std::uint64_t>();
        if (j.contains("stats")) out.model->set_stats(stats_from_json(j.at("stats")));
        load_checkpoint(path, out.model->params());
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("regressor meta: " + std::string(e.what()));
    }
}

// ------------------------------------------------------------ end-to-end baseline

E2eBaseline::E2eBaseline(SpeechEncoderConfig enc_cfg, RegressorConfig head_cfg)
    : enc_(std::move(enc_cfg)), head_(std::move(head_cfg)) {
    if (head_.config().input_dim != enc_.config().latent_dim)
        throw ConfigError("e2e baseline: head input dim " +
                          std::to_string(head_.config().input_dim) +
                          " does not match encoder latent dim " +
                          std::to_string(enc_.config().latent_dim));
}

void E2eBaseline::init(std::uint64_t seed) {
    enc_.init(derive_seed(seed, "e2e-encoder"));
    head_.init(derive_seed(seed, "e2e-head"));
}

std::vector<Param*> E2eBaseline::params() {
    std::vector<Param*> ps = enc_.params();
    const std::vector<Param*> hs = head_.params();
    ps.insert(ps.end(), hs.begin(), hs.end());
    return ps;
}

void E2eBaseline::set_precision(Precision p) {
    enc_.set_precision(p);
    head_.set_precision(p);
}

Tensor E2eBaseline::predict(const Tensor& mels) {
    const Tensor z = enc_.encode_batch(mels, false);
    return head_.predict(z);
}

Stage3Result train_e2e_baseline(E2eBaseline& model, const Tensor& x_train, const Tensor& y_train,
                                const Tensor& x_val, const Tensor& y_val,
                                const Stage3TrainConfig& cfg) {
    check_xy(x_train, y_train, model.head().config().output_dim, "e2e");
    check_xy(x_val, y_val, model.head().config().output_dim, "e2e");
    model.head().set_stats(fit_target_stats(y_train));
    const Tensor z_train = zscore(y_train, model.head().stats());
    const Tensor z_val = zscore(y_val, model.head().stats());
    auto forward = [&](const Tensor& x, bool training) {
        return model.head().forward_z(model.encoder().encode_batch(x, training), training);
    };
    auto backward = [&](const Tensor& dz) {
        model.encoder().zero_grad();
        model.head().zero_grad();
        model.encoder().backward(model.head().backward(dz));
    };
    return run_regression_training(forward, backward, model.params(), x_train, z_train, x_val,
                                   z_val, cfg, model.encoder().stack().precision());
}

void save_e2e(const std::string& path, E2eBaseline& model) {
    nlohmann::json j;
    j["kind"] = "e2e-baseline";
    j["encoder"] = encoder_json(model.encoder().config());
    j["head"] = regressor_json(model.head().config());
    if (model.head().stats().fitted()) j["stats"] = stats_json(model.head().stats());
    save_checkpoint(path, model.params(), j);
}

std::unique_ptr<E2eBaseline> load_e2e(const std::string& path) {
    const nlohmann::json j = read_checkpoint_meta(path);
    try {
        if (j.at("kind").get<std::string>() != "e2e-baseline")
            throw IoError("e2e meta: wrong checkpoint kind '" + j.at("kind").get<std::string>() +
                          "'");
        auto model = std::make_unique<E2eBaseline>(encoder_from_json(j.at("encoder")),
                                                   regressor_from_json(j.at("head")));
        if (j.contains("stats")) model->head().set_stats(stats_from_json(j.at("stats")));
        load_checkpoint(path, model->params());
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("e2e meta: " + std::string(e.what()));
    }
}

// ------------------------------------------------------------ cross-validation

const char* to_string(Condition c) {
    switch (c) {
        case Condition::proposed: return "proposed";
        case Condition::e2e: return "e2e";
        case Condition::upper_bound: return "upper_bound";
    }
    throw ValueError("unknown condition");
}

std::vector<std::vector<int>> kfold_split(const std::vector<int>& ids, int k) {
    if (k < 2) throw ConfigError("kfold: need k >= 2");
    if (static_cast<std::size_t>(k) > ids.size())
        throw ValueError("kfold: k = " + std::to_string(k) + " exceeds " +
                         std::to_string(ids.size()) + " ids");
    std::vector<std::vector<int>> folds(k);
    const std::size_t base = ids.size() / k, extra = ids.size() % k;
    std::size_t at = 0;
    for (int f = 0; f < k; ++f) {
        const std::size_t take = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
        folds[f].assign(ids.begin() + at, ids.begin() + at + take);
        at += take;
    }
    return folds;
}

namespace {

const char* column_parameter(std::size_t col) { return col < kNumOctaveBands ? "t60" : "c50"; }
double column_band(std::size_t col) { return kOctaveCentersHz[col % kNumOctaveBands]; }

} // namespace

EvalReport kfold_evaluate(const Stage3Data& data, const RegressorConfig& rcfg,
                          const Stage3TrainConfig& tcfg, Condition cond, int k) {
    if (k < 3) throw ConfigError("kfold: rotating validation needs k >= 3");
    const std::size_t n = data.inputs.shape.empty() ? 0 : data.inputs.shape[0];
    if (n == 0 || data.targets.rank() != 2 || data.targets.shape[0] != n ||
        data.rir_ids.size() != n || data.folds.size() != n) {
        throw ValueError("kfold: inputs, targets, rir ids and folds must align");
    }
    if (data.inputs.rank() != 2 || data.inputs.shape[1] != rcfg.input_dim)
        throw ValueError("kfold: input width does not match regressor config");
    if (data.targets.shape[1] != rcfg.output_dim)
        throw ValueError("kfold: target width does not match regressor config");
    for (int f : data.folds)
        if (f < 0 || f >= k) throw ValueError("kfold: row fold index out of range");

    const std::size_t d = rcfg.input_dim, c = rcfg.output_dim;

    auto take_rows = [&](const std::vector<std::size_t>& idx) {
        Tensor x({idx.size(), d}, data.inputs.precision);
        Tensor y({idx.size(), c}, data.targets.precision);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy_n(data.inputs.v.data() + idx[i] * d, d, x.v.data() + i * d);
            std::copy_n(data.targets.v.data() + idx[i] * c, c, y.v.data() + i * c);
        }
        return std::make_pair(x, y);
    };

    std::vector<std::vector<ColumnMetrics>> per_fold;
    std::vector<int> fold_ids;

    for (int f = 0; f < k; ++f) {
        const int val_fold = (f + 1) % k;
        std::vector<std::size_t> train_idx, val_idx, test_idx;
        for (std::size_t i = 0; i < n; ++i) {
            if (data.folds[i] == f) test_idx.push_back(i);
            else if (data.folds[i] == val_fold) val_idx.push_back(i);
            else train_idx.push_back(i);
        }
        if (test_idx.empty() || val_idx.empty() || train_idx.empty())
            throw ValueError("kfold: fold " + std::to_string(f) + " leaves an empty split");

        const auto [x_train, y_train] = take_rows(train_idx);
        const auto [x_val, y_val] = take_rows(val_idx);
        const auto [x_test, y_test] = take_rows(test_idx);

        ParamRegressor model(rcfg);
        model.init(derive_seed(tcfg.seed, "fold-init-" + std::to_string(f)));
        Stage3TrainConfig fold_cfg = tcfg;
        fold_cfg.seed = derive_seed(tcfg.seed, "fold-train-" + std::to_string(f));
        train_stage3(model, x_train, y_train, x_val, y_val, fold_cfg);

        per_fold.push_back(compute_metrics(model.predict(x_test), y_test));
        fold_ids.push_back(f);
    }
    return fold_metric_rows(per_fold, fold_ids, cond);
}

EvalReport fold_metric_rows(const std::vector<std::vector<ColumnMetrics>>& per_fold,
                            const std::vector<int>& fold_ids, Condition cond) {
    if (per_fold.empty() || per_fold.size() != fold_ids.size())
        throw ValueError("fold rows: need one metrics vector per fold id");
    const std::size_t c = per_fold.front().size();
    for (const auto& ms : per_fold)
        if (ms.size() != c || c == 0) throw ValueError("fold rows: ragged column metrics");

    EvalReport report;
    const char* names[3] = {"mae", "bias", "pcc"};
    for (std::size_t i = 0; i < per_fold.size(); ++i) {
        const std::vector<ColumnMetrics>& ms = per_fold[i];
        for (std::size_t j = 0; j < c; ++j) {
            const double vals[3] = {ms[j].mae, ms[j].bias, ms[j].pcc};
            for (int m = 0; m < 3; ++m) {
                MetricRow row;
                row.parameter = column_parameter(j);
                row.band_hz = column_band(j);
                row.metric = names[m];
                row.condition = cond;
                row.fold = fold_ids[i];
                row.value = vals[m];
                row.defined = (m < 2) || ms[j].pcc_defined;
                report.rows.push_back(row);
            }
        }
    }

    for (std::size_t j = 0; j < c; ++j) {
        for (int m = 0; m < 3; ++m) {
            std::vector<double> vs;
            bool defined = true;
            for (const auto& ms : per_fold) {
                const double v[3] = {ms[j].mae, ms[j].bias, ms[j].pcc};
                vs.push_back(v[m]);
                if (m == 2 && !ms[j].pcc_defined) defined = false;
            }
            double mean = 0.0;
            for (double v : vs) mean += v;
            mean /= static_cast<double>(vs.size());
            double var = 0.0;
            for (double v : vs) var += (v - mean) * (v - mean);
            const double sd = std::sqrt(var / static_cast<double>(vs.size()));

            MetricRow avg;
            avg.parameter = column_parameter(j);
            avg.band_hz = column_band(j);
            avg.metric = names[m];
            avg.condition = cond;
            avg.fold = -1;
            avg.value = defined ? mean : std::numeric_limits<double>::quiet_NaN();
            avg.defined = defined;
            report.rows.push_back(avg);

            MetricRow spread = avg;
            spread.metric = std::string(names[m]) + "_std";
            spread.value = defined ? sd : std::numeric_limits<double>::quiet_NaN();
            report.rows.push_back(spread);
        }
    }
    return report;
}

EvalReport merge_reports(const std::vector<EvalReport>& parts) {
    EvalReport out;
    for (const EvalReport& p : parts)
        out.rows.insert(out.rows.end(), p.rows.begin(), p.rows.end());
    return out;
}

namespace {

std::string fmt_value(double v, bool defined) {
    if (!defined) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

} // namespace

std::string eval_report_csv(const EvalReport& r) {
    std::string out = "band,parameter,metric,condition,fold,value\n";
    for (const MetricRow& row : r.rows) {
        out += fmt_value(row.band_hz, true);
        out += ',';
        out += row.parameter;
        out += ',';
        out += row.metric;
        out += ',';
        out += to_string(row.condition);
        out += ',';
        out += std::to_string(row.fold);
        out += ',';
        out += fmt_value(row.value, row.defined);
        out += '\n';
    }
    return out;
}

std::string eval_report_table(const EvalReport& r) {
    // fold-averaged rows only, grouped by condition
    std::vector<Condition> conds;
    for (const MetricRow& row : r.rows) {
        if (row.fold != -1) continue;
        if (std::find(conds.begin(), conds.end(), row.condition) == conds.end())
            conds.push_back(row.condition);
    }
    auto find_value = [&](const char* param, double band, const char* metric, Condition c,
                          bool& defined) {
        for (const MetricRow& row : r.rows) {
            if (row.fold == -1 && row.parameter == param && row.band_hz == band &&
                row.metric == metric && row.condition == c) {
                defined = row.defined;
                return row.value;
            }
        }
        defined = false;
        return std::numeric_limits<double>::quiet_NaN();
    };

    std::string out = "parameter      ";
    for (Condition c : conds) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "| %-11s mae     pcc    bias ", to_string(c));
        out += buf;
    }
    out += '\n';
    out += std::string(out.size() - 1, '-');
    out += '\n';

    const char* params[2] = {"t60", "c50"};
    for (const char* param : params) {
        for (std::size_t b = 0; b < kNumOctaveBands; ++b) {
            char head[32];
            std::snprintf(head, sizeof(head), "%-4s @ %6.0f Hz", param, kOctaveCentersHz[b]);
            out += head;
            for (Condition c : conds) {
                bool dm = false, dp = false, db = false;
                const double mae = find_value(param, kOctaveCentersHz[b], "mae", c, dm);
                const double pcc = find_value(param, kOctaveCentersHz[b], "pcc", c, dp);
                const double bias = find_value(param, kOctaveCentersHz[b], "bias", c, db);
                char cell[80];
                std::snprintf(cell, sizeof(cell), "| %9.4f %7.3f %7.3f ", dm ? mae : NAN,
                              dp ? pcc : NAN, db ? bias : NAN);
                out += cell;
            }
            out += '\n';
        }
    }
    return out;
}

// ------------------------------------------------------------ reconstruction study

ReconHistogram histogram(const std::vector<double>& values) {
    ReconHistogram h;
    const std::size_t nbins =
        static_cast<std::size_t>(std::ceil((h.hi - h.lo) / h.bin_width));
    h.counts.assign(nbins, 0);
    for (double v : values) {
        const double idx = std::floor((v - h.lo) / h.bin_width);
        const std::size_t bin =
            static_cast<std::size_t>(std::clamp(idx, 0.0, static_cast<double>(nbins - 1)));
        ++h.counts[bin];
    }
    return h;
}

double median(std::vector<double> values) {
    if (values.empty()) throw ValueError("median: empty input");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

/// Mean |difference| between a decoded batch and its mel targets, converted
/// back to dB, one value per row.
std::vector<double> decode_mae_db(RirVae& vae, const Tensor& z, const Tensor& target) {
    const Tensor recon = vae.decode_batch(z, false);
    const std::size_t n = recon.shape[0], per = recon.size() / n;
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < per; ++j)
            acc += std::abs(recon.v[i * per + j] - target.v[i * per + j]);
        out[i] = 50.0 * acc / static_cast<double>(per); // scaled mel units -> dB
    }
    return out;
}

} // namespace

ReconReport reconstruction_report(RirVae& vae, SpeechEncoder& enc,
                                  const std::vector<const MelSpectrogram*>& segments,
                                  const std::vector<const MelSpectrogram*>& segment_rirs,
                                  const std::vector<const MelSpectrogram*>& unique_rirs) {
    if (segments.empty() || unique_rirs.empty())
        throw ValueError("reconstruction report: empty input");
    if (segments.size() != segment_rirs.size())
        throw ValueError("reconstruction report: segment and RIR lists must align");
    if (enc.config().latent_dim != vae.config().latent_dim)
        throw ValueError("reconstruction report: encoder and auto-encoder latent dims differ");

    const VaeConfig& vc = vae.config();
    const Precision prec = vae.encoder_stack().precision();
    ReconReport report;

    const std::size_t chunk = 64;
    for (std::size_t at = 0; at < segments.size(); at += chunk) {
        const std::size_t nb = std::min(chunk, segments.size() - at);
        const std::vector<const MelSpectrogram*> seg(segments.begin() + at,
                                                     segments.begin() + at + nb);
        const std::vector<const MelSpectrogram*> rir(segment_rirs.begin() + at,
                                                     segment_rirs.begin() + at + nb);
        const Tensor z = quantize_latent_rows(speech_embeddings(enc, seg), vc.quant_bits,
                                              vc.quant_range);
        const Tensor target = mel_batch(rir, SpecKind::rir, vc.mel_bands, vc.frames, prec);
        const std::vector<double> mae = decode_mae_db(vae, z, target);
        report.estimated_mae_db.insert(report.estimated_mae_db.end(), mae.begin(), mae.end());
    }

    for (std::size_t at = 0; at < unique_rirs.size(); at += chunk) {
        const std::size_t nb = std::min(chunk, unique_rirs.size() - at);
        const std::vector<const MelSpectrogram*> rir(unique_rirs.begin() + at,
                                                     unique_rirs.begin() + at + nb);
        const Tensor x = mel_batch(rir, SpecKind::rir, vc.mel_bands, vc.frames, prec);
        const BatchPosterior p = vae.encode_batch(x, false);
        const Tensor z = quantize_latent_rows(p.mu, vc.quant_bits, vc.quant_range);
        const std::vector<double> mae = decode_mae_db(vae, z, x);
        report.true_mae_db.insert(report.true_mae_db.end(), mae.begin(), mae.end());
    }

    report.estimated_hist = histogram(report.estimated_mae_db);
    report.true_hist = histogram(report.true_mae_db);
    return report;
}

// ------------------------------------------------------------ ablation grid

AblationReport ablation_grid(const std::vector<std::size_t>& d_list,
                             const std::vector<int>& b_list, const CellRunner& run_cell) {
    if (d_list.empty() || b_list.empty())
        throw ValueError("ablation grid: dimension and bit lists must be non-empty");
    AblationReport report;
    for (std::size_t dim : d_list) {
        for (int bits : b_list) {
            AblationCell cell = run_cell(dim, bits);
            cell.latent_dim = dim;
            cell.quant_bits = bits;
            report.cells.push_back(cell);
        }
    }
    return report;
}

std::string ablation_csv(const AblationReport& r) {
    std::string out = "latent_dim,quant_bits,t60_mae,c50_mae,recon_mae_db\n";
    for (const AblationCell& c : r.cells) {
        out += std::to_string(c.latent_dim);
        out += ',';
        out += std::to_string(c.quant_bits);
        out += ',';
        out += fmt_value(c.t60_mae, true);
        out += ',';
        out += fmt_value(c.c50_mae, true);
        out += ',';
        out += fmt_value(c.recon_mae_db, true);
        out += '\n';
    }
    return out;
}

} // namespace revblind
