#include "revblind/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "revblind/checkpoint.hpp"
#include "revblind/errors.hpp"
#include "revblind/rng.hpp"
#include "revblind/wav.hpp"

namespace revblind {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt10(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw IoError("failed writing '" + path + "'");
}

std::string read_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::ostringstream out;
    out << f.rdbuf();
    return out.str();
}

// ------------------------------------------------------------ config json

json frontend_to_json(const FrontendConfig& f) {
    return json{{"window_length", f.window_length},
                {"rir_hop", f.rir_hop},
                {"speech_hop", f.speech_hop},
                {"window", f.window == Window::hann ? "hann" : "rectangular"},
                {"n_mels", f.n_mels},
                {"log_floor", f.log_floor},
                {"rir_duration_s", f.rir_duration_s}};
}

void check_keys(const json& j, const char* section, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ConfigError(std::string("config: '") + section + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok)
            throw ConfigError(std::string("config: unknown key '") + it.key() + "' in '" +
                              section + "'");
    }
}

FrontendConfig frontend_from_json(const json& j) {
    FrontendConfig f;
    check_keys(j, "dataset.frontend",
               {"window_length", "rir_hop", "speech_hop", "window", "n_mels", "log_floor",
                "rir_duration_s"});
    f.window_length = j.value("window_length", f.window_length);
    f.rir_hop = j.value("rir_hop", f.rir_hop);
    f.speech_hop = j.value("speech_hop", f.speech_hop);
    const std::string w = j.value("window", std::string("hann"));
    if (w == "hann") f.window = Window::hann;
    else if (w == "rectangular") f.window = Window::rectangular;
    else throw ConfigError("config: unknown window '" + w + "'");
    f.n_mels = j.value("n_mels", f.n_mels);
    f.log_floor = j.value("log_floor", f.log_floor);
    f.rir_duration_s = j.value("rir_duration_s", f.rir_duration_s);
    return f;
}

json dataset_to_json(const DatasetConfig& d) {
    json j{{"n_rir", d.n_rir},
           {"n_sources", d.n_sources},
           {"n_segments", d.n_segments},
           {"segment_duration_s", d.segment_duration_s},
           {"source_duration_s", d.source_duration_s},
           {"rir_length_s", d.rir_length_s},
           {"stage12_fraction", d.stage12_fraction},
           {"train_fraction", d.train_fraction},
           {"val_fraction", d.val_fraction},
           {"k_folds", d.k_folds},
           {"t60_lo", d.t60_lo},
           {"t60_hi", d.t60_hi},
           {"t60_band_jitter", d.t60_band_jitter},
           {"t60_tilt", d.t60_tilt},
           {"direct_gain_lo", d.direct_gain_lo},
           {"direct_gain_hi", d.direct_gain_hi},
           {"direct_delay_lo", d.direct_delay_lo},
           {"direct_delay_hi", d.direct_delay_hi},
           {"pause_lo", d.pause_lo},
           {"pause_hi", d.pause_hi},
           {"pitch_lo_hz", d.pitch_lo_hz},
           {"pitch_hi_hz", d.pitch_hi_hz},
           {"syllable_lo_hz", d.syllable_lo_hz},
           {"syllable_hi_hz", d.syllable_hi_hz},
           {"save_segment_wavs", d.save_segment_wavs},
           {"frontend", frontend_to_json(d.frontend)}};
    // JSON has no infinity; an absent snr means a clean mix.
    if (std::isfinite(d.snr_db)) j["snr_db"] = d.snr_db;
    return j;
}

DatasetConfig dataset_from_json(const json& j) {
    DatasetConfig d;
    check_keys(j, "dataset",
               {"n_rir", "n_sources", "n_segments", "segment_duration_s", "source_duration_s",
                "rir_length_s", "stage12_fraction", "train_fraction", "val_fraction", "k_folds",
                "t60_lo", "t60_hi", "t60_band_jitter", "t60_tilt", "direct_gain_lo",
                "direct_gain_hi", "direct_delay_lo", "direct_delay_hi", "pause_lo", "pause_hi",
                "pitch_lo_hz", "pitch_hi_hz", "syllable_lo_hz", "syllable_hi_hz", "snr_db",
                "save_segment_wavs", "frontend"});
    d.n_rir = j.value("n_rir", d.n_rir);
    d.n_sources = j.value("n_sources", d.n_sources);
    d.n_segments = j.value("n_segments", d.n_segments);
    d.segment_duration_s = j.value("segment_duration_s", d.segment_duration_s);
    d.source_duration_s = j.value("source_duration_s", d.source_duration_s);
    d.rir_length_s = j.value("rir_length_s", d.rir_length_s);
    d.stage12_fraction = j.value("stage12_fraction", d.stage12_fraction);
    d.train_fraction = j.value("train_fraction", d.train_fraction);
    d.val_fraction = j.value("val_fraction", d.val_fraction);
    d.k_folds = j.value("k_folds", d.k_folds);
    d.t60_lo = j.value("t60_lo", d.t60_lo);
    d.t60_hi = j.value("t60_hi", d.t60_hi);
    d.t60_band_jitter = j.value("t60_band_jitter", d.t60_band_jitter);
    d.t60_tilt = j.value("t60_tilt", d.t60_tilt);
    d.direct_gain_lo = j.value("direct_gain_lo", d.direct_gain_lo);
    d.direct_gain_hi = j.value("direct_gain_hi", d.direct_gain_hi);
    d.direct_delay_lo = j.value("direct_delay_lo", d.direct_delay_lo);
    d.direct_delay_hi = j.value("direct_delay_hi", d.direct_delay_hi);
    d.pause_lo = j.value("pause_lo", d.pause_lo);
    d.pause_hi = j.value("pause_hi", d.pause_hi);
    d.pitch_lo_hz = j.value("pitch_lo_hz", d.pitch_lo_hz);
    d.pitch_hi_hz = j.value("pitch_hi_hz", d.pitch_hi_hz);
    d.syllable_lo_hz = j.value("syllable_lo_hz", d.syllable_lo_hz);
    d.syllable_hi_hz = j.value("syllable_hi_hz", d.syllable_hi_hz);
    d.snr_db = j.contains("snr_db") ? j.at("snr_db").get<double>()
                                    : std::numeric_limits<double>::infinity();
    d.save_segment_wavs = j.value("save_segment_wavs", d.save_segment_wavs);
    if (j.contains("frontend")) d.frontend = frontend_from_json(j.at("frontend"));
    return d;
}

json vae_to_json(const VaeConfig& v) {
    return json{{"latent_dim", v.latent_dim},   {"quant_bits", v.quant_bits},
                {"quant_range", v.quant_range}, {"channels", v.channels},
                {"kl_weight", v.kl_weight},     {"warmup_fraction", v.warmup_fraction}};
}

VaeConfig vae_from_json(const json& j) {
    VaeConfig v;
    check_keys(j, "vae",
               {"latent_dim", "quant_bits", "quant_range", "channels", "kl_weight",
                "warmup_fraction"});
    v.latent_dim = j.value("latent_dim", v.latent_dim);
    v.quant_bits = j.value("quant_bits", v.quant_bits);
    v.quant_range = j.value("quant_range", v.quant_range);
    v.channels = j.value("channels", v.channels);
    v.kl_weight = j.value("kl_weight", v.kl_weight);
    v.warmup_fraction = j.value("warmup_fraction", v.warmup_fraction);
    return v;
}

json speech_to_json(const SpeechEncoderConfig& s) {
    return json{{"channels", s.channels},
                {"transformer_layers", s.transformer_layers},
                {"heads", s.heads},
                {"ffn_mult", s.ffn_mult}};
}

SpeechEncoderConfig speech_from_json(const json& j) {
    SpeechEncoderConfig s;
    check_keys(j, "speech", {"channels", "transformer_layers", "heads", "ffn_mult"});
    s.channels = j.value("channels", s.channels);
    s.transformer_layers = j.value("transformer_layers", s.transformer_layers);
    s.heads = j.value("heads", s.heads);
    s.ffn_mult = j.value("ffn_mult", s.ffn_mult);
    return s;
}

json regressor_to_json(const RegressorConfig& r) { return json{{"hidden", r.hidden}}; }

RegressorConfig regressor_from_json(const json& j) {
    RegressorConfig r;
    check_keys(j, "regressor", {"hidden"});
    r.hidden = j.value("hidden", r.hidden);
    return r;
}

json stage_to_json(const StageTrainParams& s) {
    return json{{"epochs", s.epochs}, {"batch_size", s.batch_size}, {"lr", s.lr}};
}

StageTrainParams stage_from_json(const json& j, const StageTrainParams& defaults,
                                 const char* section) {
    StageTrainParams s = defaults;
    check_keys(j, section, {"epochs", "batch_size", "lr"});
    s.epochs = j.value("epochs", s.epochs);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.lr = j.value("lr", s.lr);
    return s;
}

json eval_to_json(const EvalOptions& e) { return json{{"e2e_folds", e.e2e_folds}}; }

EvalOptions eval_from_json(const json& j) {
    EvalOptions e;
    check_keys(j, "eval", {"e2e_folds"});
    e.e2e_folds = j.value("e2e_folds", e.e2e_folds);
    return e;
}

json ablation_to_json(const AblationOptions& a) {
    return json{{"latent_dims", a.latent_dims},     {"quant_bits", a.quant_bits},
                {"seeds", a.seeds},                 {"stage1_epochs", a.stage1_epochs},
                {"stage2_epochs", a.stage2_epochs}, {"stage3_epochs", a.stage3_epochs}};
}

AblationOptions ablation_from_json(const json& j) {
    AblationOptions a;
    check_keys(j, "ablation",
               {"latent_dims", "quant_bits", "seeds", "stage1_epochs", "stage2_epochs",
                "stage3_epochs"});
    a.latent_dims = j.value("latent_dims", a.latent_dims);
    a.quant_bits = j.value("quant_bits", a.quant_bits);
    a.seeds = j.value("seeds", a.seeds);
    a.stage1_epochs = j.value("stage1_epochs", a.stage1_epochs);
    a.stage2_epochs = j.value("stage2_epochs", a.stage2_epochs);
    a.stage3_epochs = j.value("stage3_epochs", a.stage3_epochs);
    return a;
}

const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names = {
        "synth-data", "groundtruth",    "train-stage1", "train-stage2",
        "train-stage3", "eval-proposed", "eval-e2e",     "eval-upper-bound",
        "reconstruct",  "ablate",        "report"};
    return names;
}

} // namespace

void PipelineConfig::derive_and_validate() {
    // One master seed fans out to every stage; the dataset gets its own lane.
    dataset.master_seed = derive_seed(seed, "dataset");

    // Mel geometry flows from the dataset frontend into both encoders.
    vae.mel_bands = static_cast<std::size_t>(dataset.frontend.n_mels);
    vae.frames = static_cast<std::size_t>(dataset.frontend.rir_frames(kAudioRateHz));
    vae.frame_hop = dataset.frontend.rir_hop;
    speech.mel_bands = vae.mel_bands;
    const int seg_samples =
        static_cast<int>(std::lround(dataset.segment_duration_s * kAudioRateHz));
    speech.frames = static_cast<std::size_t>(dataset.frontend.speech_frames(seg_samples));

    // The latent width is owned by the auto-encoder.
    speech.latent_dim = vae.latent_dim;
    regressor.input_dim = vae.latent_dim;
    regressor.output_dim = 2 * kNumOctaveBands;

    validate(dataset);
    vae.validate();
    speech.validate();
    regressor.validate();

    if (out.empty()) throw ConfigError("pipeline: output root must not be empty");
    auto check_stage = [](const StageTrainParams& p, const char* name) {
        if (p.epochs == 0 || p.batch_size == 0 || !(p.lr > 0.0))
            throw ConfigError(std::string("pipeline: invalid ") + name + " training parameters");
    };
    check_stage(stage1, "stage1");
    check_stage(stage2, "stage2");
    check_stage(stage3, "stage3");

    if (eval.e2e_folds.empty())
        throw ConfigError("pipeline: eval.e2e_folds must name at least one fold");
    for (int f : eval.e2e_folds)
        if (f < 0 || f >= dataset.k_folds)
            throw ConfigError("pipeline: e2e fold " + std::to_string(f) + " outside 0.." +
                              std::to_string(dataset.k_folds - 1));

    if (ablation.latent_dims.empty() || ablation.quant_bits.empty() || ablation.seeds.empty())
        throw ConfigError("pipeline: ablation grid lists must not be empty");
    for (std::size_t d : ablation.latent_dims)
        if (d == 0) throw ConfigError("pipeline: ablation latent_dims must be positive");
    for (int b : ablation.quant_bits)
        if (b < 0) throw ConfigError("pipeline: ablation quant_bits must be >= 0");
    if (ablation.stage1_epochs == 0 || ablation.stage2_epochs == 0 ||
        ablation.stage3_epochs == 0)
        throw ConfigError("pipeline: ablation stage epochs must be positive");
}

PipelineConfig default_pipeline_config() { return PipelineConfig{}; }

json pipeline_to_json(const PipelineConfig& cfg) {
    return json{{"seed", cfg.seed},
                {"out", cfg.out},
                {"dataset", dataset_to_json(cfg.dataset)},
                {"vae", vae_to_json(cfg.vae)},
                {"speech", speech_to_json(cfg.speech)},
                {"regressor", regressor_to_json(cfg.regressor)},
                {"stage1", stage_to_json(cfg.stage1)},
                {"stage2", stage_to_json(cfg.stage2)},
                {"stage3", stage_to_json(cfg.stage3)},
                {"eval", eval_to_json(cfg.eval)},
                {"ablation", ablation_to_json(cfg.ablation)}};
}

PipelineConfig pipeline_from_json(const json& j) {
    try {
        PipelineConfig cfg;
        check_keys(j, "pipeline",
                   {"seed", "out", "dataset", "vae", "speech", "regressor", "stage1", "stage2",
                    "stage3", "eval", "ablation"});
        cfg.seed = j.value("seed", cfg.seed);
        cfg.out = j.value("out", cfg.out);
        if (j.contains("dataset")) cfg.dataset = dataset_from_json(j.at("dataset"));
        if (j.contains("vae")) cfg.vae = vae_from_json(j.at("vae"));
        if (j.contains("speech")) cfg.speech = speech_from_json(j.at("speech"));
        if (j.contains("regressor")) cfg.regressor = regressor_from_json(j.at("regressor"));
        if (j.contains("stage1")) cfg.stage1 = stage_from_json(j.at("stage1"), cfg.stage1, "stage1");
        if (j.contains("stage2")) cfg.stage2 = stage_from_json(j.at("stage2"), cfg.stage2, "stage2");
        if (j.contains("stage3")) cfg.stage3 = stage_from_json(j.at("stage3"), cfg.stage3, "stage3");
        if (j.contains("eval")) cfg.eval = eval_from_json(j.at("eval"));
        if (j.contains("ablation")) cfg.ablation = ablation_from_json(j.at("ablation"));
        return cfg;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

void apply_override(json& j, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like section.key=value: '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);

    // Validate the whole path before touching the config.
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = path.find('.', start);
        parts.push_back(path.substr(start, dot - start));
        if (parts.back().empty())
            throw ConfigError("override has an empty path segment: '" + path + "'");
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    json* cur = &j;
    for (const std::string& part : parts) cur = &(*cur)[part];
    try {
        *cur = json::parse(value);
    } catch (const json::exception&) {
        *cur = value; // unquoted strings stay strings
    }
}

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= static_cast<std::uint64_t>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

json command_projection(const PipelineConfig& cfg, const std::string& command) {
    PipelineConfig c = cfg;
    c.derive_and_validate();
    const json full = pipeline_to_json(c);

    json p;
    auto take = [&](std::initializer_list<const char*> keys) {
        for (const char* k : keys) p[k] = full.at(k);
    };
    take({"seed", "dataset"});
    if (command == "synth-data" || command == "groundtruth") {
        // dataset recipe only
    } else if (command == "train-stage1") {
        take({"vae", "stage1"});
    } else if (command == "train-stage2") {
        take({"vae", "stage1", "speech", "stage2"});
    } else if (command == "train-stage3" || command == "eval-proposed") {
        take({"vae", "stage1", "speech", "stage2", "regressor", "stage3"});
    } else if (command == "eval-upper-bound") {
        take({"vae", "stage1", "regressor", "stage3"});
    } else if (command == "eval-e2e") {
        take({"vae", "speech", "regressor", "stage3", "eval"});
    } else if (command == "reconstruct") {
        take({"vae", "stage1", "speech", "stage2"});
    } else if (command == "ablate") {
        take({"vae", "speech", "regressor", "stage1", "stage2", "stage3", "ablation"});
    } else if (command == "report") {
        json all = full;
        all.erase("out"); // where artifacts live must not change what they say
        return all;
    } else {
        throw ConfigError("unknown command '" + command + "'");
    }
    return p;
}

std::string run_dir(const PipelineConfig& cfg, const std::string& command) {
    const json p = command_projection(cfg, command);
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(p.dump() + "|" + command)));
    return cfg.out + "/" + command + "-" + buf;
}

bool run_done(const std::string& dir) { return fs::exists(fs::path(dir) / "DONE"); }

// ------------------------------------------------------------ data plumbing

namespace {

struct OpenedData {
    std::string root; // the synth-data run's data directory
    DatasetManifest manifest;

    MelSpectrogram mel(const std::string& rel) const { return read_melspec(root + "/" + rel); }
};

OpenedData open_dataset(const PipelineConfig& cfg) {
    const std::string dir = run_dir(cfg, "synth-data");
    if (!run_done(dir)) throw MissingStageError("synth-data");
    OpenedData d;
    d.root = dir + "/data";
    d.manifest = read_manifest(d.root + "/manifest.jsonl");
    return d;
}

void require_stage(const PipelineConfig& cfg, const std::string& command) {
    if (!run_done(run_dir(cfg, command))) throw MissingStageError(command);
}

std::vector<const RirRecord*> rirs_in(const DatasetManifest& m, StageSplit split, Part part) {
    std::vector<const RirRecord*> out;
    for (const auto& r : m.rirs)
        if (r.split == split && r.part == part) out.push_back(&r);
    return out;
}

std::vector<const SegmentRecord*> segments_in(const DatasetManifest& m, StageSplit split) {
    std::vector<const SegmentRecord*> out;
    for (const auto& s : m.segments)
        if (s.split == split) out.push_back(&s);
    return out;
}

std::vector<const SegmentRecord*> segments_in(const DatasetManifest& m, StageSplit split,
                                              Part part) {
    std::vector<const SegmentRecord*> out;
    for (const auto& s : m.segments)
        if (s.split == split && s.part == part) out.push_back(&s);
    return out;
}

template <typename Rec>
std::vector<MelSpectrogram> load_mels(const OpenedData& d, const std::vector<const Rec*>& recs) {
    std::vector<MelSpectrogram> out;
    out.reserve(recs.size());
    for (const Rec* r : recs) out.push_back(d.mel(r->mel_path));
    return out;
}

std::vector<const MelSpectrogram*> mel_ptrs(const std::vector<MelSpectrogram>& mels) {
    std::vector<const MelSpectrogram*> out;
    out.reserve(mels.size());
    for (const auto& m : mels) out.push_back(&m);
    return out;
}

/// Latents of the distinct RIRs behind a segment list, in first-appearance
/// order, already passed through the configured bottleneck quantizer.
struct RirLatentTable {
    std::vector<int> ids;
    std::map<int, std::size_t> row;
    Tensor z; // (R, D)
};

RirLatentTable rir_latent_table(RirVae& vae, const OpenedData& d,
                                const std::vector<const SegmentRecord*>& segs) {
    RirLatentTable t;
    for (const SegmentRecord* s : segs) {
        if (t.row.count(s->rir_id)) continue;
        t.row[s->rir_id] = t.ids.size();
        t.ids.push_back(s->rir_id);
    }
    std::vector<MelSpectrogram> mels;
    mels.reserve(t.ids.size());
    for (int id : t.ids) mels.push_back(d.mel(d.manifest.rir_by_id(id).mel_path));
    t.z = vae_latent_targets(vae, mel_ptrs(mels));
    return t;
}

Tensor gather_latent_rows(const RirLatentTable& t, const std::vector<const SegmentRecord*>& segs) {
    const std::size_t dim = t.z.shape[1];
    Tensor out({segs.size(), dim}, Precision::train32);
    for (std::size_t i = 0; i < segs.size(); ++i) {
        const std::size_t r = t.row.at(segs[i]->rir_id);
        std::copy_n(t.z.v.data() + r * dim, dim, out.v.data() + i * dim);
    }
    apply_precision(out);
    return out;
}

Tensor segment_targets(const OpenedData& d, const std::vector<const SegmentRecord*>& segs) {
    const std::size_t c = 2 * kNumOctaveBands;
    Tensor y({segs.size(), c}, Precision::train32);
    for (std::size_t i = 0; i < segs.size(); ++i) {
        const auto flat = d.manifest.rir_by_id(segs[i]->rir_id).ground_truth.flat();
        std::copy(flat.begin(), flat.end(), y.v.data() + i * c);
    }
    apply_precision(y);
    return y;
}

Tensor quantized_embeddings(SpeechEncoder& enc, const VaeConfig& vc,
                            const std::vector<const MelSpectrogram*>& segs) {
    return quantize_latent_rows(speech_embeddings(enc, segs), vc.quant_bits, vc.quant_range);
}

std::unique_ptr<RirVae> load_stage1(const PipelineConfig& cfg) {
    require_stage(cfg, "train-stage1");
    return load_vae(run_dir(cfg, "train-stage1") + "/vae.ckpt");
}

LoadedSpeechEncoder load_stage2(const PipelineConfig& cfg) {
    require_stage(cfg, "train-stage2");
    return load_speech_encoder(run_dir(cfg, "train-stage2") + "/speech_encoder.ckpt");
}

/// Auto-encoder and speech encoder with the hash chain between them checked.
struct FrozenFront {
    std::unique_ptr<RirVae> vae;
    LoadedSpeechEncoder enc;
};

FrozenFront load_frozen_front(const PipelineConfig& cfg) {
    FrozenFront f;
    f.enc = load_stage2(cfg);
    f.vae = load_stage1(cfg);
    if (params_hash(f.vae->params()) != f.enc.vae_hash)
        throw ConfigError("stage mismatch: the speech encoder was trained against a different "
                          "auto-encoder; rerun train-stage2");
    return f;
}

double mean_mae_db(const Tensor& recon, const Tensor& target) {
    if (recon.v.size() != target.v.size() || recon.v.empty())
        throw ValueError("recon/target size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < recon.v.size(); ++i) acc += std::abs(recon.v[i] - target.v[i]);
    return 50.0 * acc / static_cast<double>(recon.v.size()); // scaled mel units -> dB
}

// ------------------------------------------------------------ commands

void cmd_synth_data(const PipelineConfig& cfg, const std::string& dir, std::ostream& log) {
    const DatasetManifest m = build_dataset(cfg.dataset, dir + "/data");
    validate_manifest(m);
    log << "event=dataset rirs=" << m.rirs.size() << " sources=" << m.sources.size()
        << " segments=" << m.segments.size() << "\n";
}

void cmd_groundtruth(const PipelineConfig& cfg, const std::string& dir, std::ostream& log) {
    const OpenedData d = open_dataset(cfg);
    std::string csv = "rir_id,band_hz,t60_s,c50_db\n";
    double max_t60_dev = 0.0, max_c50_dev = 0.0;
    for (const RirRecord& r : d.manifest.rirs) {
        const SampleBuffer h = read_wav(d.root + "/" + r.wav_path);
        const AcousticParams p = ground_truth_params(h);
        for (std::size_t b = 0; b < kNumOctaveBands; ++b) {
            csv += std::to_string(r.id) + "," + fmt10(kOctaveCentersHz[b]) + "," +
                   fmt10(p.t60[b]) + "," + fmt10(p.c50[b]) + "\n";
            max_t60_dev = std::max(max_t60_dev, std::abs(p.t60[b] - r.ground_truth.t60[b]));
            max_c50_dev = std::max(max_c50_dev, std::abs(p.c50[b] - r.ground_truth.c50[b]));
        }
    }
    write_text(dir + "/groundtruth.csv", csv);
    // Deviations come only from the 32-bit wav round trip, so they stay tiny.
    log << "event=groundtruth rirs=" << d.manifest.rirs.size()
        << " max_t60_dev_s=" << max_t60_dev << " max_c50_dev_db=" << max_c50_dev << "\n";
}

void cmd_train_stage1(const PipelineConfig& cfg, const std::string& dir, std::ostream& log) {
    const OpenedData d = open_dataset(cfg);
    const auto train_mels = load_mels(d, rirs_in(d.manifest, StageSplit::stage12, Part::train));
    const auto val_mels = load_mels(d, rirs_in(d.manifest, StageSplit::stage12, Part::val));
    log << "event=data stage=1 train=" << train_mels.size() << " val=" << val_mels.size() << "\n";

    RirVae model(cfg.vae);
    model.init(derive_seed(cfg.seed, "stage1-init"));
    const VaeTrainConfig tc{cfg.stage1.epochs, cfg.stage1.batch_size, cfg.stage1.lr,
                            derive_seed(cfg.seed, "stage1")};
    const Stage1Result r = train_stage1(model, train_mels, val_mels, tc);

    std::string csv = "epoch,train_total,train_recon,train_kl,val_total,val_recon,val_kl\n";
    for (std::size_t e = 0; e < r.epochs.size(); ++e) {
        const EpochLoss& l = r.epochs[e];
        csv += std::to_string(e) + "," + fmt10(l.train_total) + "," + fmt10(l.train_recon) + "," +
               fmt10(l.train_kl) + "," + fmt10(l.val_total) + "," + fmt10(l.val_recon) + "," +
               fmt10(l.val_kl) + "\n";
        log << "event=epoch stage=1 epoch=" << e << " train_total=" << l.train_total
            << " val_total=" << l.val_total << " val_recon=" << l.val_recon << "\n";
    }
    write_text(dir + "/losses.csv", csv);
    save_vae(dir + "/vae.ckpt", model);
    log << "event=stage1 best_epoch=" << r.best_epoch << " best_val_total=" << r.best_val_total
        << " params=" << model.param_count() << "\n";
}

void cmd_train_stage2(const PipelineConfig& cfg, const std::string& dir, std::ostream& log) {
    const OpenedData d = open_dataset(cfg);
    auto vae = load_stage1(cfg);

    const auto train_segs = segments_in(d.manifest, StageSplit::stage12, Part::train);
    const auto val_segs = segments_in(d.manifest, StageSplit::stage12, Part::val);
    auto all12 = train_segs;
    all12.insert(all12.end(), val_segs.begin(), val_segs.end());
    const RirLatentTable table = rir_latent_table(*vae, d, all12);
    const Tensor train_z = gather_latent_rows(table, train_segs);
    const Tensor val_z = gather_latent_rows(table, val_segs);

    const auto train_mels = load_mels(d, train_segs);
    const auto val_mels = load_mels(d, val_segs);
    log << "event=data stage=2 train=" << train_mels.size() << " val=" << val_mels.size()
        << " rirs=" << table.ids.size() << "\n";

    SpeechEncoder model(cfg.speech);
    model.init(derive_seed(cfg.seed, "stage2-init"));
    const Stage2TrainConfig tc{cfg.stage2.epochs, cfg.stage2.batch_size, cfg.stage2.lr,
                               derive_seed(cfg.seed, "stage2")};
    const Stage2Result r = train_stage2(model, train_mels, train_z, val_mels, val_z, tc);

    std::string csv = "epoch,train_mse,val_mse\n";
    for (std::size_t e = 0; e < r.epochs.size(); ++e) {
        csv += std::to_string(e) + "," + fmt10(r.epochs[e].train_mse) + "," +
               fmt10(r.epochs[e].val_mse) + "\n";
        log << "event=epoch stage=2 epoch=" << e << " train_mse=" << r.epochs[e].train_mse
            << " val_mse=" << r.epochs[e].val_mse << "\n";
    }
    write_text(dir + "/losses.csv", csv);
    save_speech_encoder(dir + "/speech_encoder.ckpt", model, params_hash(vae->params()));
    log << "event=stage2 best_epoch=" << r.best_epoch << " best_val_mse=" << r.best_val_mse
        << " val_target_variance=" << r.val_target_variance << " params=" << model.param_count()
        << "\n";
}

void cmd_train_stage3(const PipelineConfig& cfg, const std::string& dir, std::ostream& log) {
    const OpenedData d = open_dataset(cfg);
    FrozenFront front = load_frozen_front(cfg);

    const auto train_segs = segments_in(d.manifest, StageSplit::stage3, Part::train);
    const auto val_segs = segments_in(d.manifest, StageSplit::stage3, Part::val);
    const auto train_mels = load_mels(d, train_segs);
    const auto val_mels = load_mels(d, val_segs);

    const Tensor x_train = quantized_embeddings(*front.enc.model, cfg.vae, mel_ptrs(train_mels));
    const Tensor x_val = quantized_embeddings(*front.enc.model, cfg.vae, mel_ptrs(val_mels));
    const Tensor y_train = segment_targets(d, train_segs);
    const Tensor y_val = segment_targets(d, val_segs);
    log << "event=data stage=3 train=" << train_segs.size() << " val=" << val_segs.size() << "\n";

    ParamRegressor model(cfg.regressor);
    model.init(derive_seed(cfg.seed, "stage3-init"));
    const Stage3TrainConfig tc{cfg.stage3.epochs, cfg.stage3.batch_size, cfg.stage3.lr,
                               derive_seed(cfg.seed, "stage3")};
    const Stage3Result r = train_stage3(model, x_train, y_train, x_val, y_val, tc);

    std::string csv = "epoch,train_mse,val_mse\n";
    for (std::size_t e = 0; e < r.epochs.size(); ++e) {
        csv += std::to_string(e) + "," + fmt10(r.epochs[e].train_mse) + "," +
               fmt10(r.epochs[e].val_mse) + "\n";
        log << "event=epoch stage=3 epoch=" << e << " train_mse=" << r.epochs[e].train_mse
            << " val_mse=" << r.epochs[e].val_mse << "\n";
    }
    write_text(dir + "/losses.csv", csv);
    save_regressor(dir + "/regressor.ckpt", model, params_hash(front.enc.model->params()));
    log << "event=stage3 best_epoch=" << r.best_epoch << " best_val_mse=" << r.best_val_mse
        << " val_target_variance=" << r.val_target_variance << "\n";
}

void log_eval_headline(const EvalReport& rep, std::ostream& log) {
    double t60 = 0.0, c50 = 0.0;
    int nt = 0, nc = 0;
    for (const MetricRow& r : rep.rows) {
        if (r.fold != -1 || r.metric != "mae") continue;
        if (r.parameter == "t60") { t60 += r.value; ++nt; }
        else { c50 += r.value; ++nc; }
    }
    if (nt > 0 && nc > 0)
        log << "event=headline t60_mae_s=" << t60 / nt << " c50_mae_db=" << c50 / nc << "\n";
}

void write_eval_outputs(const EvalReport& rep, const std::string& dir, std::ostream& log) {
    write_text(dir + "/eval.csv", eval_report_csv(rep));
    write_text(dir + "/table.txt", eval_report_table(rep));
    log_eval_headline(rep, log);
}

Stage3Data proposed_eval_data(const PipelineConfig& cfg, const OpenedData& d, FrozenFront& front) {
    const auto segs = segments_in(d.manifest, StageSplit::stage3);
    const auto mels = load_mels(d, segs);
    Stage3Data data;
    data.inputs = quantized_embeddings(*front.enc.model, cfg.vae, mel_ptrs(mels));
    data.targets = segment_targets(d, segs);
    for (const SegmentRecord* s : segs) {
        data.rir_ids.push_back(s->rir_id);
        data.folds.push_back(s->fold);
    }
    return data;
}

void cmd_eval_proposed(const PipelineConfig& cfg, const std::string& dir, std::ostream& log) {
    require_stage(cfg, "train-stage3");
    const OpenedData d = open_dataset(cfg);
    FrozenFront front = load_frozen_front(cfg);
    const LoadedRegressor staged =
        load_regressor(run_dir(cfg, "train-stage3") + "/regressor.ckpt");
    if (staged.encoder_hash != params_hash(front.enc.model->params()))
        throw ConfigError("stage mismatch: the regressor was trained against a different speech "
                          "encoder; rerun train-stage3");

    const Stage3Data data = proposed_eval_data(cfg, d, front);
    log << "event=data eval=proposed rows=" << data.folds.size() << "\n";
    const Stage3TrainConfig tc{cfg.stage3.epochs, cfg.stage3.batch_size, cfg.stage3.lr,
                               derive_seed(cfg.seed, "eval-proposed")};
    const EvalReport rep =
        kfold_evaluate(data, cfg.regressor, tc, Condition::proposed, cfg.dataset.k_folds);
    write_eval_outputs(rep, dir, log);
}

void cmd_eval_upper_bound(const PipelineConfig& cfg, const std::string& dir, std::ostream& log) {
    const OpenedData d = open_dataset(cfg);
    auto vae = load_stage1(cfg);

    const auto segs = segments_in(d.manifest, StageSplit::stage3);
    const RirLatentTable table = rir_latent_table(*vae, d, segs);
    Stage3Data data;
    data.inputs = gather_latent_rows(table, segs);
    data.targets = segment_targets(d, segs);
    for (const SegmentRecord* s : segs) {
        data.rir_ids.push_back(s->rir_id);
        data.folds.push_back(s->fold);
    }
    log << "event=data eval=upper_bound rows=" << data.folds.size()
        << " rirs=" << table.ids.size() << "\n";

    const Stage3TrainConfig tc{cfg.stage3.epochs, cfg.stage3.batch_size, cfg.stage3.lr,
                               derive_seed(cfg.seed, "eval-upper-bound")};
    const EvalReport rep =
        kfold_evaluate(data, cfg.regressor, tc, Condition::upper_bound, cfg.dataset.k_folds);
    write_eval_outputs(rep, dir, log);
}

void cmd_eval_e2e(const PipelineConfig& cfg, const std::string& dir, std::ostream& log) {
    const OpenedData d = open_dataset(cfg);
    const auto segs = segments_in(d.manifest, StageSplit::stage3);
    const auto mels = load_mels(d, segs);
    const Tensor targets = segment_targets(d, segs);
    const int k = cfg.dataset.k_folds;

    std::vector<std::vector<ColumnMetrics>> per_fold;
    std::vector<int> fold_ids;
    for (int f : cfg.eval.e2e_folds) {
        const int val_fold = (f + 1) % k;
        std::vector<std::size_t> tr, va, te;
        for (std::size_t i = 0; i < segs.size(); ++i) {
            const int sf = segs[i]->fold;
            if (sf == f) te.push_back(i);
            else if (sf == val_fold) va.push_back(i);
            else tr.push_back(i);
        }
        if (tr.empty() || va.empty() || te.empty())
            throw ValueError("e2e: fold " + std::to_string(f) + " leaves an empty split");

        auto gather_x = [&](const std::vector<std::size_t>& idx) {
            std::vector<const MelSpectrogram*> ptrs;
            ptrs.reserve(idx.size());
            for (std::size_t i : idx) ptrs.push_back(&mels[i]);
            return mel_batch(ptrs, SpecKind::speech, cfg.speech.mel_bands, cfg.speech.frames);
        };
        auto gather_y = [&](const std::vector<std::size_t>& idx) {
            const std::size_t c = targets.shape[1];
            Tensor y({idx.size(), c}, Precision::train32);
            for (std::size_t i = 0; i < idx.size(); ++i)
                std::copy_n(targets.v.data() + idx[i] * c, c, y.v.data() + i * c);
            apply_precision(y);
            return y;
        };

        log << "event=data eval=e2e fold=" << f << " train=" << tr.size() << " val=" << va.size()
            << " test=" << te.size() << "\n";
        E2eBaseline model(cfg.speech, cfg.regressor);
        model.init(derive_seed(cfg.seed, "e2e-init", static_cast<std::uint64_t>(f)));
        const Stage3TrainConfig tc{cfg.stage3.epochs, cfg.stage3.batch_size, cfg.stage3.lr,
                                   derive_seed(cfg.seed, "e2e-train",
                                               static_cast<std::uint64_t>(f))};
        const Stage3Result r =
            train_e2e_baseline(model, gather_x(tr), gather_y(tr), gather_x(va), gather_y(va), tc);
        log << "event=e2e fold=" << f << " best_epoch=" << r.best_epoch
            << " best_val_mse=" << r.best_val_mse << " params=" << model.param_count() << "\n";

        per_fold.push_back(compute_metrics(model.predict(gather_x(te)), gather_y(te)));
        fold_ids.push_back(f);
    }

    const EvalReport rep = fold_metric_rows(per_fold, fold_ids, Condition::e2e);
    write_eval_outputs(rep, dir, log);
}

void cmd_reconstruct(const PipelineConfig& cfg, const std::string& dir, std::ostream& log) {
    const OpenedData d = open_dataset(cfg);
    FrozenFront front = load_frozen_front(cfg);

    const auto segs = segments_in(d.manifest, StageSplit::stage3);
    const auto seg_mels = load_mels(d, segs);

    std::vector<int> uniq_ids;
    std::map<int, std::size_t> uniq_row;
    for (const SegmentRecord* s : segs) {
        if (uniq_row.count(s->rir_id)) continue;
        uniq_row[s->rir_id] = uniq_ids.size();
        uniq_ids.push_back(s->rir_id);
    }
    std::vector<MelSpectrogram> rir_mels;
    rir_mels.reserve(uniq_ids.size());
    for (int id : uniq_ids) rir_mels.push_back(d.mel(d.manifest.rir_by_id(id).mel_path));

    std::vector<const MelSpectrogram*> seg_rir_ptrs;
    seg_rir_ptrs.reserve(segs.size());
    for (const SegmentRecord* s : segs) seg_rir_ptrs.push_back(&rir_mels[uniq_row.at(s->rir_id)]);

    const ReconReport rep = reconstruction_report(*front.vae, *front.enc.model,
                                                  mel_ptrs(seg_mels), seg_rir_ptrs,
                                                  mel_ptrs(rir_mels));

    std::string csv = "series,bin_lo_db,bin_hi_db,count\n";
    auto emit = [&](const char* name, const ReconHistogram& h) {
        for (std::size_t b = 0; b < h.counts.size(); ++b) {
            csv += std::string(name) + "," + fmt10(h.lo + h.bin_width * b) + "," +
                   fmt10(h.lo + h.bin_width * (b + 1)) + "," + std::to_string(h.counts[b]) + "\n";
        }
    };
    emit("estimated", rep.estimated_hist);
    emit("true", rep.true_hist);
    write_text(dir + "/recon_hist.csv", csv);

    const double med_est = median(rep.estimated_mae_db);
    const double med_true = median(rep.true_mae_db);
    std::string summary;
    summary += "segments=" + std::to_string(rep.estimated_mae_db.size()) + "\n";
    summary += "rirs=" + std::to_string(rep.true_mae_db.size()) + "\n";
    summary += "median_estimated_mae_db=" + fmt10(med_est) + "\n";
    summary += "median_true_mae_db=" + fmt10(med_true) + "\n";
    write_text(dir + "/recon_summary.txt", summary);
    log << "event=reconstruct segments=" << rep.estimated_mae_db.size()
        << " rirs=" << rep.true_mae_db.size() << " median_estimated_mae_db=" << med_est
        << " median_true_mae_db=" << med_true << "\n";
}

void cmd_ablate(const PipelineConfig& cfg, const std::string& dir, std::ostream& log) {
    const OpenedData d = open_dataset(cfg);

    // Everything cell-independent is loaded once and shared across the grid.
    const auto rir_tr = load_mels(d, rirs_in(d.manifest, StageSplit::stage12, Part::train));
    const auto rir_va = load_mels(d, rirs_in(d.manifest, StageSplit::stage12, Part::val));
    const auto s12_tr_segs = segments_in(d.manifest, StageSplit::stage12, Part::train);
    const auto s12_va_segs = segments_in(d.manifest, StageSplit::stage12, Part::val);
    const auto s12_tr_mels = load_mels(d, s12_tr_segs);
    const auto s12_va_mels = load_mels(d, s12_va_segs);

    auto all12 = s12_tr_segs;
    all12.insert(all12.end(), s12_va_segs.begin(), s12_va_segs.end());
    std::vector<int> uniq12_ids;
    std::map<int, std::size_t> uniq12_row;
    for (const SegmentRecord* s : all12) {
        if (uniq12_row.count(s->rir_id)) continue;
        uniq12_row[s->rir_id] = uniq12_ids.size();
        uniq12_ids.push_back(s->rir_id);
    }
    std::vector<MelSpectrogram> uniq12_mels;
    for (int id : uniq12_ids) uniq12_mels.push_back(d.mel(d.manifest.rir_by_id(id).mel_path));

    const auto s3_tr_segs = segments_in(d.manifest, StageSplit::stage3, Part::train);
    const auto s3_va_segs = segments_in(d.manifest, StageSplit::stage3, Part::val);
    const auto s3_te_segs = segments_in(d.manifest, StageSplit::stage3, Part::test);
    const auto s3_tr_mels = load_mels(d, s3_tr_segs);
    const auto s3_va_mels = load_mels(d, s3_va_segs);
    const auto s3_te_mels = load_mels(d, s3_te_segs);
    const Tensor y_tr = segment_targets(d, s3_tr_segs);
    const Tensor y_va = segment_targets(d, s3_va_segs);
    const Tensor y_te = segment_targets(d, s3_te_segs);

    std::vector<MelSpectrogram> te_rir_mels;
    {
        std::map<int, bool> seen;
        for (const SegmentRecord* s : s3_te_segs) {
            if (seen.count(s->rir_id)) continue;
            seen[s->rir_id] = true;
            te_rir_mels.push_back(d.mel(d.manifest.rir_by_id(s->rir_id).mel_path));
        }
    }
    log << "event=data ablate stage12_train=" << s12_tr_mels.size()
        << " stage3_train=" << s3_tr_mels.size() << " test=" << s3_te_mels.size() << "\n";

    std::string per_seed_csv = "latent_dim,quant_bits,seed,t60_mae,c50_mae,recon_mae_db\n";

    auto train_cell_once = [&](std::size_t D, int B, std::uint64_t seed) {
        PipelineConfig c = cfg;
        c.vae.latent_dim = D;
        c.vae.quant_bits = static_cast<std::size_t>(B);
        c.seed = seed;
        c.derive_and_validate();

        RirVae vae(c.vae);
        vae.init(derive_seed(c.seed, "stage1-init"));
        const VaeTrainConfig v1{c.ablation.stage1_epochs, c.stage1.batch_size, c.stage1.lr,
                                derive_seed(c.seed, "stage1")};
        train_stage1(vae, rir_tr, rir_va, v1);

        Tensor ztab = vae_latent_targets(vae, mel_ptrs(uniq12_mels));
        auto rows_for = [&](const std::vector<const SegmentRecord*>& segs) {
            Tensor z({segs.size(), D}, Precision::train32);
            for (std::size_t i = 0; i < segs.size(); ++i) {
                const std::size_t r = uniq12_row.at(segs[i]->rir_id);
                std::copy_n(ztab.v.data() + r * D, D, z.v.data() + i * D);
            }
            apply_precision(z);
            return z;
        };
        SpeechEncoder enc(c.speech);
        enc.init(derive_seed(c.seed, "stage2-init"));
        const Stage2TrainConfig v2{c.ablation.stage2_epochs, c.stage2.batch_size, c.stage2.lr,
                                   derive_seed(c.seed, "stage2")};
        train_stage2(enc, s12_tr_mels, rows_for(s12_tr_segs), s12_va_mels, rows_for(s12_va_segs),
                     v2);

        ParamRegressor reg(c.regressor);
        reg.init(derive_seed(c.seed, "stage3-init"));
        const Stage3TrainConfig v3{c.ablation.stage3_epochs, c.stage3.batch_size, c.stage3.lr,
                                   derive_seed(c.seed, "stage3")};
        train_stage3(reg, quantized_embeddings(enc, c.vae, mel_ptrs(s3_tr_mels)), y_tr,
                     quantized_embeddings(enc, c.vae, mel_ptrs(s3_va_mels)), y_va, v3);

        const std::vector<ColumnMetrics> ms =
            compute_metrics(reg.predict(quantized_embeddings(enc, c.vae, mel_ptrs(s3_te_mels))),
                            y_te);
        AblationCell cell;
        cell.latent_dim = D;
        cell.quant_bits = B;
        for (std::size_t j = 0; j < kNumOctaveBands; ++j) {
            cell.t60_mae += ms[j].mae / kNumOctaveBands;
            cell.c50_mae += ms[kNumOctaveBands + j].mae / kNumOctaveBands;
        }
        const Tensor zt = vae_latent_targets(vae, mel_ptrs(te_rir_mels));
        const Tensor rec = vae.decode_batch(zt, false);
        const Tensor tgt =
            mel_batch(mel_ptrs(te_rir_mels), SpecKind::rir, c.vae.mel_bands, c.vae.frames);
        cell.recon_mae_db = mean_mae_db(rec, tgt);
        return cell;
    };

    const AblationReport rep = ablation_grid(
        cfg.ablation.latent_dims, cfg.ablation.quant_bits,
        [&](std::size_t D, int B) {
            std::vector<double> t60s, c50s, recs;
            for (std::uint64_t s : cfg.ablation.seeds) {
                const AblationCell c = train_cell_once(D, B, s);
                per_seed_csv += std::to_string(D) + "," + std::to_string(B) + "," +
                                std::to_string(s) + "," + fmt10(c.t60_mae) + "," +
                                fmt10(c.c50_mae) + "," + fmt10(c.recon_mae_db) + "\n";
                log << "event=cell latent_dim=" << D << " quant_bits=" << B << " seed=" << s
                    << " t60_mae=" << c.t60_mae << " c50_mae=" << c.c50_mae
                    << " recon_mae_db=" << c.recon_mae_db << "\n";
                t60s.push_back(c.t60_mae);
                c50s.push_back(c.c50_mae);
                recs.push_back(c.recon_mae_db);
            }
            AblationCell med;
            med.latent_dim = D;
            med.quant_bits = B;
            med.t60_mae = median(t60s);
            med.c50_mae = median(c50s);
            med.recon_mae_db = median(recs);
            return med;
        });

    write_text(dir + "/ablate.csv", per_seed_csv);
    write_text(dir + "/ablate_median.csv", ablation_csv(rep));
    log << "event=ablate cells=" << rep.cells.size() << " seeds=" << cfg.ablation.seeds.size()
        << "\n";
}

Condition condition_from_string(const std::string& s) {
    if (s == "proposed") return Condition::proposed;
    if (s == "e2e") return Condition::e2e;
    if (s == "upper_bound") return Condition::upper_bound;
    throw ConfigError("unknown condition '" + s + "'");
}

EvalReport parse_eval_csv(const std::string& text) {
    EvalReport rep;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "band,parameter,metric,condition,fold,value")
        throw ValueError("unexpected eval csv header");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            f.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (f.size() != 6) throw ValueError("malformed eval csv row: '" + line + "'");
        MetricRow r;
        r.band_hz = std::stod(f[0]);
        r.parameter = f[1];
        r.metric = f[2];
        r.condition = condition_from_string(f[3]);
        r.fold = std::stoi(f[4]);
        r.defined = f[5] != "nan";
        r.value = r.defined ? std::stod(f[5]) : std::numeric_limits<double>::quiet_NaN();
        rep.rows.push_back(r);
    }
    return rep;
}

void cmd_report(const PipelineConfig& cfg, const std::string& dir, std::ostream& log) {
    std::vector<EvalReport> parts;
    for (const char* name : {"eval-proposed", "eval-e2e", "eval-upper-bound"}) {
        const std::string edir = run_dir(cfg, name);
        if (!run_done(edir)) continue;
        parts.push_back(parse_eval_csv(read_text(edir + "/eval.csv")));
        log << "event=report source=" << name << "\n";
    }
    if (parts.empty()) throw MissingStageError("eval-proposed");

    const EvalReport merged = merge_reports(parts);
    write_text(dir + "/report.csv", eval_report_csv(merged));

    std::string txt = eval_report_table(merged);
    const std::string rdir = run_dir(cfg, "reconstruct");
    if (run_done(rdir)) {
        txt += "\nreconstruction error (dB)\n";
        txt += read_text(rdir + "/recon_summary.txt");
        log << "event=report source=reconstruct\n";
    }
    const std::string adir = run_dir(cfg, "ablate");
    if (run_done(adir)) {
        txt += "\nablation medians\n";
        txt += read_text(adir + "/ablate_median.csv");
        log << "event=report source=ablate\n";
    }
    write_text(dir + "/report.txt", txt);
    log << "event=report conditions=" << parts.size() << "\n";
}

/// Throws MissingStageError for the deepest unmet direct dependency so a
/// premature command names exactly what to run next.
void check_ready(const PipelineConfig& cfg, const std::string& command) {
    static const std::map<std::string, std::vector<std::string>> deps = {
        {"synth-data", {}},
        {"groundtruth", {"synth-data"}},
        {"train-stage1", {"synth-data"}},
        {"train-stage2", {"train-stage1", "synth-data"}},
        {"train-stage3", {"train-stage2", "train-stage1", "synth-data"}},
        {"eval-proposed", {"train-stage3", "train-stage2", "train-stage1", "synth-data"}},
        {"eval-upper-bound", {"train-stage1", "synth-data"}},
        {"eval-e2e", {"synth-data"}},
        {"reconstruct", {"train-stage2", "train-stage1", "synth-data"}},
        {"ablate", {"synth-data"}},
    };
    if (command == "report") {
        for (const char* name : {"eval-proposed", "eval-e2e", "eval-upper-bound"})
            if (run_done(run_dir(cfg, name))) return;
        throw MissingStageError("eval-proposed");
    }
    for (const std::string& d : deps.at(command)) require_stage(cfg, d);
}

} // namespace

void run_command(const std::string& command, const PipelineConfig& cfg0, bool force, int jobs,
                 std::ostream& log) {
    const auto& names = command_names();
    if (std::find(names.begin(), names.end(), command) == names.end())
        throw ConfigError("unknown command '" + command + "'");

    PipelineConfig cfg = cfg0;
    cfg.derive_and_validate();
    if (jobs > 1) log << "event=jobs requested=" << jobs << " effective=1\n";

    const std::string dir = run_dir(cfg, command);
    check_ready(cfg, command);
    if (run_done(dir)) {
        if (!force) {
            log << "event=skip command=" << command << " dir=" << dir << "\n";
            return;
        }
        fs::remove_all(dir);
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create run directory '" + dir + "': " + ec.message());
    write_text(dir + "/config.json", pipeline_to_json(cfg).dump(2) + "\n");

    log << "event=start command=" << command << " dir=" << dir << "\n";
    const auto t0 = std::chrono::steady_clock::now();
    if (command == "synth-data") cmd_synth_data(cfg, dir, log);
    else if (command == "groundtruth") cmd_groundtruth(cfg, dir, log);
    else if (command == "train-stage1") cmd_train_stage1(cfg, dir, log);
    else if (command == "train-stage2") cmd_train_stage2(cfg, dir, log);
    else if (command == "train-stage3") cmd_train_stage3(cfg, dir, log);
    else if (command == "eval-proposed") cmd_eval_proposed(cfg, dir, log);
    else if (command == "eval-e2e") cmd_eval_e2e(cfg, dir, log);
    else if (command == "eval-upper-bound") cmd_eval_upper_bound(cfg, dir, log);
    else if (command == "reconstruct") cmd_reconstruct(cfg, dir, log);
    else if (command == "ablate") cmd_ablate(cfg, dir, log);
    else cmd_report(cfg, dir, log);

    write_text(dir + "/DONE", "done\n");
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << "event=done command=" << command << " elapsed_s=" << secs << "\n";
}

int exit_code_for_current_exception() {
    try {
        throw;
    } catch (const MissingStageError&) {
        return 3;
    } catch (const NumericalError&) {
        return 4;
    } catch (const std::exception&) {
        return 2;
    }
}

} // namespace revblind
