#include "revblind/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "revblind/errors.hpp"
#include "revblind/rng.hpp"
#include "revblind/wav.hpp"

namespace revblind {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr double kRate = kAudioRateHz;
constexpr int kManifestVersion = 1;

std::string format_id(const char* prefix, int id) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%06d", prefix, id);
    return buf;
}

// JSON has no infinity literal; SNR round-trips through a string marker.
json snr_to_json(double snr) {
    if (std::isinf(snr) && snr > 0.0) return "inf";
    return snr;
}

double snr_from_json(const json& j) {
    if (j.is_string()) {
        if (j.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
        throw IoError("manifest: bad snr marker '" + j.get<std::string>() + "'");
    }
    return j.get<double>();
}

json config_to_json(const DatasetConfig& c) {
    json j;
    j["n_rir"] = c.n_rir;
    j["n_sources"] = c.n_sources;
    j["n_segments"] = c.n_segments;
    j["segment_duration_s"] = c.segment_duration_s;
    j["source_duration_s"] = c.source_duration_s;
    j["rir_length_s"] = c.rir_length_s;
    j["stage12_fraction"] = c.stage12_fraction;
    j["train_fraction"] = c.train_fraction;
    j["val_fraction"] = c.val_fraction;
    j["k_folds"] = c.k_folds;
    j["t60_lo"] = c.t60_lo;
    j["t60_hi"] = c.t60_hi;
    j["t60_band_jitter"] = c.t60_band_jitter;
    j["t60_tilt"] = c.t60_tilt;
    j["direct_gain_lo"] = c.direct_gain_lo;
    j["direct_gain_hi"] = c.direct_gain_hi;
    j["direct_delay_lo"] = c.direct_delay_lo;
    j["direct_delay_hi"] = c.direct_delay_hi;
    j["pause_lo"] = c.pause_lo;
    j["pause_hi"] = c.pause_hi;
    j["pitch_lo_hz"] = c.pitch_lo_hz;
    j["pitch_hi_hz"] = c.pitch_hi_hz;
    j["syllable_lo_hz"] = c.syllable_lo_hz;
    j["syllable_hi_hz"] = c.syllable_hi_hz;
    j["snr_db"] = snr_to_json(c.snr_db);
    j["save_segment_wavs"] = c.save_segment_wavs;
    j["master_seed"] = c.master_seed;
    j["frontend"] = {{"window_length", c.frontend.window_length},
                     {"rir_hop", c.frontend.rir_hop},
                     {"speech_hop", c.frontend.speech_hop},
                     {"window", c.frontend.window == Window::hann ? "hann" : "rectangular"},
                     {"n_mels", c.frontend.n_mels},
                     {"log_floor", c.frontend.log_floor},
                     {"rir_duration_s", c.frontend.rir_duration_s}};
    return j;
}

DatasetConfig config_from_json(const json& j) {
    DatasetConfig c;
    c.n_rir = j.at("n_rir").get<int>();
    c.n_sources = j.at("n_sources").get<int>();
    c.n_segments = j.at("n_segments").get<int>();
    c.segment_duration_s = j.at("segment_duration_s").get<double>();
    c.source_duration_s = j.at("source_duration_s").get<double>();
    c.rir_length_s = j.at("rir_length_s").get<double>();
    c.stage12_fraction = j.at("stage12_fraction").get<double>();
    c.train_fraction = j.at("train_fraction").get<double>();
    c.val_fraction = j.at("val_fraction").get<double>();
    c.k_folds = j.at("k_folds").get<int>();
    c.t60_lo = j.at("t60_lo").get<double>();
    c.t60_hi = j.at("t60_hi").get<double>();
    c.t60_band_jitter = j.at("t60_band_jitter").get<double>();
    c.t60_tilt = j.at("t60_tilt").get<double>();
    c.direct_gain_lo = j.at("direct_gain_lo").get<double>();
    c.direct_gain_hi = j.at("direct_gain_hi").get<double>();
    c.direct_delay_lo = j.at("direct_delay_lo").get<int>();
    c.direct_delay_hi = j.at("direct_delay_hi").get<int>();
    c.pause_lo = j.at("pause_lo").get<double>();
    c.pause_hi = j.at("pause_hi").get<double>();
    c.pitch_lo_hz = j.at("pitch_lo_hz").get<double>();
    c.pitch_hi_hz = j.at("pitch_hi_hz").get<double>();
    c.syllable_lo_hz = j.at("syllable_lo_hz").get<double>();
    c.syllable_hi_hz = j.at("syllable_hi_hz").get<double>();
    c.snr_db = snr_from_json(j.at("snr_db"));
    c.save_segment_wavs = j.at("save_segment_wavs").get<bool>();
    c.master_seed = j.at("master_seed").get<std::uint64_t>();
    const json& f = j.at("frontend");
    c.frontend.window_length = f.at("window_length").get<int>();
    c.frontend.rir_hop = f.at("rir_hop").get<int>();
    c.frontend.speech_hop = f.at("speech_hop").get<int>();
    c.frontend.window = f.at("window").get<std::string>() == "hann" ? Window::hann : Window::rectangular;
    c.frontend.n_mels = f.at("n_mels").get<int>();
    c.frontend.log_floor = f.at("log_floor").get<double>();
    c.frontend.rir_duration_s = f.at("rir_duration_s").get<double>();
    return c;
}

json array7(const std::array<double, kNumOctaveBands>& a) {
    json j = json::array();
    for (double v : a) j.push_back(v);
    return j;
}

std::array<double, kNumOctaveBands> array7_from_json(const json& j) {
    if (!j.is_array() || j.size() != kNumOctaveBands) {
        throw IoError("manifest: expected a 7-element band array");
    }
    std::array<double, kNumOctaveBands> a{};
    for (int i = 0; i < kNumOctaveBands; ++i) a[static_cast<std::size_t>(i)] = j[static_cast<std::size_t>(i)].get<double>();
    return a;
}

// Largest-count-first rounding: split n into buckets proportional to fracs.
std::vector<int> proportional_counts(int n, const std::vector<double>& fracs) {
    std::vector<int> counts(fracs.size());
    int used = 0;
    for (std::size_t i = 0; i + 1 < fracs.size(); ++i) {
        counts[i] = static_cast<int>(std::lrint(fracs[i] * n));
        used += counts[i];
    }
    counts.back() = n - used;
    if (counts.back() < 0) {
        throw ConfigError("dataset: split fractions overflow the available count");
    }
    return counts;
}

struct Assignment {
    StageSplit split;
    Part part;
};

// Random exclusive assignment of n items to stage splits, then parts.
std::vector<Assignment> assign_splits(int n, const DatasetConfig& cfg, Rng& rng) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());

    const auto stage_counts = proportional_counts(n, {cfg.stage12_fraction, 1.0 - cfg.stage12_fraction});
    std::vector<Assignment> out(static_cast<std::size_t>(n));
    int pos = 0;
    for (int s = 0; s < 2; ++s) {
        const auto part_counts = proportional_counts(
            stage_counts[static_cast<std::size_t>(s)],
            {cfg.train_fraction, cfg.val_fraction, 1.0 - cfg.train_fraction - cfg.val_fraction});
        for (int p = 0; p < 3; ++p) {
            for (int i = 0; i < part_counts[static_cast<std::size_t>(p)]; ++i, ++pos) {
                out[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])] = {
                    static_cast<StageSplit>(s), static_cast<Part>(p)};
            }
        }
    }
    return out;
}

} // namespace

const char* to_string(StageSplit s) { return s == StageSplit::stage12 ? "stage12" : "stage3"; }
const char* to_string(Part p) {
    switch (p) {
        case Part::train: return "train";
        case Part::val: return "val";
        default: return "test";
    }
}

StageSplit stage_split_from_string(const std::string& s) {
    if (s == "stage12") return StageSplit::stage12;
    if (s == "stage3") return StageSplit::stage3;
    throw IoError("manifest: unknown stage split '" + s + "'");
}

Part part_from_string(const std::string& s) {
    if (s == "train") return Part::train;
    if (s == "val") return Part::val;
    if (s == "test") return Part::test;
    throw IoError("manifest: unknown part '" + s + "'");
}

void validate(const DatasetConfig& cfg) {
    if (cfg.n_rir < 2 || cfg.n_sources < 2 || cfg.n_segments < 1) {
        throw ConfigError("dataset: need at least 2 RIRs, 2 sources and 1 segment");
    }
    if (!(cfg.segment_duration_s > 0.0) || !(cfg.source_duration_s > 0.0) || !(cfg.rir_length_s > 0.0)) {
        throw ConfigError("dataset: durations must be positive");
    }
    if (cfg.segment_duration_s > cfg.source_duration_s) {
        throw ConfigError("dataset: segment duration exceeds source duration");
    }
    if (!(cfg.stage12_fraction > 0.0 && cfg.stage12_fraction < 1.0)) {
        throw ConfigError("dataset: stage12_fraction must lie in (0, 1)");
    }
    if (!(cfg.train_fraction > 0.0) || !(cfg.val_fraction > 0.0) ||
        !(cfg.train_fraction + cfg.val_fraction < 1.0)) {
        throw ConfigError("dataset: train/val fractions must be positive and sum below 1");
    }
    if (cfg.k_folds < 2) {
        throw ConfigError("dataset: k_folds must be at least 2");
    }
    if (!(cfg.t60_lo >= 0.1 && cfg.t60_hi <= 2.0 && cfg.t60_lo <= cfg.t60_hi)) {
        throw ConfigError("dataset: T60 range must lie inside [0.1, 2.0]");
    }
    if (!(cfg.direct_gain_lo > 0.0 && cfg.direct_gain_hi >= cfg.direct_gain_lo)) {
        throw ConfigError("dataset: direct gain range invalid");
    }
    if (cfg.direct_delay_lo < 0 || cfg.direct_delay_hi < cfg.direct_delay_lo) {
        throw ConfigError("dataset: direct delay range invalid");
    }
    if (!(cfg.pause_lo >= 0.0 && cfg.pause_hi < 1.0 && cfg.pause_lo <= cfg.pause_hi)) {
        throw ConfigError("dataset: pause range must lie inside [0, 1)");
    }
}

const RirRecord& DatasetManifest::rir_by_id(int id) const {
    if (id >= 0 && id < static_cast<int>(rirs.size()) && rirs[static_cast<std::size_t>(id)].id == id) {
        return rirs[static_cast<std::size_t>(id)];
    }
    for (const auto& r : rirs) {
        if (r.id == id) return r;
    }
    throw ValueError("manifest: unresolved rir id " + std::to_string(id));
}

const SourceRecord& DatasetManifest::source_by_id(int id) const {
    if (id >= 0 && id < static_cast<int>(sources.size()) && sources[static_cast<std::size_t>(id)].id == id) {
        return sources[static_cast<std::size_t>(id)];
    }
    for (const auto& s : sources) {
        if (s.id == id) return s;
    }
    throw ValueError("manifest: unresolved source id " + std::to_string(id));
}

void validate_manifest(const DatasetManifest& m) {
    auto check_unique = [](auto const& records, const char* what) {
        std::vector<int> ids;
        ids.reserve(records.size());
        for (const auto& r : records) ids.push_back(r.id);
        std::sort(ids.begin(), ids.end());
        if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
            throw ValueError(std::string("manifest: duplicate ") + what + " id");
        }
    };
    check_unique(m.rirs, "rir");
    check_unique(m.sources, "source");
    check_unique(m.segments, "segment");

    for (const auto& r : m.rirs) {
        if (r.split == StageSplit::stage3) {
            if (r.fold < 0 || r.fold >= m.config.k_folds) {
                throw ValueError("manifest: stage3 rir " + std::to_string(r.id) + " has bad fold");
            }
        } else if (r.fold != -1) {
            throw ValueError("manifest: stage12 rir " + std::to_string(r.id) + " must have fold -1");
        }
        if (r.mel_path.empty() || r.wav_path.empty()) {
            throw ValueError("manifest: rir " + std::to_string(r.id) + " is missing asset paths");
        }
    }
    for (const auto& s : m.sources) {
        if (s.wav_path.empty()) {
            throw ValueError("manifest: source " + std::to_string(s.id) + " is missing its waveform");
        }
    }
    for (const auto& g : m.segments) {
        const RirRecord& r = m.rir_by_id(g.rir_id);       // throws if unresolved
        const SourceRecord& s = m.source_by_id(g.source_id);
        if (g.split != r.split || g.split != s.split) {
            throw ValueError("manifest: segment " + std::to_string(g.id) +
                             " mixes stage splits across its assets");
        }
        if (g.part != r.part || g.part != s.part) {
            throw ValueError("manifest: segment " + std::to_string(g.id) +
                             " mixes train/val/test parts across its assets");
        }
        if (g.fold != r.fold) {
            throw ValueError("manifest: segment " + std::to_string(g.id) +
                             " fold does not match its rir");
        }
        if (g.mel_path.empty()) {
            throw ValueError("manifest: segment " + std::to_string(g.id) + " is missing its mel asset");
        }
        if (g.source_offset < 0) {
            throw ValueError("manifest: segment " + std::to_string(g.id) + " has a negative offset");
        }
    }
}

std::string manifest_to_jsonl(const DatasetManifest& m) {
    std::ostringstream out;
    json header;
    header["type"] = "header";
    header["version"] = kManifestVersion;
    header["config"] = config_to_json(m.config);
    out << header.dump() << '\n';

    for (const auto& r : m.rirs) {
        json j;
        j["type"] = "rir";
        j["id"] = r.id;
        j["split"] = to_string(r.split);
        j["part"] = to_string(r.part);
        j["fold"] = r.fold;
        j["spec"] = {{"t60", array7(r.spec.per_band_t60)},
                     {"direct_gain", r.spec.direct_gain},
                     {"direct_delay", r.spec.direct_delay},
                     {"length", r.spec.length},
                     {"seed", r.spec.seed}};
        j["t60"] = array7(r.ground_truth.t60);
        j["c50"] = array7(r.ground_truth.c50);
        j["wav"] = r.wav_path;
        j["mel"] = r.mel_path;
        out << j.dump() << '\n';
    }
    for (const auto& s : m.sources) {
        json j;
        j["type"] = "source";
        j["id"] = s.id;
        j["split"] = to_string(s.split);
        j["part"] = to_string(s.part);
        j["spec"] = {{"duration_s", s.spec.duration_s},
                     {"pitch_lo_hz", s.spec.pitch_lo_hz},
                     {"pitch_hi_hz", s.spec.pitch_hi_hz},
                     {"syllable_rate_hz", s.spec.syllable_rate_hz},
                     {"pause_fraction", s.spec.pause_fraction},
                     {"seed", s.spec.seed}};
        j["wav"] = s.wav_path;
        out << j.dump() << '\n';
    }
    for (const auto& g : m.segments) {
        json j;
        j["type"] = "segment";
        j["id"] = g.id;
        j["split"] = to_string(g.split);
        j["part"] = to_string(g.part);
        j["fold"] = g.fold;
        j["rir"] = g.rir_id;
        j["source"] = g.source_id;
        j["offset"] = g.source_offset;
        j["snr_db"] = snr_to_json(g.snr_db);
        j["seed"] = g.seed;
        j["wav"] = g.wav_path;
        j["mel"] = g.mel_path;
        out << j.dump() << '\n';
    }
    return out.str();
}

DatasetManifest manifest_from_jsonl(const std::string& text) {
    DatasetManifest m;
    std::istringstream in(text);
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError(std::string("manifest: bad JSON line: ") + e.what());
        }
        try {
        const std::string type = j.at("type").get<std::string>();
        if (type == "header") {
            if (j.at("version").get<int>() != kManifestVersion) {
                throw IoError("manifest: unsupported version");
            }
            m.config = config_from_json(j.at("config"));
            have_header = true;
        } else if (type == "rir") {
            RirRecord r;
            r.id = j.at("id").get<int>();
            r.split = stage_split_from_string(j.at("split").get<std::string>());
            r.part = part_from_string(j.at("part").get<std::string>());
            r.fold = j.at("fold").get<int>();
            const json& spec = j.at("spec");
            r.spec.per_band_t60 = array7_from_json(spec.at("t60"));
            r.spec.direct_gain = spec.at("direct_gain").get<double>();
            r.spec.direct_delay = spec.at("direct_delay").get<int>();
            r.spec.length = spec.at("length").get<int>();
            r.spec.seed = spec.at("seed").get<std::uint64_t>();
            r.ground_truth.t60 = array7_from_json(j.at("t60"));
            r.ground_truth.c50 = array7_from_json(j.at("c50"));
            r.wav_path = j.at("wav").get<std::string>();
            r.mel_path = j.at("mel").get<std::string>();
            m.rirs.push_back(std::move(r));
        } else if (type == "source") {
            SourceRecord s;
            s.id = j.at("id").get<int>();
            s.split = stage_split_from_string(j.at("split").get<std::string>());
            s.part = part_from_string(j.at("part").get<std::string>());
            const json& spec = j.at("spec");
            s.spec.duration_s = spec.at("duration_s").get<double>();
            s.spec.pitch_lo_hz = spec.at("pitch_lo_hz").get<double>();
            s.spec.pitch_hi_hz = spec.at("pitch_hi_hz").get<double>();
            s.spec.syllable_rate_hz = spec.at("syllable_rate_hz").get<double>();
            s.spec.pause_fraction = spec.at("pause_fraction").get<double>();
            s.spec.seed = spec.at("seed").get<std::uint64_t>();
            s.wav_path = j.at("wav").get<std::string>();
            m.sources.push_back(std::move(s));
        } else if (type == "segment") {
            SegmentRecord g;
            g.id = j.at("id").get<int>();
            g.split = stage_split_from_string(j.at("split").get<std::string>());
            g.part = part_from_string(j.at("part").get<std::string>());
            g.fold = j.at("fold").get<int>();
            g.rir_id = j.at("rir").get<int>();
            g.source_id = j.at("source").get<int>();
            g.source_offset = j.at("offset").get<std::int64_t>();
            g.snr_db = snr_from_json(j.at("snr_db"));
            g.seed = j.at("seed").get<std::uint64_t>();
            g.wav_path = j.at("wav").get<std::string>();
            g.mel_path = j.at("mel").get<std::string>();
            m.segments.push_back(std::move(g));
        } else {
            throw IoError("manifest: unknown record type '" + type + "'");
        }
        } catch (const json::exception& e) {
            throw IoError(std::string("manifest: malformed record: ") + e.what());
        }
    }
    if (!have_header) {
        throw IoError("manifest: missing header line");
    }
    return m;
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_manifest: cannot open " + path);
    const std::string text = manifest_to_jsonl(m);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw IoError("write_manifest: write failed: " + path);
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_manifest: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return manifest_from_jsonl(ss.str());
}

DatasetManifest build_dataset(const DatasetConfig& cfg, const std::string& root_dir) {
    validate(cfg);
    const auto seg_len = static_cast<std::size_t>(std::lrint(cfg.segment_duration_s * kRate));
    const auto src_len = static_cast<std::size_t>(std::lrint(cfg.source_duration_s * kRate));
    const int rir_len = static_cast<int>(std::lrint(cfg.rir_length_s * kRate));
    if (seg_len < static_cast<std::size_t>(cfg.frontend.window_length)) {
        throw ConfigError("dataset: segment shorter than one analysis window");
    }

    const fs::path root(root_dir);
    fs::create_directories(root / "rirs");
    fs::create_directories(root / "sources");
    fs::create_directories(root / "segments");

    SpectralFrontend frontend(cfg.frontend, kRate);

    DatasetManifest m;
    m.config = cfg;

    Rng assign_rng(derive_seed(cfg.master_seed, "assign"));
    const auto rir_assign = assign_splits(cfg.n_rir, cfg, assign_rng);
    const auto src_assign = assign_splits(cfg.n_sources, cfg, assign_rng);

    // Folds: balanced round-robin over shuffled stage-III RIRs.
    std::vector<int> rir_fold(static_cast<std::size_t>(cfg.n_rir), -1);
    {
        std::vector<int> stage3_ids;
        for (int i = 0; i < cfg.n_rir; ++i) {
            if (rir_assign[static_cast<std::size_t>(i)].split == StageSplit::stage3) stage3_ids.push_back(i);
        }
        Rng fold_rng(derive_seed(cfg.master_seed, "folds"));
        fold_rng.shuffle(stage3_ids.begin(), stage3_ids.end());
        for (std::size_t i = 0; i < stage3_ids.size(); ++i) {
            rir_fold[static_cast<std::size_t>(stage3_ids[i])] = static_cast<int>(i) % cfg.k_folds;
        }
    }

    // RIRs: synthesize, analyze, persist.
    std::vector<SampleBuffer> rir_buffers;
    rir_buffers.reserve(static_cast<std::size_t>(cfg.n_rir));
    for (int i = 0; i < cfg.n_rir; ++i) {
        Rng rng(derive_seed(cfg.master_seed, "rir-spec", static_cast<std::uint64_t>(i)));
        RirRecord r;
        r.id = i;
        r.split = rir_assign[static_cast<std::size_t>(i)].split;
        r.part = rir_assign[static_cast<std::size_t>(i)].part;
        r.fold = rir_fold[static_cast<std::size_t>(i)];

        const double base = rng.uniform(cfg.t60_lo, cfg.t60_hi);
        const double tilt = rng.uniform(-cfg.t60_tilt, cfg.t60_tilt);
        for (int b = 0; b < kNumOctaveBands; ++b) {
            const double slope = 1.0 + tilt * (3.0 - b) / 3.0;
            const double wobble = 1.0 + cfg.t60_band_jitter * rng.uniform(-1.0, 1.0);
            r.spec.per_band_t60[static_cast<std::size_t>(b)] = std::clamp(base * slope * wobble, 0.1, 2.0);
        }
        r.spec.direct_gain = rng.uniform(cfg.direct_gain_lo, cfg.direct_gain_hi);
        r.spec.direct_delay =
            cfg.direct_delay_lo +
            static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cfg.direct_delay_hi - cfg.direct_delay_lo + 1)));
        r.spec.length = rir_len;
        r.spec.seed = derive_seed(cfg.master_seed, "rir-noise", static_cast<std::uint64_t>(i));

        SampleBuffer h = synth_rir(r.spec);
        r.ground_truth = ground_truth_params(h);
        r.wav_path = "rirs/" + format_id("rir", i) + ".wav";
        r.mel_path = "rirs/" + format_id("rir", i) + ".mel";
        write_wav((root / r.wav_path).string(), h, WavFormat::float32);
        write_melspec((root / r.mel_path).string(), frontend.rir_to_melspec(h));

        rir_buffers.push_back(std::move(h));
        m.rirs.push_back(std::move(r));
    }

    // Sources.
    std::vector<SampleBuffer> src_buffers;
    src_buffers.reserve(static_cast<std::size_t>(cfg.n_sources));
    for (int i = 0; i < cfg.n_sources; ++i) {
        Rng rng(derive_seed(cfg.master_seed, "source-spec", static_cast<std::uint64_t>(i)));
        SourceRecord s;
        s.id = i;
        s.split = src_assign[static_cast<std::size_t>(i)].split;
        s.part = src_assign[static_cast<std::size_t>(i)].part;
        s.spec.duration_s = cfg.source_duration_s;
        const double lo = rng.uniform(cfg.pitch_lo_hz, cfg.pitch_hi_hz * 0.7);
        s.spec.pitch_lo_hz = lo;
        s.spec.pitch_hi_hz = rng.uniform(lo * 1.2, cfg.pitch_hi_hz);
        s.spec.syllable_rate_hz = rng.uniform(cfg.syllable_lo_hz, cfg.syllable_hi_hz);
        s.spec.pause_fraction = rng.uniform(cfg.pause_lo, cfg.pause_hi);
        s.spec.seed = derive_seed(cfg.master_seed, "source-noise", static_cast<std::uint64_t>(i));

        SampleBuffer y = synth_speech(s.spec);
        y.samples.resize(src_len, 0.0); // guard against rounding drift
        s.wav_path = "sources/" + format_id("src", i) + ".wav";
        write_wav((root / s.wav_path).string(), y, WavFormat::float32);

        src_buffers.push_back(std::move(y));
        m.sources.push_back(std::move(s));
    }

    // Pools of asset ids per (stage, part).
    auto pool_of = [](const auto& records) {
        std::array<std::array<std::vector<int>, 3>, 2> pools;
        for (const auto& r : records) {
            pools[static_cast<std::size_t>(r.split)][static_cast<std::size_t>(r.part)].push_back(r.id);
        }
        return pools;
    };
    const auto rir_pools = pool_of(m.rirs);
    const auto src_pools = pool_of(m.sources);

    const auto stage_counts =
        proportional_counts(cfg.n_segments, {cfg.stage12_fraction, 1.0 - cfg.stage12_fraction});
    int next_id = 0;
    for (int s = 0; s < 2; ++s) {
        const auto part_counts = proportional_counts(
            stage_counts[static_cast<std::size_t>(s)],
            {cfg.train_fraction, cfg.val_fraction, 1.0 - cfg.train_fraction - cfg.val_fraction});
        for (int p = 0; p < 3; ++p) {
            const int count = part_counts[static_cast<std::size_t>(p)];
            if (count == 0) continue;
            const auto& rpool = rir_pools[static_cast<std::size_t>(s)][static_cast<std::size_t>(p)];
            const auto& spool = src_pools[static_cast<std::size_t>(s)][static_cast<std::size_t>(p)];
            if (rpool.empty() || spool.empty()) {
                throw ConfigError(std::string("dataset: no ") + to_string(static_cast<StageSplit>(s)) +
                                  "/" + to_string(static_cast<Part>(p)) +
                                  " assets to draw segments from; increase n_rir/n_sources");
            }
            for (int i = 0; i < count; ++i, ++next_id) {
                SegmentRecord g;
                g.id = next_id;
                g.split = static_cast<StageSplit>(s);
                g.part = static_cast<Part>(p);
                g.seed = derive_seed(cfg.master_seed, "segment", static_cast<std::uint64_t>(next_id));

                Rng rng(g.seed);
                g.rir_id = rpool[rng.uniform_index(rpool.size())];
                g.source_id = spool[rng.uniform_index(spool.size())];
                g.fold = m.rirs[static_cast<std::size_t>(g.rir_id)].fold;
                g.source_offset = static_cast<std::int64_t>(rng.uniform_index(src_len - seg_len + 1));
                g.snr_db = cfg.snr_db;

                const auto& src = src_buffers[static_cast<std::size_t>(g.source_id)];
                SampleBuffer window;
                window.sample_rate = kRate;
                window.samples.assign(src.samples.begin() + g.source_offset,
                                      src.samples.begin() + g.source_offset + static_cast<std::int64_t>(seg_len));

                SampleBuffer wet = convolve(window, rir_buffers[static_cast<std::size_t>(g.rir_id)]);
                wet.samples.resize(seg_len);
                if (std::isfinite(g.snr_db) && mean_power(wet) > 0.0) {
                    wet = add_noise(wet, g.snr_db, derive_seed(g.seed, "noise"));
                }

                g.mel_path = "segments/" + format_id("seg", next_id) + ".mel";
                write_melspec((root / g.mel_path).string(), frontend.speech_to_melspec(wet));
                if (cfg.save_segment_wavs) {
                    g.wav_path = "segments/" + format_id("seg", next_id) + ".wav";
                    write_wav((root / g.wav_path).string(), wet, WavFormat::float32);
                }
                m.segments.push_back(std::move(g));
            }
        }
    }

    validate_manifest(m);
    write_manifest((root / "manifest.jsonl").string(), m);
    return m;
}

} // namespace revblind
