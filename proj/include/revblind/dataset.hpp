#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "revblind/acoustics.hpp"
#include "revblind/spectral.hpp"
#include "revblind/synth.hpp"

namespace revblind {

/// Project-wide audio sample rate; every synthesized asset uses it.
inline constexpr double kAudioRateHz = 16000.0;

enum class StageSplit : int { stage12 = 0, stage3 = 1 };
enum class Part : int { train = 0, val = 1, test = 2 };

const char* to_string(StageSplit s);
const char* to_string(Part p);
StageSplit stage_split_from_string(const std::string& s);
Part part_from_string(const std::string& s);

/// One generated RIR: its recipe, where its assets live, and the measured
/// acoustic parameters that downstream training regresses onto.
struct RirRecord {
    int id = -1;
    StageSplit split = StageSplit::stage12;
    Part part = Part::train;
    int fold = -1; // k-fold index for stage-III RIRs, -1 elsewhere
    RirSpec spec;
    AcousticParams ground_truth;
    std::string wav_path; // relative to the dataset root
    std::string mel_path;
};

struct SourceRecord {
    int id = -1;
    StageSplit split = StageSplit::stage12;
    Part part = Part::train;
    SpeechSpec spec;
    std::string wav_path;
};

/// One rendered reverberant segment: a window of a source convolved with an
/// RIR. Split, part and fold always match the underlying RIR and source.
struct SegmentRecord {
    int id = -1;
    StageSplit split = StageSplit::stage12;
    Part part = Part::train;
    int fold = -1;
    int rir_id = -1;
    int source_id = -1;
    std::int64_t source_offset = 0; // samples into the source signal
    double snr_db = 0.0;            // +inf = clean
    std::uint64_t seed = 0;
    std::string wav_path; // empty when segment waveforms are not persisted
    std::string mel_path;
};

struct DatasetConfig {
    int n_rir = 400;
    int n_sources = 100;
    int n_segments = 3600;
    double segment_duration_s = 1.0; // 4.0 mirrors the source setting; 1.0 for desk throughput
    double source_duration_s = 8.0;
    double rir_length_s = 1.0; // time-domain asset length

    double stage12_fraction = 0.5;
    double train_fraction = 0.8;
    double val_fraction = 0.1; // test gets the remainder
    int k_folds = 8;

    // Ranges for randomized RIR recipes.
    double t60_lo = 0.2, t60_hi = 0.8;
    double t60_band_jitter = 0.12; // relative per-band wobble
    double t60_tilt = 0.2;         // relative low-to-high band slope range
    double direct_gain_lo = 2.0, direct_gain_hi = 6.0;
    int direct_delay_lo = 20, direct_delay_hi = 200;

    // Ranges for randomized speech recipes.
    double pause_lo = 0.05, pause_hi = 0.35;
    double pitch_lo_hz = 90.0, pitch_hi_hz = 260.0;
    double syllable_lo_hz = 2.0, syllable_hi_hz = 5.0;

    double snr_db = std::numeric_limits<double>::infinity();
    bool save_segment_wavs = true;
    std::uint64_t master_seed = 1;

    FrontendConfig frontend;
};

void validate(const DatasetConfig& cfg);

struct DatasetManifest {
    DatasetConfig config;
    std::vector<RirRecord> rirs;
    std::vector<SourceRecord> sources;
    std::vector<SegmentRecord> segments;

    const RirRecord& rir_by_id(int id) const;
    const SourceRecord& source_by_id(int id) const;
};

/// Structural invariants: unique ids, resolvable references, split/part/fold
/// consistency between segments and their assets, fold ranges. Throws
/// ValueError with the first violation found.
void validate_manifest(const DatasetManifest& m);

/// JSON-lines serialization (header line + one line per record).
std::string manifest_to_jsonl(const DatasetManifest& m);
DatasetManifest manifest_from_jsonl(const std::string& text);
void write_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::string& path);

/// Generates every asset (RIR/source waveforms, mel spectrograms, rendered
/// segments) under root_dir and returns the manifest, which is also written
/// to root_dir/manifest.jsonl. Deterministic per config.
DatasetManifest build_dataset(const DatasetConfig& cfg, const std::string& root_dir);

} // namespace revblind
