#pragma once

#include <string>

#include "revblind/signal.hpp"

namespace revblind {

enum class WavFormat { pcm16, float32 };

/// Reads a mono 16 kHz WAV file (PCM 16-bit or 32-bit float).
/// Other sample rates, channel counts or codecs are rejected; there is no
/// resampler in this project.
SampleBuffer read_wav(const std::string& path);

/// Writes a mono WAV file. PCM 16-bit output clips to [-1, 1).
void write_wav(const std::string& path, const SampleBuffer& x, WavFormat format = WavFormat::pcm16);

} // namespace revblind
