#include "revblind/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <type_traits>
#include <vector>

namespace revblind {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;

// Bit-exact little-endian serialization for both integers and float payloads.
template <class T>
using UintFor = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;

template <class T>
void put_le(std::vector<unsigned char>& out, T v) {
    UintFor<T> u;
    std::memcpy(&u, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<unsigned char>((u >> (8 * i)) & 0xff));
    }
}

template <class T>
T get_le(const unsigned char* p) {
    UintFor<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        u |= static_cast<UintFor<T>>(p[i]) << (8 * i);
    }
    T out;
    std::memcpy(&out, &u, sizeof(T));
    return out;
}

} // namespace

SampleBuffer read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_wav: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw IoError("read_wav: not a RIFF/WAVE file: " + path);
    }

    std::uint16_t audio_format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    const unsigned char* data = nullptr;
    std::uint32_t data_len = 0;

    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
        const std::uint32_t len = get_le<std::uint32_t>(bytes.data() + pos + 4);
        const std::size_t body = pos + 8;
        if (body + len > bytes.size()) break;
        if (std::memcmp(id, "fmt ", 4) == 0 && len >= 16) {
            audio_format = get_le<std::uint16_t>(bytes.data() + body);
            channels = get_le<std::uint16_t>(bytes.data() + body + 2);
            rate = get_le<std::uint32_t>(bytes.data() + body + 4);
            bits = get_le<std::uint16_t>(bytes.data() + body + 14);
        } else if (std::memcmp(id, "data", 4) == 0) {
            data = bytes.data() + body;
            data_len = len;
        }
        pos = body + len + (len & 1);
    }

    if (data == nullptr || audio_format == 0) throw IoError("read_wav: missing fmt or data chunk: " + path);
    if (channels != 1) throw IoError("read_wav: only mono supported, got " + std::to_string(channels) + " channels");
    if (rate != 16000) throw IoError("read_wav: only 16 kHz supported, got " + std::to_string(rate) + " Hz");

    SampleBuffer out;
    out.sample_rate = 16000.0;
    if (audio_format == kFormatPcm && bits == 16) {
        const std::size_t n = data_len / 2;
        out.samples.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            out.samples[i] = static_cast<double>(get_le<std::int16_t>(data + 2 * i)) / 32768.0;
        }
    } else if (audio_format == kFormatFloat && bits == 32) {
        const std::size_t n = data_len / 4;
        out.samples.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            out.samples[i] = static_cast<double>(get_le<float>(data + 4 * i));
        }
    } else {
        throw IoError("read_wav: unsupported codec (format " + std::to_string(audio_format) +
                      ", " + std::to_string(bits) + " bits): " + path);
    }
    if (out.samples.empty()) throw IoError("read_wav: empty data chunk: " + path);
    return out;
}

void write_wav(const std::string& path, const SampleBuffer& x, WavFormat format) {
    validate(x, "write_wav");
    if (x.sample_rate != 16000.0) {
        throw ValueError("write_wav: only 16 kHz buffers supported");
    }
    const std::uint32_t n = static_cast<std::uint32_t>(x.samples.size());
    const bool pcm = format == WavFormat::pcm16;
    const std::uint16_t bytes_per = pcm ? 2 : 4;
    const std::uint32_t data_len = n * bytes_per;

    std::vector<unsigned char> out;
    out.reserve(64 + data_len);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    const std::uint32_t fact_len = pcm ? 0 : 12;
    put_le<std::uint32_t>(out, 4 + 24 + fact_len + 8 + data_len);
    out.insert(out.end(), {'W', 'A', 'V', 'E'});

    out.insert(out.end(), {'f', 'm', 't', ' '});
    put_le<std::uint32_t>(out, 16);
    put_le<std::uint16_t>(out, pcm ? kFormatPcm : kFormatFloat);
    put_le<std::uint16_t>(out, 1);
    put_le<std::uint32_t>(out, 16000);
    put_le<std::uint32_t>(out, 16000u * bytes_per);
    put_le<std::uint16_t>(out, bytes_per);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(8 * bytes_per));

    if (!pcm) {
        out.insert(out.end(), {'f', 'a', 'c', 't'});
        put_le<std::uint32_t>(out, 4);
        put_le<std::uint32_t>(out, n);
    }

    out.insert(out.end(), {'d', 'a', 't', 'a'});
    put_le<std::uint32_t>(out, data_len);
    for (double v : x.samples) {
        if (pcm) {
            double c = std::clamp(v, -1.0, 32767.0 / 32768.0);
            put_le<std::int16_t>(out, static_cast<std::int16_t>(std::lrint(c * 32768.0)));
        } else {
            put_le<float>(out, static_cast<float>(v));
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_wav: cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write_wav: write failed: " + path);
}

} // namespace revblind
