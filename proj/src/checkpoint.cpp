#include "revblind/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "revblind/rng.hpp"

namespace revblind {

using json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'R', 'B', 'C', 'K', 'P', 'T', '1', '\n'};
constexpr int kVersion = 1;

std::vector<unsigned char> params_blob(const std::vector<Param*>& params) {
    std::size_t total = 0;
    for (const Param* p : params) total += p->value.size();
    std::vector<unsigned char> blob;
    blob.reserve(total * 4);
    for (const Param* p : params) {
        for (double x : p->value.v) {
            const float f = static_cast<float>(x);
            std::uint32_t u;
            std::memcpy(&u, &f, 4);
            blob.push_back(static_cast<unsigned char>(u & 0xff));
            blob.push_back(static_cast<unsigned char>((u >> 8) & 0xff));
            blob.push_back(static_cast<unsigned char>((u >> 16) & 0xff));
            blob.push_back(static_cast<unsigned char>((u >> 24) & 0xff));
        }
    }
    return blob;
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                      std::istreambuf_iterator<char>());
}

struct ParsedCheckpoint {
    json header;
    const unsigned char* blob = nullptr;
    std::size_t blob_len = 0;
};

ParsedCheckpoint parse(const std::vector<unsigned char>& bytes, const std::string& path) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw IoError("checkpoint: bad magic in " + path);
    }
    std::uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i) hlen |= static_cast<std::uint32_t>(bytes[8 + i]) << (8 * i);
    if (bytes.size() < 12 + static_cast<std::size_t>(hlen) + 8) {
        throw IoError("checkpoint: truncated file " + path);
    }
    ParsedCheckpoint out;
    try {
        out.header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint: bad header in " + path + ": " + e.what());
    }
    if (!out.header.contains("version") || out.header["version"].get<int>() != kVersion) {
        throw IoError("checkpoint: unsupported version in " + path);
    }
    out.blob = bytes.data() + 12 + hlen;
    out.blob_len = bytes.size() - 12 - hlen - 8;

    std::uint64_t stored = 0;
    const unsigned char* tail = bytes.data() + bytes.size() - 8;
    for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(tail[i]) << (8 * i);
    if (fnv1a64(out.blob, out.blob_len) != stored) {
        throw IoError("checkpoint: blob hash mismatch in " + path);
    }
    return out;
}

} // namespace

void save_checkpoint(const std::string& path, const std::vector<Param*>& params,
                     const nlohmann::json& meta) {
    json header;
    header["version"] = kVersion;
    header["meta"] = meta;
    header["params"] = json::array();
    for (const Param* p : params) {
        json rec;
        rec["name"] = p->name;
        rec["shape"] = p->value.shape;
        header["params"].push_back(rec);
    }
    const std::string htext = header.dump();
    const std::vector<unsigned char> blob = params_blob(params);

    std::vector<unsigned char> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    put_u32(out, static_cast<std::uint32_t>(htext.size()));
    out.insert(out.end(), htext.begin(), htext.end());
    out.insert(out.end(), blob.begin(), blob.end());
    put_u64(out, fnv1a64(blob.data(), blob.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("checkpoint: write failed for " + path);
}

nlohmann::json load_checkpoint(const std::string& path, const std::vector<Param*>& params) {
    const std::vector<unsigned char> bytes = read_file(path);
    const ParsedCheckpoint pc = parse(bytes, path);

    const json& recs = pc.header.at("params");
    if (recs.size() != params.size()) {
        throw IoError("checkpoint: parameter count mismatch in " + path + " (file " +
                      std::to_string(recs.size()) + ", model " + std::to_string(params.size()) + ")");
    }
    std::size_t total = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const json& rec = recs[i];
        if (rec.at("name").get<std::string>() != params[i]->name) {
            throw IoError("checkpoint: parameter name mismatch at index " + std::to_string(i) +
                          " in " + path + " (file '" + rec.at("name").get<std::string>() +
                          "', model '" + params[i]->name + "')");
        }
        const std::vector<std::size_t> shape = rec.at("shape").get<std::vector<std::size_t>>();
        if (shape != params[i]->value.shape) {
            throw IoError("checkpoint: shape mismatch for " + params[i]->name + " in " + path);
        }
        total += params[i]->value.size();
    }
    if (pc.blob_len != total * 4) {
        throw IoError("checkpoint: blob size mismatch in " + path);
    }

    const unsigned char* p = pc.blob;
    for (Param* prm : params) {
        for (double& x : prm->value.v) {
            std::uint32_t u = 0;
            for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
            float f;
            std::memcpy(&f, &u, 4);
            x = static_cast<double>(f);
            p += 4;
        }
        std::fill(prm->grad.v.begin(), prm->grad.v.end(), 0.0);
    }
    return pc.header.at("meta");
}

nlohmann::json read_checkpoint_meta(const std::string& path) {
    const std::vector<unsigned char> bytes = read_file(path);
    return parse(bytes, path).header.at("meta");
}

std::uint64_t params_hash(const std::vector<Param*>& params) {
    const std::vector<unsigned char> blob = params_blob(params);
    return fnv1a64(blob.data(), blob.size());
}

} // namespace revblind
