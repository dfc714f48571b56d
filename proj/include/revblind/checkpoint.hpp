#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "revblind/layers.hpp"

namespace revblind {

/// Model checkpoint file layout:
///   bytes 0..7   magic "RBCKPT1\n"
///   u32 LE       header length
///   header       JSON: {"version", "meta", "params": [{"name", "shape"}]}
///   blob         all parameter values as little-endian float32, in order
///   u64 LE       FNV-1a hash of the blob
void save_checkpoint(const std::string& path, const std::vector<Param*>& params,
                     const nlohmann::json& meta);

/// Load values into an existing parameter set. Names and shapes must match
/// the file exactly (same parameters, same order); returns the stored meta.
nlohmann::json load_checkpoint(const std::string& path, const std::vector<Param*>& params);

/// Read only the meta record without touching parameters.
nlohmann::json read_checkpoint_meta(const std::string& path);

/// Content hash of the current parameter values (float32 grid); used to
/// verify that frozen models stay frozen.
std::uint64_t params_hash(const std::vector<Param*>& params);

} // namespace revblind
