#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "ookd/tape.hpp"

namespace ookd::ckpt {

inline constexpr int kSchemaVersion = 1;

// Single-file archive: fixed magic, a JSON header carrying the schema
// version, caller metadata, and the parameter manifest, then raw
// little-endian doubles in manifest order. Round-trips are bit-exact.
void save_checkpoint(const std::string& path, const std::vector<nn::Parameter*>& params,
                     const nlohmann::json& meta);

// Loads values into `params`; names and shapes must match the manifest
// exactly. Returns the stored metadata.
nlohmann::json load_checkpoint(const std::string& path,
                               const std::vector<nn::Parameter*>& params);

// Reads only the metadata header.
nlohmann::json peek_checkpoint(const std::string& path);

// Content hash of the whole file.
uint64_t checkpoint_hash(const std::string& path);

}  // namespace ookd::ckpt
