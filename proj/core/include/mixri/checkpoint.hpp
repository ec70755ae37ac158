#pragma once

#include <memory>
#include <string>

#include "mixri/matcher.hpp"

namespace mixri {

// Checkpoint: magic, version, seed, config hash, config JSON, then named
// parameter tensors (name, shape, dtype tag, little-endian data).
void save_checkpoint(const std::string& path, const Matcher& matcher, uint64_t seed);

/// Rebuilds the matcher from the stored config and parameters. Refuses files
/// whose stored config hash does not match the re-serialized config.
std::unique_ptr<Matcher> load_checkpoint(const std::string& path, uint64_t* seed = nullptr);

}  // namespace mixri
