#ifndef MITL_CHECKPOINT_HPP
#define MITL_CHECKPOINT_HPP

#include <string>

#include "mitl/net.hpp"

namespace mitl {

// Binary model snapshot: magic bytes, format version, the ModelConfig, a
// pruned flag, a named tensor table (parameters plus normalization running
// buffers, 32-bit little-endian floats), and a trailing CRC-32 over
// everything after the magic. Round-trips are bit-exact.
void save_checkpoint(const MultiTaskNet& net, const std::string& path);

MultiTaskNet load_checkpoint(const std::string& path);

// Rejects a checkpoint whose embedded config differs from `expected`
// (VersionMismatch naming both configs).
MultiTaskNet load_checkpoint(const std::string& path, const ModelConfig& expected);

} // namespace mitl

#endif
