#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "CLRS"  u8 version (1)
//   u64 length, UTF-8 JSON text: model spec, vocabularies, train config, threshold
//   u32 record count, then per parameter, in canonical name order:
//     u32 name length, name bytes, u32 dim count, u32 dims..., f32 values (row-major)

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "collabres/trainer.hpp"

namespace collabres::ckpt {

inline constexpr char kMagic[4] = {'C', 'L', 'R', 'S'};
inline constexpr std::uint8_t kVersion = 1;

enum class ErrorCode { NotACheckpoint, VersionMismatch, Truncated, Malformed, Io };
std::string_view to_string(ErrorCode c);

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

std::string serialize(const train::Checkpoint& c);
train::Checkpoint deserialize(std::string_view bytes);

void save_checkpoint(const train::Checkpoint& c, const std::filesystem::path& path);
train::Checkpoint load_checkpoint(const std::filesystem::path& path);

/// The JSON header block on its own, e.g. for echoing a spec.
std::string spec_to_json(const nn::ModelSpec& spec, int indent = 2);

}  // namespace collabres::ckpt
