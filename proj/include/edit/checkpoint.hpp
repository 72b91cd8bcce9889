#pragma once

#include <filesystem>
#include <stdexcept>

#include "edit/model.hpp"

namespace edit::model {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  DiTConfig config;
  Params params;
};

// Layout: "EDITCKPT", u64 little-endian header length, UTF-8 JSON header, then
// little-endian f32 arrays in header order. Offsets in the header are relative
// to the first byte after the header.
void save_checkpoint(const std::filesystem::path& path, const Params& params, const DiTConfig& cfg);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Rounds every parameter through f32, matching what a save/load cycle produces.
Params round_to_f32(const Params& params);

}  // namespace edit::model
