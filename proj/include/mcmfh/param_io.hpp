#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mcmfh/layers.hpp"

namespace mcmfh {

// Flat named-parameter dump, little-endian:
//   "MPD1" | u32 count | per parameter:
//     u32 name_len | name bytes | u32 rank | rank x u64 dims | numel x f64 values
void write_params(const std::filesystem::path& path, const ParamList& params);

struct LoadedParam {
  std::string name;
  Tensor value;
};
std::vector<LoadedParam> read_params(const std::filesystem::path& path);

// Copies loaded values into `params` by name; names and shapes must match exactly.
void load_params(const ParamList& params, const std::vector<LoadedParam>& loaded);

// FNV-1a over names, shapes and value bits, as 16 hex digits.
std::string param_checksum(const ParamList& params);

}  // namespace mcmfh
