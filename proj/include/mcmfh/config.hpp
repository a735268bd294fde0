#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mcmfh/embedding_io.hpp"
#include "mcmfh/hash_retrieval.hpp"
#include "mcmfh/moe_fusion.hpp"
#include "mcmfh/objectives.hpp"
#include "mcmfh/voting_mlp.hpp"

namespace mcmfh {

struct TrainConfig {
  std::size_t epochs = 150;
  std::size_t batch_size = 32;
  double lr_moe = 1e-4;
  double lr_hash = 1e-3;
  std::vector<std::uint32_t> code_bits{16};
  std::uint64_t seed = 7;

  // Empty data_path selects the synthetic corpus.
  std::string data_path;
  SyntheticSpec synthetic;

  VotingConfig voting;
  std::optional<std::uint64_t> voting_seed;  // defaults to `seed`
  MoEConfig moe;
  HashHeadConfig hash;
  ContrastiveConfig contrastive;
  ObjectiveWeights weights;
  GatingMode gating_mode = GatingMode::Hybrid;
  std::size_t eval_top_k = 0;

  void validate() const;
  // Weights actually applied for the configured gating mode.
  ObjectiveWeights effective_weights() const;
};

// Applies one `key=value` setting; throws ConfigError for unknown keys or bad values.
void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);

// Parses `key = value` lines; '#' starts a comment; blank lines are ignored.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);
void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path);

// Every setting as ordered key/value pairs; applying them reproduces cfg.
std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg);
std::string config_text(const TrainConfig& cfg);

std::vector<std::uint32_t> parse_bits_list(const std::string& text);
bool parse_bool(const std::string& key, const std::string& value);

}  // namespace mcmfh
