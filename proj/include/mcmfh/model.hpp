#pragma once

#include <span>

#include "mcmfh/config.hpp"
#include "mcmfh/hash_retrieval.hpp"
#include "mcmfh/moe_fusion.hpp"
#include "mcmfh/voting_mlp.hpp"

namespace mcmfh {

struct ModelForward {
  ad::Var x;         // voted feature (or z itself when voting is disabled)
  MoeOutput moe;
  ad::Var fused_image;  // z^v
  ad::Var fused_text;   // z^t
  ad::Var relaxed_image;
  ad::Var relaxed_text;
};

// Full pipeline: concat -> dropout voting -> MoE fusion -> split -> hash heads.
class McmfhModel {
 public:
  static McmfhModel create(const TrainConfig& cfg, EmbeddingDims dims, std::uint32_t code_bits);

  // z is (batch x dim_image+dim_text). vote_streams supplies one stream per row.
  // Head dropout is applied only when both head streams are given.
  ModelForward forward(const ad::Var& z, std::span<RngStream> vote_streams, RngStream* image_dropout = nullptr,
                       RngStream* text_dropout = nullptr) const;

  ParamList parameters() const;
  // Parameters updated at the fusion learning rate (MoE, plus the voting MLP when unfrozen).
  ParamList fusion_group() const;
  ParamList image_head_group() const;
  ParamList text_head_group() const;

  const VotingMlp& voting() const { return voting_; }
  const MoeFusion& moe() const { return moe_; }
  std::uint32_t code_bits() const { return code_bits_; }
  bool voting_enabled() const { return voting_enabled_; }

 private:
  VotingMlp voting_;
  bool voting_enabled_ = true;
  MoeFusion moe_;
  HashHead image_head_;
  HashHead text_head_;
  std::uint32_t code_bits_ = 16;
};

}  // namespace mcmfh
