#include "mcmfh/model.hpp"

#include "mcmfh/errors.hpp"

namespace mcmfh {

McmfhModel McmfhModel::create(const TrainConfig& cfg, EmbeddingDims dims, std::uint32_t code_bits) {
  if (dims.image != dims.text) {
    throw ConfigError("image and text embeddings must share a width to form two tokens (" +
                      std::to_string(dims.image) + " vs " + std::to_string(dims.text) + ")");
  }
  const std::size_t width = static_cast<std::size_t>(dims.image) + dims.text;
  McmfhModel m;
  m.code_bits_ = code_bits;

  VotingConfig vc = cfg.voting;
  vc.input_dim = width;
  vc.output_dim = width;
  vc.seed = cfg.voting_seed.value_or(cfg.seed);
  m.voting_ = VotingMlp::init_frozen(vc);
  m.voting_enabled_ = vc.enabled;

  MoEConfig mc = cfg.moe;
  mc.token_count = 2;
  mc.token_dim = dims.image;
  mc.seed = cfg.seed;
  m.moe_ = MoeFusion::create(mc);

  HashHeadConfig hc = cfg.hash;
  hc.input_dim = dims.image;
  hc.code_bits = code_bits;
  RngStream head_rng = RngStream(cfg.seed).split("hash.init").split(code_bits);
  RngStream image_rng = head_rng.split("image");
  RngStream text_rng = head_rng.split("text");
  m.image_head_ = HashHead::create(hc, image_rng);
  m.text_head_ = HashHead::create(hc, text_rng);
  return m;
}

ModelForward McmfhModel::forward(const ad::Var& z, std::span<RngStream> vote_streams, RngStream* image_dropout,
                                 RngStream* text_dropout) const {
  ModelForward out;
  out.x = voting_enabled_ ? voting_.forward_vote(z, vote_streams) : z;
  out.moe = moe_.forward(out.x);
  const std::size_t token = moe_.config().token_dim;
  out.fused_image = ad::slice_cols(out.moe.z, 0, token);
  out.fused_text = ad::slice_cols(out.moe.z, token, 2 * token);
  const bool train_mode = image_dropout && text_dropout;
  out.relaxed_image = image_head_.forward(out.fused_image, train_mode ? image_dropout : nullptr);
  out.relaxed_text = text_head_.forward(out.fused_text, train_mode ? text_dropout : nullptr);
  return out;
}

ParamList McmfhModel::parameters() const {
  ParamList out = voting_.parameters();
  for (auto& p : moe_.parameters()) out.push_back(p);
  image_head_.collect(out, "hash.image");
  text_head_.collect(out, "hash.text");
  return out;
}

ParamList McmfhModel::fusion_group() const {
  ParamList out = moe_.parameters();
  if (voting_enabled_ && !voting_.config().frozen)
    for (auto& p : voting_.parameters()) out.push_back(p);
  return out;
}

ParamList McmfhModel::image_head_group() const {
  ParamList out;
  image_head_.collect(out, "hash.image");
  return out;
}

ParamList McmfhModel::text_head_group() const {
  ParamList out;
  text_head_.collect(out, "hash.text");
  return out;
}

}  // namespace mcmfh
