#include "mcmfh/voting_mlp.hpp"

#include <algorithm>
#include <cmath>

#include "mcmfh/errors.hpp"

namespace mcmfh {

void VotingConfig::validate() const {
  if (votes < 1) throw ConfigError("voting.k must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("voting.dropout_p must be in [0, 1)");
  if (input_dim == 0 || hidden_dim == 0 || output_dim == 0) throw ConfigError("voting dims must be positive");
}

VotingMlp VotingMlp::init_frozen(const VotingConfig& cfg) {
  cfg.validate();
  RngStream rng = RngStream(cfg.seed).split("voting.init");
  VotingMlp mlp;
  mlp.cfg_ = cfg;
  const double bound1 = std::sqrt(6.0 / static_cast<double>(cfg.input_dim));
  const double bound2 = std::sqrt(6.0 / static_cast<double>(cfg.hidden_dim));
  mlp.w1_ = ad::Var(uniform_tensor({cfg.input_dim, cfg.hidden_dim}, bound1, rng), !cfg.frozen);
  mlp.w2_ = ad::Var(uniform_tensor({cfg.hidden_dim, cfg.output_dim}, bound2, rng), !cfg.frozen);
  return mlp;
}

ad::Var VotingMlp::forward_with_mask(const ad::Var& z, const Tensor& mask) const {
  const std::size_t batch = z.rows();
  const std::size_t votes = mask.rows() / batch;
  // Dropout follows W1, so W1 z is shared by every vote.
  ad::Var pre = ad::matmul(z, w1_);
  std::vector<ad::Var> passes;
  passes.reserve(votes);
  for (std::size_t k = 0; k < votes; ++k) {
    Tensor vote_mask({batch, cfg_.hidden_dim});
    std::copy_n(mask.row(k * batch).begin(), batch * cfg_.hidden_dim, vote_mask.data().begin());
    ad::Var hidden = ad::activation(ad::apply_mask(pre, vote_mask), ad::Activation::GELU);
    passes.push_back(ad::matmul(hidden, w2_));
  }
  return votes == 1 ? passes.front() : ad::mean_of(passes);
}

ad::Var VotingMlp::forward_vote(const ad::Var& z, std::span<RngStream> streams) const {
  if (z.cols() != cfg_.input_dim) {
    throw ShapeError("forward_vote: input " + shape_string(z.shape()) + " does not match input_dim " +
                     std::to_string(cfg_.input_dim));
  }
  const std::size_t batch = z.rows();
  if (streams.size() != batch) throw ShapeError("forward_vote: need one rng stream per row");
  Tensor mask({cfg_.votes * batch, cfg_.hidden_dim});
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t k = 0; k < cfg_.votes; ++k) ad::fill_dropout_rows(mask, k * batch + i, 1, cfg_.dropout_p, streams[i]);
  return forward_with_mask(z, mask);
}

ad::Var VotingMlp::forward_vote(const ad::Var& z, RngStream& rng) const {
  std::vector<RngStream> streams;
  streams.reserve(z.rows());
  // Each row consumes exactly votes * hidden_dim draws, in row order.
  for (std::size_t i = 0; i < z.rows(); ++i) {
    streams.push_back(rng);
    for (std::size_t n = 0; n < cfg_.votes * cfg_.hidden_dim; ++n) rng.next_u64();
  }
  return forward_vote(z, std::span<RngStream>(streams));
}

ad::Var VotingMlp::forward_deterministic(const ad::Var& z) const {
  return ad::matmul(ad::activation(ad::matmul(z, w1_), ad::Activation::GELU), w2_);
}

ParamList VotingMlp::parameters() const { return {{"voting.w1", w1_}, {"voting.w2", w2_}}; }

}  // namespace mcmfh
