#include "mcmfh/hash_retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <memory>

#include "mcmfh/binary_io.hpp"
#include "mcmfh/errors.hpp"

namespace mcmfh {

bool valid_code_bits(std::uint32_t bits) { return bits == 16 || bits == 32 || bits == 64; }

void HashHeadConfig::validate() const {
  if (!valid_code_bits(code_bits)) throw ConfigError("code_bits must be 16, 32, or 64, got " + std::to_string(code_bits));
  if (input_dim == 0 || hidden_dim == 0) throw ConfigError("hash head dims must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("hash.dropout_p must be in [0, 1)");
}

HashHead HashHead::create(const HashHeadConfig& cfg, RngStream& rng) {
  cfg.validate();
  HashHead head;
  head.cfg_ = cfg;
  head.hidden_ = Linear::create(cfg.input_dim, cfg.hidden_dim, rng);
  head.code_ = Linear::create(cfg.hidden_dim, cfg.code_bits, rng);
  return head;
}

ad::Var HashHead::forward(const ad::Var& features, RngStream* dropout_rng) const {
  ad::Var h = ad::activation(hidden_(features), ad::Activation::ReLU);
  if (dropout_rng) h = ad::dropout(h, cfg_.dropout_p, *dropout_rng);
  return ad::activation(code_(h), ad::Activation::Tanh);
}

void HashHead::collect(ParamList& out, const std::string& prefix) const {
  hidden_.collect(out, prefix + ".hidden");
  code_.collect(out, prefix + ".code");
}

HashCode HashCode::zeros(std::uint32_t bits) { return HashCode{bits, std::vector<std::uint64_t>((bits + 63) / 64, 0)}; }

HashCode sign_quantize(std::span<const double> relaxed) {
  HashCode code = HashCode::zeros(static_cast<std::uint32_t>(relaxed.size()));
  for (std::uint32_t i = 0; i < code.bits; ++i)
    if (relaxed[i] >= 0.0) code.set(i);
  return code;
}

std::vector<HashCode> sign_quantize_rows(const Tensor& relaxed) {
  std::vector<HashCode> codes;
  codes.reserve(relaxed.rows());
  for (std::size_t r = 0; r < relaxed.rows(); ++r) codes.push_back(sign_quantize(relaxed.row(r)));
  return codes;
}

std::uint32_t hamming(const HashCode& a, const HashCode& b) {
  if (a.bits != b.bits || a.words.size() != b.words.size()) {
    throw ShapeError("hamming: code lengths differ (" + std::to_string(a.bits) + " vs " + std::to_string(b.bits) + ")");
  }
  std::uint32_t d = 0;
  for (std::size_t w = 0; w < a.words.size(); ++w) d += static_cast<std::uint32_t>(std::popcount(a.words[w] ^ b.words[w]));
  return d;
}

const char* to_string(Modality m) { return m == Modality::Image ? "image" : "text"; }
const char* to_string(Direction d) { return d == Direction::I2T ? "I2T" : "T2I"; }

RetrievalIndex RetrievalIndex::build(std::span<const HashCode> codes, std::span<const std::uint32_t> class_ids,
                                     Modality modality) {
  if (codes.size() != class_ids.size()) throw ShapeError("RetrievalIndex: codes and class ids differ in length");
  RetrievalIndex index;
  index.modality_ = modality;
  index.class_ids_.assign(class_ids.begin(), class_ids.end());
  if (codes.empty()) return index;
  index.bits_ = codes.front().bits;
  if (!valid_code_bits(index.bits_)) throw ConfigError("RetrievalIndex: unsupported code length " + std::to_string(index.bits_));
  const std::size_t stride = index.bits_ / 8;
  index.packed_.resize(codes.size() * stride);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i].bits != index.bits_) throw ShapeError("RetrievalIndex: mixed code lengths");
    const std::uint64_t w = codes[i].words[0];
    for (std::size_t b = 0; b < stride; ++b) index.packed_[i * stride + b] = static_cast<std::uint8_t>(w >> (8 * b));
  }
  return index;
}

HashCode RetrievalIndex::code(std::size_t i) const {
  HashCode c = HashCode::zeros(bits_);
  const std::size_t stride = bits_ / 8;
  for (std::size_t b = 0; b < stride; ++b) c.words[0] |= static_cast<std::uint64_t>(packed_[i * stride + b]) << (8 * b);
  return c;
}

namespace {

static_assert(std::endian::native == std::endian::little, "packed code layout assumes a little-endian host");

template <typename Word>
void packed_distances(const std::uint8_t* packed, std::size_t n, std::uint64_t query, std::uint32_t* out) {
  const Word q = static_cast<Word>(query);
  for (std::size_t i = 0; i < n; ++i) {
    Word w;
    std::memcpy(&w, packed + i * sizeof(Word), sizeof(Word));
    out[i] = static_cast<std::uint32_t>(std::popcount(static_cast<Word>(w ^ q)));
  }
}

}  // namespace

void RetrievalIndex::distances(const HashCode& query, std::vector<std::uint32_t>& out) const {
  if (query.bits != bits_) {
    throw ShapeError("retrieve: query has " + std::to_string(query.bits) + " bits, index has " + std::to_string(bits_));
  }
  out.resize(size());
  switch (bits_) {
    case 16: packed_distances<std::uint16_t>(packed_.data(), size(), query.words[0], out.data()); break;
    case 32: packed_distances<std::uint32_t>(packed_.data(), size(), query.words[0], out.data()); break;
    case 64: packed_distances<std::uint64_t>(packed_.data(), size(), query.words[0], out.data()); break;
    default: throw ConfigError("unsupported code length");
  }
}

std::vector<std::uint32_t> retrieve(const HashCode& query, const RetrievalIndex& index) {
  std::vector<std::uint32_t> dist;
  if (index.empty()) return {};
  index.distances(query, dist);
  // Counting sort over the bits+1 possible distances keeps index order within a bucket.
  std::vector<std::uint32_t> start(index.code_bits() + 2, 0);
  for (std::uint32_t d : dist) ++start[d + 1];
  for (std::size_t b = 1; b < start.size(); ++b) start[b] += start[b - 1];
  std::vector<std::uint32_t> ranking(dist.size());
  for (std::uint32_t i = 0; i < dist.size(); ++i) ranking[start[dist[i]]++] = i;
  return ranking;
}

double average_precision(std::span<const bool> relevant_in_rank_order, std::size_t top_k) {
  const std::size_t limit = top_k == 0 ? relevant_in_rank_order.size() : std::min(top_k, relevant_in_rank_order.size());
  double precision_sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < limit; ++r) {
    if (!relevant_in_rank_order[r]) continue;
    ++hits;
    precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return hits == 0 ? 0.0 : precision_sum / static_cast<double>(hits);
}

MapResult mean_average_precision(const QuerySet& queries, const RetrievalIndex& index, Direction direction,
                                 std::size_t top_k) {
  if (index.empty()) throw InputError("mean_average_precision: empty retrieval index");
  if (queries.codes.size() != queries.class_ids.size()) throw ShapeError("query codes and class ids differ in length");
  const Modality want_query = direction == Direction::I2T ? Modality::Image : Modality::Text;
  if (queries.modality != want_query || index.modality() == want_query) {
    throw InputError(std::string("mean_average_precision: ") + to_string(direction) + " needs " +
                     to_string(want_query) + " queries against a " +
                     to_string(want_query == Modality::Image ? Modality::Text : Modality::Image) + " index");
  }
  std::vector<std::size_t> class_count;
  for (std::uint32_t c : index.class_ids()) {
    if (c >= class_count.size()) class_count.resize(c + 1, 0);
    ++class_count[c];
  }
  MapResult result;
  double ap_sum = 0.0;
  std::unique_ptr<bool[]> relevant(new bool[index.size()]);
  for (std::size_t q = 0; q < queries.codes.size(); ++q) {
    const std::uint32_t cls = queries.class_ids[q];
    if (cls >= class_count.size() || class_count[cls] == 0) {
      ++result.excluded;
      continue;
    }
    const auto ranking = retrieve(queries.codes[q], index);
    for (std::size_t r = 0; r < ranking.size(); ++r) relevant[r] = index.class_id(ranking[r]) == cls;
    ap_sum += average_precision(std::span<const bool>(relevant.get(), ranking.size()), top_k);
    ++result.evaluated;
  }
  result.map = result.evaluated == 0 ? 0.0 : ap_sum / static_cast<double>(result.evaluated);
  return result;
}

void write_codes(const std::filesystem::path& path, std::span<const HashCode> codes,
                 std::span<const std::uint32_t> class_ids) {
  if (codes.size() != class_ids.size()) throw ShapeError("write_codes: codes and class ids differ in length");
  const std::uint32_t bits = codes.empty() ? 16 : codes.front().bits;
  bin::Writer w;
  w.bytes("MHC1");
  w.u32(bits);
  w.u64(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i].bits != bits) throw ShapeError("write_codes: mixed code lengths");
    for (std::uint64_t word : codes[i].words) w.u64(word);
    w.u32(class_ids[i]);
  }
  w.save(path);
}

CodeDump read_codes(const std::filesystem::path& path) {
  bin::Reader in(bin::read_file(path));
  if (!in.has(4) || in.bytes(4) != "MHC1") throw DataError(path.string() + ": not an MHC1 file (bad magic)");
  if (!in.has(12)) throw DataError(path.string() + ": truncated header");
  CodeDump dump;
  dump.code_bits = in.u32();
  const std::uint64_t count = in.u64();
  if (dump.code_bits == 0 || dump.code_bits > 4096) throw DataError(path.string() + ": implausible code length");
  const std::size_t words = (dump.code_bits + 63) / 64;
  const std::size_t record_bytes = words * 8 + 4;
  if (count > in.remaining() / record_bytes) throw DataError(path.string() + ": truncated code payload");
  for (std::uint64_t i = 0; i < count; ++i) {
    HashCode c = HashCode::zeros(dump.code_bits);
    for (auto& word : c.words) word = in.u64();
    dump.codes.push_back(std::move(c));
    dump.class_ids.push_back(in.u32());
  }
  if (in.remaining() != 0) throw DataError(path.string() + ": trailing bytes after code payload");
  return dump;
}

}  // namespace mcmfh
