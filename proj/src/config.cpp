#include "mcmfh/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace mcmfh {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* begin = value.data();
  const char* end = begin + value.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("invalid value '" + value + "' for " + key);
  return out;
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  throw ConfigError("invalid boolean '" + value + "' for " + key);
}

std::vector<std::uint32_t> parse_bits_list(const std::string& text) {
  std::vector<std::uint32_t> bits;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto b = parse_number<std::uint32_t>("bits", item);
    if (!valid_code_bits(b)) throw ConfigError("code length must be 16, 32, or 64, got " + item);
    bits.push_back(b);
  }
  if (bits.empty()) throw ConfigError("empty code length list");
  return bits;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr_moe > 0.0) || !(lr_hash > 0.0)) throw ConfigError("learning rates must be positive");
  if (code_bits.empty()) throw ConfigError("at least one code length is required");
  for (auto b : code_bits)
    if (!valid_code_bits(b)) throw ConfigError("code length must be 16, 32, or 64");
  if (!(contrastive.temperature > 0.0)) throw ConfigError("loss.temperature must be positive");
  if (!(weights.fusion >= 0.0 && weights.switch_term >= 0.0 && weights.variance_term >= 0.0 && weights.hash >= 0.0)) {
    throw ConfigError("loss weights must be non-negative");
  }
  voting.validate();
  moe.validate();
  if (!(hash.dropout_p >= 0.0 && hash.dropout_p < 1.0)) throw ConfigError("hash.dropout_p must be in [0, 1)");
  if (hash.hidden_dim == 0) throw ConfigError("hash.hidden_dim must be positive");
}

ObjectiveWeights TrainConfig::effective_weights() const { return weights.for_mode(gating_mode); }

void apply_setting(TrainConfig& cfg, const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string value = trim(raw_value);
  auto u64 = [&] { return parse_number<std::uint64_t>(key, value); };
  auto size = [&] { return static_cast<std::size_t>(parse_number<std::uint64_t>(key, value)); };
  auto real = [&] { return parse_number<double>(key, value); };
  auto flag = [&] { return parse_bool(key, value); };

  if (key == "epochs") cfg.epochs = size();
  else if (key == "batch_size") cfg.batch_size = size();
  else if (key == "lr_moe") cfg.lr_moe = real();
  else if (key == "lr_hash") cfg.lr_hash = real();
  else if (key == "bits" || key == "code_bits") cfg.code_bits = parse_bits_list(value);
  else if (key == "seed") cfg.seed = u64();
  else if (key == "data.path") cfg.data_path = value;
  else if (key == "synthetic.classes") cfg.synthetic.num_classes = static_cast<std::uint32_t>(u64());
  else if (key == "synthetic.per_class") cfg.synthetic.samples_per_class = static_cast<std::uint32_t>(u64());
  else if (key == "synthetic.dim") cfg.synthetic.dim = static_cast<std::uint32_t>(u64());
  else if (key == "synthetic.sigma") cfg.synthetic.cluster_spread = real();
  else if (key == "synthetic.seed") cfg.synthetic.seed = u64();
  else if (key == "voting.enabled") cfg.voting.enabled = flag();
  else if (key == "voting.k") cfg.voting.votes = size();
  else if (key == "voting.dropout_p") cfg.voting.dropout_p = real();
  else if (key == "voting.frozen") cfg.voting.frozen = flag();
  else if (key == "voting.hidden_dim") cfg.voting.hidden_dim = size();
  else if (key == "voting.seed") cfg.voting_seed = u64();
  else if (key == "moe.enabled") cfg.moe.enabled = flag();
  else if (key == "moe.num_experts") cfg.moe.num_experts = size();
  else if (key == "moe.layers_per_expert") cfg.moe.layers_per_expert = size();
  else if (key == "moe.heads") cfg.moe.heads = size();
  else if (key == "moe.ffn_hidden") cfg.moe.ffn_hidden = size();
  else if (key == "moe.switch_lambda") cfg.moe.switch_lambda = real();
  // The hybrid gating weights and the objective's gating coefficients are one setting.
  else if (key == "moe.w_switch" || key == "loss.w_switch") cfg.moe.w_switch = cfg.weights.switch_term = real();
  else if (key == "moe.w_var" || key == "loss.w_var") cfg.moe.w_var = cfg.weights.variance_term = real();
  else if (key == "loss.temperature") cfg.contrastive.temperature = real();
  else if (key == "loss.w_fusion") cfg.weights.fusion = real();
  else if (key == "loss.w_hash") cfg.weights.hash = real();
  else if (key == "loss.gating_mode") cfg.gating_mode = parse_gating_mode(value);
  else if (key == "hash.hidden_dim") cfg.hash.hidden_dim = size();
  else if (key == "hash.dropout_p") cfg.hash.dropout_p = real();
  else if (key == "eval.top_k") cfg.eval_top_k = size();
  else throw ConfigError("unknown configuration key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + " is not key=value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  for (const auto& [k, v] : parse_key_values(buf.str())) apply_setting(cfg, k, v);
}

std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg) {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  std::string bits;
  for (std::size_t i = 0; i < cfg.code_bits.size(); ++i) bits += (i ? "," : "") + std::to_string(cfg.code_bits[i]);
  std::vector<std::pair<std::string, std::string>> out = {
      {"epochs", std::to_string(cfg.epochs)},
      {"batch_size", std::to_string(cfg.batch_size)},
      {"lr_moe", format_double(cfg.lr_moe)},
      {"lr_hash", format_double(cfg.lr_hash)},
      {"bits", bits},
      {"seed", std::to_string(cfg.seed)},
      {"data.path", cfg.data_path},
      {"synthetic.classes", std::to_string(cfg.synthetic.num_classes)},
      {"synthetic.per_class", std::to_string(cfg.synthetic.samples_per_class)},
      {"synthetic.dim", std::to_string(cfg.synthetic.dim)},
      {"synthetic.sigma", format_double(cfg.synthetic.cluster_spread)},
      {"synthetic.seed", std::to_string(cfg.synthetic.seed)},
      {"voting.enabled", b(cfg.voting.enabled)},
      {"voting.k", std::to_string(cfg.voting.votes)},
      {"voting.dropout_p", format_double(cfg.voting.dropout_p)},
      {"voting.frozen", b(cfg.voting.frozen)},
      {"voting.hidden_dim", std::to_string(cfg.voting.hidden_dim)},
      {"voting.seed", std::to_string(cfg.voting_seed.value_or(cfg.seed))},
      {"moe.enabled", b(cfg.moe.enabled)},
      {"moe.num_experts", std::to_string(cfg.moe.num_experts)},
      {"moe.layers_per_expert", std::to_string(cfg.moe.layers_per_expert)},
      {"moe.heads", std::to_string(cfg.moe.heads)},
      {"moe.ffn_hidden", std::to_string(cfg.moe.ffn_hidden)},
      {"moe.switch_lambda", format_double(cfg.moe.switch_lambda)},
      {"moe.w_switch", format_double(cfg.moe.w_switch)},
      {"moe.w_var", format_double(cfg.moe.w_var)},
      {"loss.temperature", format_double(cfg.contrastive.temperature)},
      {"loss.w_fusion", format_double(cfg.weights.fusion)},
      {"loss.w_hash", format_double(cfg.weights.hash)},
      {"loss.gating_mode", to_string(cfg.gating_mode)},
      {"hash.hidden_dim", std::to_string(cfg.hash.hidden_dim)},
      {"hash.dropout_p", format_double(cfg.hash.dropout_p)},
      {"eval.top_k", std::to_string(cfg.eval_top_k)},
  };
  return out;
}

std::string config_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : config_entries(cfg)) out += k + " = " + v + "\n";
  return out;
}

}  // namespace mcmfh
