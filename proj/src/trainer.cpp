#include "mcmfh/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mcmfh/adam.hpp"
#include "mcmfh/param_io.hpp"

namespace mcmfh {

namespace {

using Json = nlohmann::ordered_json;

constexpr std::size_t kEvalBatch = 256;

Tensor batch_inputs(const RecordSet& data, std::span<const std::size_t> indices) {
  const EmbeddingDims dims{data.dim_image, data.dim_text};
  const std::size_t width = static_cast<std::size_t>(dims.image) + dims.text;
  Tensor z({indices.size(), width});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Tensor row = concat_embedding(data.records[indices[r]], dims);
    std::copy(row.data().begin(), row.data().end(), z.row(r).begin());
  }
  return z;
}

std::uint64_t voting_seed(const TrainConfig& cfg) { return cfg.voting_seed.value_or(cfg.seed); }

std::string model_file(std::uint32_t bits) { return "model_" + std::to_string(bits) + ".mpd"; }

Json map_json(const MapResult& m) {
  return Json{{"map", m.map}, {"evaluated_queries", m.evaluated}, {"excluded_queries", m.excluded}};
}

Json evaluation_json(const BitsEvaluation& e) {
  return Json{{"code_bits", e.code_bits}, {"i2t", map_json(e.i2t)}, {"t2i", map_json(e.t2i)}, {"mean", e.mean}};
}

Json loss_json(const LossBreakdown& l) {
  return Json{{"l_fusion", l.l_fusion}, {"l_switch", l.l_switch}, {"l_var", l.l_var}, {"l_hash", l.l_hash},
              {"total", l.total}};
}

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

double EpochStats::max_utilization_fraction() const {
  if (routed == 0 || utilization.empty()) return 0.0;
  return static_cast<double>(*std::max_element(utilization.begin(), utilization.end())) / static_cast<double>(routed);
}

TrainingDivergence::TrainingDivergence(std::size_t epoch, std::size_t batch, const std::string& term)
    : DivergenceError(term, "training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                                ": non-finite " + term),
      epoch_(epoch),
      batch_(batch) {}

RecordSet load_dataset(const TrainConfig& cfg) {
  if (cfg.data_path.empty()) return generate_synthetic(cfg.synthetic);
  return read_records(cfg.data_path);
}

DatasetSplit make_split(const TrainConfig& cfg, const RecordSet& data) {
  return split_dataset(data.records.size(), cfg.seed);
}

TrainedRun train_run(const TrainConfig& cfg, const RecordSet& data, const DatasetSplit& split, std::uint32_t code_bits,
                     const EpochCallback& on_epoch) {
  cfg.validate();
  TrainedRun run{McmfhModel::create(cfg, {data.dim_image, data.dim_text}, code_bits), {}};
  McmfhModel& model = run.model;
  RunReport& report = run.report;
  report.code_bits = code_bits;
  report.voting_checksum_before = param_checksum(model.voting().parameters());

  AdamGroup fusion(model.fusion_group(), cfg.lr_moe);
  AdamGroup image_head(model.image_head_group(), cfg.lr_hash);
  AdamGroup text_head(model.text_head_group(), cfg.lr_hash);
  const ObjectiveWeights weights = cfg.effective_weights();
  const double tau = cfg.contrastive.temperature;
  const std::size_t experts = model.moe().config().active_experts();

  const RngStream data_rng = RngStream(cfg.seed).split("data").split(code_bits);
  const RngStream vote_root = RngStream(voting_seed(cfg)).split("votes").split("train").split(code_bits);
  const RngStream head_root = RngStream(cfg.seed).split("hash.dropout").split(code_bits);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = split.train;
    RngStream shuffle = data_rng.split("shuffle").split(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.utilization.assign(experts, 0);
    LossBreakdown sums;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batches, ++step) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      ad::Var z(batch_inputs(data, idx));
      std::vector<RngStream> streams;
      streams.reserve(idx.size());
      const RngStream step_votes = vote_root.split(step);
      for (std::size_t r : idx) streams.push_back(step_votes.split(r));
      RngStream image_drop = head_root.split(step).split("image");
      RngStream text_drop = head_root.split(step).split("text");

      auto guarded = [&](const char* term, auto&& compute) {
        try {
          return compute();
        } catch (const NumericError&) {
          throw TrainingDivergence(epoch + 1, batches, term);
        } catch (const InputError&) {
          throw TrainingDivergence(epoch + 1, batches, term);
        }
      };
      ModelForward f = guarded("forward", [&] { return model.forward(z, streams, &image_drop, &text_drop); });
      ad::Var l_fusion = guarded("l_fusion", [&] { return contrastive_loss(f.fused_image, f.fused_text, tau); });
      ad::Var l_hash = guarded("l_hash", [&] { return contrastive_loss(f.relaxed_image, f.relaxed_text, tau); });
      ad::Var l_switch = switch_loss(f.moe.mean_probs, f.moe.stats.traffic, model.moe().config().switch_lambda);
      ad::Var l_var = guarded("l_var", [&] { return variance_loss(f.moe.mean_probs); });
      ad::Var total = total_objective(l_fusion, l_switch, l_var, l_hash, weights);

      LossBreakdown parts{l_fusion.item(), l_switch.item(), l_var.item(), l_hash.item(), 0.0};
      try {
        total_objective(parts, weights);
      } catch (const DivergenceError& e) {
        throw TrainingDivergence(epoch + 1, batches, e.term());
      }
      if (!std::isfinite(total.item())) throw TrainingDivergence(epoch + 1, batches, "total");
      report.max_recompose_error = std::max(report.max_recompose_error, std::abs(parts.total - total.item()));

      ad::backward(total);
      fusion.step();
      image_head.step();
      text_head.step();
      fusion.zero_grad();
      image_head.zero_grad();
      text_head.zero_grad();

      sums.l_fusion += parts.l_fusion;
      sums.l_switch += parts.l_switch;
      sums.l_var += parts.l_var;
      sums.l_hash += parts.l_hash;
      sums.total += total.item();
      for (std::size_t e : f.moe.stats.routed) ++stats.utilization[e];
      stats.routed += idx.size();
    }
    if (batches > 0) {
      const double inv = 1.0 / static_cast<double>(batches);
      stats.loss = {sums.l_fusion * inv, sums.l_switch * inv, sums.l_var * inv, sums.l_hash * inv, sums.total * inv};
    }
    if (on_epoch) on_epoch(code_bits, stats);
    report.epochs.push_back(std::move(stats));
  }
  report.steps = step;
  report.voting_checksum_after = param_checksum(model.voting().parameters());
  report.evaluation = evaluate_model(model, cfg, data, split);
  return run;
}

BitsEvaluation evaluate_model(const McmfhModel& model, const TrainConfig& cfg, const RecordSet& data,
                              const DatasetSplit& split) {
  ad::NoGradGuard no_grad;
  const RngStream vote_root = RngStream(voting_seed(cfg)).split("votes").split("eval");
  auto encode = [&](const std::vector<std::size_t>& indices, std::vector<HashCode>& image_codes,
                    std::vector<HashCode>& text_codes, std::vector<std::uint32_t>& classes) {
    for (std::size_t start = 0; start < indices.size(); start += kEvalBatch) {
      const std::span<const std::size_t> idx(indices.data() + start, std::min(kEvalBatch, indices.size() - start));
      ad::Var z(batch_inputs(data, idx));
      std::vector<RngStream> streams;
      for (std::size_t r : idx) streams.push_back(vote_root.split(r));
      ModelForward f = model.forward(z, streams);
      for (auto& c : sign_quantize_rows(f.relaxed_image.value())) image_codes.push_back(std::move(c));
      for (auto& c : sign_quantize_rows(f.relaxed_text.value())) text_codes.push_back(std::move(c));
      for (std::size_t r : idx) classes.push_back(data.records[r].class_id);
    }
  };
  QuerySet image_queries{{}, {}, Modality::Image};
  QuerySet text_queries{{}, {}, Modality::Text};
  std::vector<std::uint32_t> query_classes;
  encode(split.query, image_queries.codes, text_queries.codes, query_classes);
  image_queries.class_ids = query_classes;
  text_queries.class_ids = query_classes;

  std::vector<HashCode> db_image, db_text;
  std::vector<std::uint32_t> db_classes;
  encode(split.retrieval, db_image, db_text, db_classes);
  const RetrievalIndex text_index = RetrievalIndex::build(db_text, db_classes, Modality::Text);
  const RetrievalIndex image_index = RetrievalIndex::build(db_image, db_classes, Modality::Image);

  BitsEvaluation e;
  e.code_bits = model.code_bits();
  e.i2t = mean_average_precision(image_queries, text_index, Direction::I2T, cfg.eval_top_k);
  e.t2i = mean_average_precision(text_queries, image_index, Direction::T2I, cfg.eval_top_k);
  e.mean = (e.i2t.map + e.t2i.map) / 2.0;
  return e;
}

namespace {

MetricsReport report_header(const TrainConfig& cfg, const RecordSet& data, const DatasetSplit& split) {
  MetricsReport report;
  report.config = config_entries(cfg);
  report.seed = cfg.seed;
  report.records = data.records.size();
  report.query_size = split.query.size();
  report.retrieval_size = split.retrieval.size();
  report.train_size = split.train.size();
  return report;
}

}  // namespace

MetricsReport train(const TrainConfig& cfg, const RecordSet& data, const std::optional<std::filesystem::path>& model_dir,
                    const EpochCallback& on_epoch) {
  cfg.validate();
  const DatasetSplit split = make_split(cfg, data);
  MetricsReport report = report_header(cfg, data, split);
  if (model_dir) std::filesystem::create_directories(*model_dir);
  for (std::uint32_t bits : cfg.code_bits) {
    TrainedRun run = train_run(cfg, data, split, bits, on_epoch);
    if (model_dir) save_model(*model_dir, run.model, cfg);
    report.runs.push_back(std::move(run.report));
  }
  return report;
}

void save_model(const std::filesystem::path& dir, const McmfhModel& model, const TrainConfig& cfg) {
  std::filesystem::create_directories(dir);
  write_params(dir / model_file(model.code_bits()), model.parameters());
  Json manifest;
  Json entries = Json::object();
  for (const auto& [k, v] : config_entries(cfg)) entries[k] = v;
  manifest["config"] = entries;
  manifest["seed"] = cfg.seed;
  manifest["code_bits"] = cfg.code_bits;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

TrainConfig read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("missing model manifest in " + dir.string());
  Json manifest;
  try {
    manifest = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt model manifest: " + std::string(e.what()));
  }
  TrainConfig cfg;
  for (const auto& [k, v] : manifest.at("config").items()) apply_setting(cfg, k, v.get<std::string>());
  return cfg;
}

McmfhModel load_model(const std::filesystem::path& dir, const TrainConfig& cfg, EmbeddingDims dims,
                      std::uint32_t code_bits) {
  const auto path = dir / model_file(code_bits);
  if (!std::filesystem::exists(path)) {
    throw DataError("missing model artifact for " + std::to_string(code_bits) + "-bit codes: " + path.string());
  }
  McmfhModel model = McmfhModel::create(cfg, dims, code_bits);
  load_params(model.parameters(), read_params(path));
  return model;
}

MetricsReport evaluate(const std::filesystem::path& model_dir, const RecordSet& data,
                       std::optional<std::vector<std::uint32_t>> code_bits) {
  TrainConfig cfg = read_manifest(model_dir);
  const std::vector<std::uint32_t> bits = code_bits.value_or(cfg.code_bits);
  const DatasetSplit split = make_split(cfg, data);
  MetricsReport report = report_header(cfg, data, split);
  for (std::uint32_t b : bits) {
    const McmfhModel model = load_model(model_dir, cfg, {data.dim_image, data.dim_text}, b);
    RunReport run;
    run.code_bits = b;
    run.voting_checksum_before = run.voting_checksum_after = param_checksum(model.voting().parameters());
    run.evaluation = evaluate_model(model, cfg, data, split);
    report.runs.push_back(std::move(run));
  }
  return report;
}

std::string metrics_json(const MetricsReport& report) {
  Json config = Json::object();
  for (const auto& [k, v] : report.config) config[k] = v;
  Json runs = Json::array();
  for (const auto& run : report.runs) {
    Json epochs = Json::array();
    for (const auto& e : run.epochs) {
      epochs.push_back(Json{{"epoch", e.epoch}, {"loss", loss_json(e.loss)}, {"utilization", e.utilization},
                            {"routed", e.routed}});
    }
    runs.push_back(Json{{"code_bits", run.code_bits},
                        {"steps", run.steps},
                        {"epochs", epochs},
                        {"evaluation", evaluation_json(run.evaluation)},
                        {"voting_checksum_before", run.voting_checksum_before},
                        {"voting_checksum_after", run.voting_checksum_after},
                        {"max_recompose_error", run.max_recompose_error}});
  }
  Json summary = Json::array();
  for (const auto& run : report.runs) summary.push_back(evaluation_json(run.evaluation));
  Json root{{"seed", report.seed},
            {"config", config},
            {"data", Json{{"records", report.records},
                          {"query", report.query_size},
                          {"retrieval", report.retrieval_size},
                          {"train", report.train_size}}},
            {"map", summary},
            {"runs", runs}};
  return root.dump(2) + "\n";
}

std::string epochs_csv(const MetricsReport& report) {
  std::ostringstream out;
  out.precision(17);
  std::size_t experts = 0;
  for (const auto& run : report.runs)
    for (const auto& e : run.epochs) experts = std::max(experts, e.utilization.size());
  out << "code_bits,epoch,l_fusion,l_switch,l_var,l_hash,total,routed";
  for (std::size_t i = 0; i < experts; ++i) out << ",expert" << i;
  out << '\n';
  for (const auto& run : report.runs) {
    for (const auto& e : run.epochs) {
      out << run.code_bits << ',' << e.epoch << ',' << e.loss.l_fusion << ',' << e.loss.l_switch << ','
          << e.loss.l_var << ',' << e.loss.l_hash << ',' << e.loss.total << ',' << e.routed;
      for (std::size_t i = 0; i < experts; ++i) out << ',' << (i < e.utilization.size() ? e.utilization[i] : 0);
      out << '\n';
    }
  }
  return out.str();
}

namespace {

std::string table_header(std::span<const std::uint32_t> bits) {
  std::string h = "block,method";
  for (auto b : bits) {
    const std::string s = std::to_string(b);
    h += ",I2T-" + s + ",T2I-" + s + ",Mean-" + s;
  }
  return h + "\n";
}

std::string table_row(const std::string& block, const std::string& label, const MetricsReport& m,
                      std::span<const std::uint32_t> bits) {
  std::string row = block + "," + label;
  for (auto b : bits) {
    auto it = std::find_if(m.runs.begin(), m.runs.end(), [b](const RunReport& r) { return r.code_bits == b; });
    if (it == m.runs.end()) {
      row += ",,,";
      continue;
    }
    row += "," + fixed(it->evaluation.i2t.map) + "," + fixed(it->evaluation.t2i.map) + "," + fixed(it->evaluation.mean);
  }
  return row + "\n";
}

std::vector<std::uint32_t> report_bits(const MetricsReport& m) {
  std::vector<std::uint32_t> bits;
  for (const auto& r : m.runs) bits.push_back(r.code_bits);
  return bits;
}

}  // namespace

std::string results_table_csv(const MetricsReport& report, const std::string& label) {
  const auto bits = report_bits(report);
  return table_header(bits) + table_row("Main", label, report, bits);
}

const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> variants = [] {
    auto full = [](TrainConfig& c) {
      c.moe.enabled = true;
      c.voting.enabled = true;
      c.voting.votes = 5;
      c.voting.frozen = true;
      c.gating_mode = GatingMode::Hybrid;
    };
    std::vector<AblationVariant> v;
    v.push_back({"base", "Module Abl.", "Base(UCMFH)", [=](TrainConfig& c) {
                   full(c);
                   c.moe.enabled = false;
                   c.voting.enabled = false;
                   c.gating_mode = GatingMode::None;
                 }});
    v.push_back({"moe", "Module Abl.", "+MoE", [=](TrainConfig& c) {
                   full(c);
                   c.voting.enabled = false;
                 }});
    v.push_back({"moe_voting1_frozen", "Module Abl.", "+MoE+Voting1+Frozen", [=](TrainConfig& c) {
                   full(c);
                   c.voting.votes = 1;
                 }});
    v.push_back({"moe_voting5_unfrozen", "Module Abl.", "+MoE+Voting5+Unfrozen", [=](TrainConfig& c) {
                   full(c);
                   c.voting.frozen = false;
                 }});
    v.push_back({"moe_voting5_frozen", "Module Abl.", "+MoE+Voting5+Frozen(Ours)", full});
    v.push_back({"loss_switch", "Loss Abl.", "MCMFH w/Switch", [=](TrainConfig& c) {
                   full(c);
                   c.gating_mode = GatingMode::Switch;
                 }});
    v.push_back({"loss_variance", "Loss Abl.", "MCMFH w/Variance-based", [=](TrainConfig& c) {
                   full(c);
                   c.gating_mode = GatingMode::Variance;
                 }});
    v.push_back({"loss_hybrid", "Loss Abl.", "MCMFH w/Hybrid", full});
    v.push_back({"loss_none", "Loss Abl.", "MCMFH w/o gating loss", [=](TrainConfig& c) {
                   full(c);
                   c.gating_mode = GatingMode::None;
                 }});
    return v;
  }();
  return variants;
}

std::vector<std::string> ablation_matrix(const std::string& selection) {
  if (selection == "module") return {"base", "moe", "moe_voting1_frozen", "moe_voting5_unfrozen", "moe_voting5_frozen"};
  if (selection == "loss") return {"loss_switch", "loss_variance", "loss_hybrid"};
  if (selection == "all") {
    auto m = ablation_matrix("module");
    for (auto& k : ablation_matrix("loss")) m.push_back(k);
    return m;
  }
  std::vector<std::string> keys;
  std::stringstream ss(selection);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) keys.push_back(item);
  return keys;
}

AblationTable ablate(const TrainConfig& cfg, const RecordSet& data, std::span<const std::string> variant_keys,
                     const EpochCallback& on_epoch) {
  const auto& registry = ablation_variants();
  std::vector<const AblationVariant*> chosen;
  for (const auto& key : variant_keys) {
    auto it = std::find_if(registry.begin(), registry.end(), [&](const AblationVariant& v) { return v.key == key; });
    if (it == registry.end()) throw ConfigError("unknown ablation variant '" + key + "'");
    chosen.push_back(&*it);
  }
  AblationTable table;
  table.code_bits = cfg.code_bits;
  for (const auto* v : chosen) {
    TrainConfig variant_cfg = cfg;
    v->apply(variant_cfg);
    table.rows.push_back({v->key, v->block, v->label, train(variant_cfg, data, std::nullopt, on_epoch)});
  }
  return table;
}

std::string ablation_csv(const AblationTable& table) {
  std::string out = table_header(table.code_bits);
  for (const auto& row : table.rows) out += table_row(row.block, row.label, row.metrics, table.code_bits);
  return out;
}

std::string ablation_json(const AblationTable& table) {
  Json rows = Json::array();
  for (const auto& row : table.rows) {
    Json runs = Json::array();
    for (const auto& run : row.metrics.runs) {
      Json histograms = Json::array();
      for (const auto& e : run.epochs) histograms.push_back(e.utilization);
      runs.push_back(Json{{"evaluation", evaluation_json(run.evaluation)}, {"utilization_per_epoch", histograms}});
    }
    rows.push_back(Json{{"key", row.key}, {"block", row.block}, {"method", row.label}, {"runs", runs}});
  }
  return Json{{"code_bits", table.code_bits}, {"rows", rows}}.dump(2) + "\n";
}

}  // namespace mcmfh
