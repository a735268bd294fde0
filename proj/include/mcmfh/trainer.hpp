#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcmfh/config.hpp"
#include "mcmfh/model.hpp"

namespace mcmfh {

struct EpochStats {
  std::size_t epoch = 0;
  LossBreakdown loss;                       // means over the epoch's batches
  std::vector<std::uint64_t> utilization;   // samples routed to each expert
  std::size_t routed = 0;

  double max_utilization_fraction() const;
};

struct BitsEvaluation {
  std::uint32_t code_bits = 0;
  MapResult i2t;
  MapResult t2i;
  double mean = 0.0;
};

struct RunReport {
  std::uint32_t code_bits = 0;
  std::vector<EpochStats> epochs;
  BitsEvaluation evaluation;
  std::string voting_checksum_before;
  std::string voting_checksum_after;
  // Largest |logged total - recomposed weighted sum| over all steps.
  double max_recompose_error = 0.0;
  std::size_t steps = 0;
};

struct MetricsReport {
  std::vector<std::pair<std::string, std::string>> config;
  std::uint64_t seed = 0;
  std::size_t records = 0;
  std::size_t query_size = 0;
  std::size_t retrieval_size = 0;
  std::size_t train_size = 0;
  std::vector<RunReport> runs;
};

class TrainingDivergence : public DivergenceError {
 public:
  TrainingDivergence(std::size_t epoch, std::size_t batch, const std::string& term);
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

using EpochCallback = std::function<void(std::uint32_t code_bits, const EpochStats&)>;

// Reads cfg.data_path, or generates the synthetic corpus when it is empty.
RecordSet load_dataset(const TrainConfig& cfg);
DatasetSplit make_split(const TrainConfig& cfg, const RecordSet& data);

struct TrainedRun {
  McmfhModel model;
  RunReport report;
};

// One independent training run at a single code length, followed by evaluation.
TrainedRun train_run(const TrainConfig& cfg, const RecordSet& data, const DatasetSplit& split, std::uint32_t code_bits,
                     const EpochCallback& on_epoch = {});

// I2T and T2I mAP over the query/retrieval split.
BitsEvaluation evaluate_model(const McmfhModel& model, const TrainConfig& cfg, const RecordSet& data,
                              const DatasetSplit& split);

// Trains every configured code length; when model_dir is given, writes one
// parameter dump per code length plus manifest.json.
MetricsReport train(const TrainConfig& cfg, const RecordSet& data,
                    const std::optional<std::filesystem::path>& model_dir = std::nullopt,
                    const EpochCallback& on_epoch = {});

void save_model(const std::filesystem::path& dir, const McmfhModel& model, const TrainConfig& cfg);
TrainConfig read_manifest(const std::filesystem::path& dir);
McmfhModel load_model(const std::filesystem::path& dir, const TrainConfig& cfg, EmbeddingDims dims,
                      std::uint32_t code_bits);

// Evaluates saved artifacts; `code_bits` defaults to the manifest's list.
MetricsReport evaluate(const std::filesystem::path& model_dir, const RecordSet& data,
                       std::optional<std::vector<std::uint32_t>> code_bits = std::nullopt);

std::string metrics_json(const MetricsReport& report);
// One row per (code length, epoch): losses plus per-expert utilization.
std::string epochs_csv(const MetricsReport& report);
// Results-table rows (block, method, I2T/T2I/Mean per code length) for one configuration.
std::string results_table_csv(const MetricsReport& report, const std::string& label);

struct AblationVariant {
  std::string key;
  std::string block;  // "Module Abl." or "Loss Abl."
  std::string label;
  std::function<void(TrainConfig&)> apply;
};

const std::vector<AblationVariant>& ablation_variants();
// "module", "loss", or "all"; otherwise a comma-separated list of variant keys.
std::vector<std::string> ablation_matrix(const std::string& selection);

struct AblationRow {
  std::string key;
  std::string block;
  std::string label;
  MetricsReport metrics;
};

struct AblationTable {
  std::vector<std::uint32_t> code_bits;
  std::vector<AblationRow> rows;
};

// Runs each variant on the same data, split, and seeds. Unknown keys throw ConfigError.
AblationTable ablate(const TrainConfig& cfg, const RecordSet& data, std::span<const std::string> variant_keys,
                     const EpochCallback& on_epoch = {});
std::string ablation_csv(const AblationTable& table);
std::string ablation_json(const AblationTable& table);

}  // namespace mcmfh
