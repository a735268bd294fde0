#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mcmfh/benchmark.hpp"
#include "mcmfh/config.hpp"
#include "mcmfh/errors.hpp"
#include "mcmfh/trainer.hpp"

namespace fs = std::filesystem;
using namespace mcmfh;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

struct ConfigArgs {
  std::string config_file;
  std::string data;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> shortcuts;
};

void add_config_options(CLI::App* app, ConfigArgs& args) {
  app->add_option("--config", args.config_file, "key=value configuration file");
  app->add_option("--data", args.data, "MEB1 embedding file (synthetic corpus when omitted)");
  app->add_option("--set", args.sets, "override a setting, key=value (repeatable)");
  const std::vector<std::pair<std::string, std::string>> flags{
      {"--bits", "bits"},          {"--experts", "moe.num_experts"}, {"--voting-k", "voting.k"},
      {"--frozen", "voting.frozen"}, {"--gating-loss", "loss.gating_mode"}, {"--seed", "seed"},
      {"--epochs", "epochs"},      {"--batch", "batch_size"}};
  for (const auto& [flag, key] : flags) {
    app->add_option_function<std::string>(
        flag, [&args, key = key](const std::string& v) { args.shortcuts.emplace_back(key, v); },
        "shortcut for --set " + key + "=...");
  }
}

TrainConfig build_config(const ConfigArgs& args) {
  TrainConfig cfg;
  if (!args.config_file.empty()) apply_config_file(cfg, args.config_file);
  if (!args.data.empty()) cfg.data_path = args.data;
  for (const auto& [k, v] : args.shortcuts) apply_setting(cfg, k, v);
  for (const auto& s : args.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

void print_epoch(std::uint32_t bits, const EpochStats& e) {
  std::fprintf(stderr, "[%u-bit] epoch %zu  loss %.6f  fusion %.6f  hash %.6f  max-util %.3f\n", bits, e.epoch,
               e.loss.total, e.loss.l_fusion, e.loss.l_hash, e.max_utilization_fraction());
}

void print_map(const MetricsReport& report) {
  for (const auto& run : report.runs) {
    const auto& e = run.evaluation;
    std::printf("%u bits: I2T %.4f  T2I %.4f  Mean %.4f", e.code_bits, e.i2t.map, e.t2i.map, e.mean);
    if (e.i2t.excluded + e.t2i.excluded > 0) std::printf("  (excluded queries: %zu)", e.i2t.excluded);
    std::printf("\n");
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Multi-expert cross-modal hashing: training, retrieval evaluation, and benchmarking"};
  app.require_subcommand(1);

  SyntheticSpec synth_spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "write a synthetic MEB1 corpus");
  synth->add_option("--out", synth_out, "output file")->required();
  synth->add_option("--classes", synth_spec.num_classes, "number of classes");
  synth->add_option("--per-class", synth_spec.samples_per_class, "records per class");
  synth->add_option("--dim", synth_spec.dim, "embedding width per modality");
  synth->add_option("--sigma", synth_spec.cluster_spread, "within-class noise");
  synth->add_option("--seed", synth_spec.seed, "generator seed");

  std::string split_data, split_out;
  std::uint64_t split_seed = 7;
  auto* split = app.add_subcommand("split", "write the query/retrieval/train partition as JSON");
  split->add_option("--data", split_data, "MEB1 embedding file")->required();
  split->add_option("--seed", split_seed, "split seed");
  split->add_option("--out", split_out, "output file (stdout when omitted)");

  ConfigArgs train_args;
  std::string train_out = "run";
  std::string train_label = "MCMFH";
  auto* train_cmd = app.add_subcommand("train", "train and evaluate at each configured code length");
  add_config_options(train_cmd, train_args);
  train_cmd->add_option("--out", train_out, "output directory");
  train_cmd->add_option("--label", train_label, "method name in table.csv");

  std::string eval_model, eval_data, eval_bits, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate saved model artifacts");
  eval_cmd->add_option("--model", eval_model, "directory holding manifest.json and model dumps")->required();
  eval_cmd->add_option("--data", eval_data, "MEB1 embedding file (manifest's data when omitted)");
  eval_cmd->add_option("--bits", eval_bits, "comma-separated code lengths (manifest's when omitted)");
  eval_cmd->add_option("--out", eval_out, "write metrics.json and table.csv here");

  BenchmarkOptions bench_opts;
  std::string bench_out;
  auto* bench = app.add_subcommand("bench", "time Hamming ranking against float inner-product ranking");
  bench->add_option("--sizes", bench_opts.corpus_sizes, "corpus sizes")->delimiter(',');
  bench->add_option("--bits", bench_opts.code_bits, "code lengths")->delimiter(',');
  bench->add_option("--reps", bench_opts.repetitions, "timed repetitions");
  bench->add_option("--queries", bench_opts.queries, "queries per repetition");
  bench->add_option("--threads", bench_opts.threads, "worker threads");
  bench->add_option("--seed", bench_opts.seed, "data seed");
  bench->add_option("--out", bench_out, "write bench.csv and bench.json here");

  ConfigArgs ablate_args;
  std::string ablate_matrix_spec = "all";
  std::string ablate_out = "ablation";
  auto* ablate_cmd = app.add_subcommand("ablate", "run the ablation matrix");
  add_config_options(ablate_cmd, ablate_args);
  ablate_cmd->add_option("--matrix", ablate_matrix_spec, "module, loss, all, or comma-separated variant keys");
  ablate_cmd->add_option("--out", ablate_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  if (*synth) {
    write_records(synth_out, generate_synthetic(synth_spec));
    std::printf("wrote %u records to %s\n", synth_spec.num_classes * synth_spec.samples_per_class, synth_out.c_str());
  } else if (*split) {
    const RecordSet data = read_records(split_data);
    const DatasetSplit s = split_dataset(data.records.size(), split_seed);
    const nlohmann::ordered_json j{
        {"seed", split_seed}, {"query", s.query}, {"retrieval", s.retrieval}, {"train", s.train}};
    if (split_out.empty()) {
      std::cout << j.dump(2) << '\n';
    } else {
      write_text(split_out, j.dump(2) + "\n");
    }
  } else if (*train_cmd) {
    const TrainConfig cfg = build_config(train_args);
    const RecordSet data = load_dataset(cfg);
    const fs::path out = train_out;
    const MetricsReport report = train(cfg, data, out / "model", print_epoch);
    write_text(out / "metrics.json", metrics_json(report));
    write_text(out / "table.csv", results_table_csv(report, train_label));
    write_text(out / "epochs.csv", epochs_csv(report));
    print_map(report);
  } else if (*eval_cmd) {
    TrainConfig cfg = read_manifest(eval_model);
    if (!eval_data.empty()) cfg.data_path = eval_data;
    const RecordSet data = load_dataset(cfg);
    std::optional<std::vector<std::uint32_t>> bits;
    if (!eval_bits.empty()) bits = parse_bits_list(eval_bits);
    const MetricsReport report = evaluate(eval_model, data, bits);
    if (!eval_out.empty()) {
      write_text(fs::path(eval_out) / "metrics.json", metrics_json(report));
      write_text(fs::path(eval_out) / "table.csv", results_table_csv(report, "MCMFH"));
    }
    print_map(report);
  } else if (*bench) {
    const BenchmarkReport report = benchmark(bench_opts);
    const std::string csv = benchmark_csv(report);
    if (!bench_out.empty()) {
      write_text(fs::path(bench_out) / "bench.csv", csv);
      write_text(fs::path(bench_out) / "bench.json", benchmark_json(report));
    }
    std::cout << csv;
  } else if (*ablate_cmd) {
    const TrainConfig cfg = build_config(ablate_args);
    const RecordSet data = load_dataset(cfg);
    const auto keys = ablation_matrix(ablate_matrix_spec);
    const AblationTable table = ablate(cfg, data, keys, print_epoch);
    const fs::path out = ablate_out;
    write_text(out / "table.csv", ablation_csv(table));
    write_text(out / "ablation.json", ablation_json(table));
    std::cout << ablation_csv(table);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
