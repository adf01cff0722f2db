#pragma once

// Experiment grid: config loading, the (suite x encoder x seed x batch size x
// method) runner, JSONL persistence and delta reports.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "neuroadapt/finetune.hpp"
#include "neuroadapt/metrics.hpp"
#include "neuroadapt/model.hpp"
#include "neuroadapt/shiftbench.hpp"
#include "neuroadapt/tta.hpp"

namespace neuroadapt {

inline constexpr const char* kVersion = "0.1.0";

// Either a synthetic suite (generated per seed) or a pair of dataset
// manifests on disk.
struct SuiteEntry {
  std::string name;
  std::optional<SuiteSpec> spec;
  std::filesystem::path source;  // manifest with train + val records
  std::filesystem::path target;  // manifest with test records
};

// Encoder settings without the input shape, which comes from the suite.
struct EncoderEntry {
  std::string name = "identity";
  EncoderKind kind = EncoderKind::identity;
  std::size_t out_dim = 0;
  std::size_t hidden = 0;
  std::size_t patch = 0;
  std::uint64_t seed = 0;

  EncoderSpec resolve(std::size_t channels, std::size_t samples) const;
};

// One adaptation variant; `label` is its coordinate in the grid.
struct MethodEntry {
  std::string label;
  AdapterConfig adapter;
};

enum class ReportMode { pooled, per_batch_size };

const char* to_string(ReportMode m);

struct ExperimentPlan {
  std::string name = "experiment";
  std::filesystem::path output_dir = "runs";
  std::uint64_t plan_seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<std::size_t> batch_sizes{64, 128, 256};
  std::vector<SuiteEntry> suites;
  std::vector<EncoderEntry> encoders{EncoderEntry{}};
  FinetuneConfig finetune;  // seed and num_classes are filled per cell
  std::vector<MethodEntry> methods;  // no_tta first, always present
  ReportMode report_mode = ReportMode::pooled;

  // Records the grid produces: suites x encoders x seeds x batch sizes x methods.
  std::size_t cardinality() const;
  void validate() const;
};

ExperimentPlan plan_from_json(const nlohmann::json& j);
nlohmann::json plan_to_json(const ExperimentPlan& plan);
ExperimentPlan load_config(const std::filesystem::path& path);

// ---------------------------------------------------------------- records

struct RunRecord {
  std::string suite;
  std::string encoder;
  std::uint64_t seed = 0;
  std::size_t batch_size = 0;
  std::string method;  // label
  Method method_kind = Method::no_tta;

  bool ok = true;
  std::string error_kind;
  std::string error_message;
  std::optional<std::size_t> error_batch;

  std::optional<MetricReport> metrics;
  std::vector<double> pred_marginal;  // share of hard predictions per class
  std::size_t n_target = 0;

  std::uint64_t run_seed = 0;
  std::string checkpoint_hash;
  std::string partition_hash;
  std::string encoder_hash_before, encoder_hash_after;
  std::string classifier_hash_before, classifier_hash_after;
  std::string non_norm_hash_before, non_norm_hash_after;

  double wall_time_s = 0;
  std::string version = kVersion;
  nlohmann::json config;

  std::string key() const;
  std::string cell_key() const;  // key without the method
};

nlohmann::json record_to_json(const RunRecord& r);
RunRecord record_from_json(const nlohmann::json& j);
nlohmann::json metrics_to_json(const MetricReport& m);
MetricReport metrics_from_json(const nlohmann::json& j);

// Drops a trailing partial line (from an interrupted append) before parsing.
std::vector<RunRecord> read_records(const std::filesystem::path& path, bool repair = false);

// ---------------------------------------------------------------- runner

struct RunOptions {
  std::filesystem::path runs_path;  // default: <output_dir>/runs.jsonl
  bool resume = false;
  std::size_t threads = 0;  // 0 = NEUROADAPT_THREADS or hardware concurrency
  bool traces = false;      // per-batch diagnostics under <output_dir>/traces
  std::ostream* log = nullptr;
};

struct RunSummary {
  std::size_t written = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
  std::size_t cells_computed = 0;  // (suite, encoder, seed) cells that ran fine-tuning
  std::filesystem::path runs_path;
};

// <output_dir>/traces/<suite>__<encoder>__seed-<n>__bs-<b>__<method>.jsonl
std::filesystem::path trace_path(const ExperimentPlan& plan, const RunRecord& r);

RunSummary run_experiment(const ExperimentPlan& plan, const RunOptions& options = {});

// Stage 1 only: one checkpoint per (suite, encoder, seed) under
// <output_dir>/checkpoints.
std::vector<std::filesystem::path> finetune_grid(const ExperimentPlan& plan, std::ostream* log = nullptr);

// ---------------------------------------------------------------- report

inline constexpr const char* kReportMetrics[] = {"accuracy", "balanced_accuracy", "cohen_kappa",
                                                 "weighted_f1", "roc_auc", "pr_auc"};

struct ReportRow {
  std::string suite;
  std::string encoder;
  std::string method;
  std::optional<std::size_t> batch_size;  // per_batch_size mode only
  std::map<std::string, Aggregate> metrics;
};

struct Report {
  ReportMode mode = ReportMode::pooled;
  std::vector<ReportRow> deltas;
  std::vector<ReportRow> absolute;
  std::vector<std::string> failed;  // keys of failed records
};

// Throws ReportError listing every TTA record without a matching No-TTA
// partner (same cell, checkpoint hash and batch partition).
Report build_report(std::span<const RunRecord> records, ReportMode mode = ReportMode::pooled);

// "+0.187 ± 0.035"; negative zero prints as +0.000.
std::string format_signed(const Aggregate& a);
std::string format_plain(const Aggregate& a);

std::string deltas_csv(const Report& r);
std::string absolute_csv(const Report& r);
nlohmann::json summary_json(const Report& r);

// Writes deltas.csv, absolute.csv and summary.json into `dir`.
void write_report(const std::filesystem::path& dir, const Report& r);

}  // namespace neuroadapt
