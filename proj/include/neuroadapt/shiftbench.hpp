#pragma once

// Dataset format, preprocessing and synthetic shift suites.
//
// A dataset is a JSON manifest plus a NADB data file:
//   "NADB" | u32 version | u64 record count | u32 C | u32 T | u32 dtype (0 = f32)
//   followed by `count` records of C*T little-endian f32, channel-major.
// Record i of the manifest lives at byte offset 28 + i*C*T*4 (its "index").

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "neuroadapt/batch.hpp"

namespace neuroadapt {

enum class Split { train = 0, val = 1, test = 2 };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct TaskSpec {
  std::size_t num_classes = 2;
  bool binary() const { return num_classes == 2; }
};

struct RecordMeta {
  std::string id;
  std::string subject_id;
  std::optional<int> label;
  Split split = Split::train;
  std::uint64_t index = 0;  // position in the data file

  bool operator==(const RecordMeta&) const = default;
};

enum class Normalization { none, p95_window };

struct DatasetManifest {
  std::uint32_t version = 1;
  TaskSpec task;
  std::size_t channels = 0;
  std::size_t samples = 0;
  double sample_rate = 1.0;
  Normalization normalization = Normalization::none;
  std::string data_file;  // relative to the manifest's directory
  std::vector<RecordMeta> records;

  std::vector<std::size_t> records_in(Split split) const;
  // Subject ids that occur in more than one split.
  std::vector<std::string> leaked_subjects() const;
  void validate() const;
};

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 28;

// Divides each channel by max(p95(|x_c|), 1e-8), in place. The percentile
// uses linear interpolation between order statistics.
void normalize_p95(std::span<float> window, std::size_t channels, std::size_t samples);
double percentile_abs(std::span<const float> values, double q);

// Writes `<dir>/<stem>.json` and `<dir>/<stem>.nadb`. `data` holds records in
// manifest order; each record's index is rewritten to its position.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::string& stem,
                                    DatasetManifest manifest, std::span<const float> data);

// Validates header and length on open; reads records lazily. Thread-safe for
// concurrent reads. Counts reads per split so callers can prove what was
// (not) touched.
class DatasetReader {
 public:
  static DatasetReader open(const std::filesystem::path& manifest_path);

  const DatasetManifest& manifest() const { return *manifest_; }
  const std::filesystem::path& data_path() const { return data_path_; }

  // Records by manifest position; applies the manifest's normalization.
  WindowBatch read(std::span<const std::size_t> positions) const;
  std::uint64_t reads(Split s) const { return (*counters_)[static_cast<int>(s)].load(); }

 private:
  DatasetReader() = default;
  std::shared_ptr<const DatasetManifest> manifest_;
  std::filesystem::path data_path_;
  std::shared_ptr<std::array<std::atomic<std::uint64_t>, 3>> counters_;
};

// Every record of one split, labels included. The tag travels with the data
// so training code can insist on train/val inputs.
struct LabeledSplit {
  Split split;
  WindowBatch batch;
};

LabeledSplit load_split(const DatasetReader& reader, Split split);

enum class BatchOrder { sequential, shuffled };

// Positions into `records` grouped into batches; the last batch may be short.
std::vector<std::vector<std::size_t>> batch_partition(std::span<const std::size_t> records,
                                                      std::size_t batch_size, BatchOrder order,
                                                      std::uint64_t seed = 0);

class BatchIterator {
 public:
  BatchIterator(const DatasetReader& reader, Split split, std::size_t batch_size, BatchOrder order,
                std::uint64_t seed = 0);
  std::optional<WindowBatch> next();
  std::size_t num_batches() const { return batches_.size(); }
  const std::vector<std::vector<std::size_t>>& partition() const { return batches_; }

 private:
  const DatasetReader* reader_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t cursor_ = 0;
};

// ------------------------------------------------------------------- suites

enum class SuiteKind { subject_shift, label_shift, covariate_shift, modality_shift };
enum class SignalKind { features, windows };

const char* to_string(SuiteKind k);
SuiteKind suite_kind_from_string(const std::string& s);

// Class-conditional generator. Source = train + val subjects, target = test
// subjects; pools are disjoint. Every shift parameter is applied regardless
// of `kind`; `kind` names the regime and picks presets.
struct SuiteSpec {
  std::string name = "suite";
  SuiteKind kind = SuiteKind::subject_shift;
  SignalKind signal = SignalKind::features;
  std::size_t num_classes = 2;
  std::size_t channels = 16;  // feature dim in feature mode
  std::size_t samples = 1;    // 1 in feature mode
  double sample_rate = 1.0;

  double class_separation = 3.0;  // distance between class means, in noise sigmas
  double noise_sigma = 1.0;
  std::vector<double> source_priors;  // empty = uniform
  std::vector<double> target_priors;  // empty = source priors

  double subject_sigma = 0.0;
  std::size_t train_subjects = 16;
  std::size_t val_subjects = 4;
  std::size_t test_subjects = 10;

  std::vector<double> channel_gain;    // target only; empty = 1
  std::vector<double> channel_offset;  // target only; empty = 0
  std::vector<int> channel_drop;       // target only; 1 = zeroed
  double modality_scale = 1.0;         // target only, applied to kept channels

  std::size_t train_records = 2000;
  std::size_t val_records = 500;
  std::size_t test_records = 2000;
  std::uint64_t seed = 0;

  std::vector<double> resolved_source_priors() const;
  std::vector<double> resolved_target_priors() const;
  void validate() const;

  // A spec with the named regime switched on at a moderate strength.
  static SuiteSpec preset(SuiteKind kind);
};

nlohmann::json suite_to_json(const SuiteSpec& s);
SuiteSpec suite_from_json(const nlohmann::json& j, const std::string& path = "$");

struct SuiteData {
  DatasetManifest source;
  std::vector<float> source_data;
  DatasetManifest target;
  std::vector<float> target_data;
};

SuiteData generate_suite(const SuiteSpec& spec);

struct SuitePaths {
  std::filesystem::path source;
  std::filesystem::path target;
};

SuitePaths write_suite(const std::filesystem::path& dir, const SuiteData& data);

}  // namespace neuroadapt
