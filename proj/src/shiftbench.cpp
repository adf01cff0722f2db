#include "neuroadapt/shiftbench.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

#include "neuroadapt/errors.hpp"
#include "neuroadapt/json_fields.hpp"
#include "neuroadapt/rng.hpp"

namespace neuroadapt {

using nlohmann::json;

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "'");
}

// ---------------------------------------------------------------- manifest

std::vector<std::size_t> DatasetManifest::records_in(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(i);
  return out;
}

std::vector<std::string> DatasetManifest::leaked_subjects() const {
  std::map<std::string, std::set<Split>> seen;
  for (const auto& r : records) seen[r.subject_id].insert(r.split);
  std::vector<std::string> out;
  for (const auto& [subject, splits] : seen)
    if (splits.size() > 1) out.push_back(subject);
  return out;
}

void DatasetManifest::validate() const {
  if (channels == 0 || samples == 0) throw DataError("manifest: channels and samples must be >= 1");
  if (task.num_classes < 2) throw DataError("manifest: need at least 2 classes");
  for (const auto& r : records) {
    if (r.subject_id.empty()) throw DataError("manifest: record '" + r.id + "' has no subject id");
    if (r.label && (*r.label < 0 || static_cast<std::size_t>(*r.label) >= task.num_classes)) {
      throw DataError("manifest: record '" + r.id + "' has label " + std::to_string(*r.label) +
                      " outside [0, " + std::to_string(task.num_classes) + ")");
    }
  }
  if (auto leaked = leaked_subjects(); !leaked.empty()) {
    throw DataError("manifest: subject '" + leaked.front() + "' appears in more than one split");
  }
}

json manifest_to_json(const DatasetManifest& m) {
  json records = json::array();
  for (const auto& r : m.records) {
    json jr = {{"id", r.id}, {"subject_id", r.subject_id}, {"split", to_string(r.split)},
               {"index", r.index}};
    jr["label"] = r.label ? json(*r.label) : json(nullptr);
    records.push_back(std::move(jr));
  }
  return {{"version", m.version},
          {"task", {{"kind", m.task.binary() ? "binary" : "multiclass"},
                    {"num_classes", m.task.num_classes}}},
          {"channels", m.channels},
          {"samples", m.samples},
          {"sample_rate", m.sample_rate},
          {"normalization", m.normalization == Normalization::p95_window ? "p95_window" : "none"},
          {"data_file", m.data_file},
          {"records", std::move(records)}};
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  try {
    JsonFields f(j, "$");
    m.version = f.required<std::uint32_t>("version");
    if (m.version != kDatasetVersion) {
      throw DataError("manifest: unsupported version " + std::to_string(m.version));
    }
    JsonFields task(f.raw("task"), "$.task");
    const auto kind = task.required<std::string>("kind");
    m.task.num_classes = task.required<std::size_t>("num_classes");
    task.finish();
    if ((kind == "binary") != (m.task.num_classes == 2) || (kind != "binary" && kind != "multiclass")) {
      throw DataError("manifest: task kind '" + kind + "' inconsistent with num_classes");
    }
    m.channels = f.required<std::size_t>("channels");
    m.samples = f.required<std::size_t>("samples");
    m.sample_rate = f.get<double>("sample_rate", 1.0);
    const auto norm = f.get<std::string>("normalization", "none");
    if (norm == "p95_window") m.normalization = Normalization::p95_window;
    else if (norm != "none") throw DataError("manifest: unknown normalization '" + norm + "'");
    m.data_file = f.required<std::string>("data_file");
    const auto& recs = f.raw("records");
    if (!recs.is_array()) throw DataError("manifest: records must be an array");
    for (std::size_t i = 0; i < recs.size(); ++i) {
      JsonFields rf(recs[i], "$.records[" + std::to_string(i) + "]");
      RecordMeta r;
      r.id = rf.required<std::string>("id");
      r.subject_id = rf.required<std::string>("subject_id");
      r.split = split_from_string(rf.required<std::string>("split"));
      r.index = rf.required<std::uint64_t>("index");
      if (rf.has("label") && !rf.raw("label").is_null()) r.label = rf.required<int>("label");
      rf.finish();
      m.records.push_back(std::move(r));
    }
    f.finish();
  } catch (const ConfigError& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

// ------------------------------------------------------------ normalization

double percentile_abs(std::span<const float> values, double q) {
  if (values.empty()) throw ContractError("percentile_abs: empty input");
  std::vector<double> a(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) a[i] = std::fabs(static_cast<double>(values[i]));
  std::sort(a.begin(), a.end());
  const double pos = q * static_cast<double>(a.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, a.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return a[lo] + frac * (a[hi] - a[lo]);
}

void normalize_p95(std::span<float> window, std::size_t channels, std::size_t samples) {
  if (samples == 0) throw ContractError("normalize_p95: T must be >= 1");
  if (window.size() != channels * samples) throw ShapeError("normalize_p95: window size mismatch");
  for (std::size_t c = 0; c < channels; ++c) {
    auto ch = window.subspan(c * samples, samples);
    const double div = std::max(percentile_abs(ch, 0.95), 1e-8);
    for (auto& x : ch) x = static_cast<float>(x / div);
  }
}

// ----------------------------------------------------------------- dataset

namespace {

constexpr char kDataMagic[4] = {'N', 'A', 'D', 'B'};

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>(v >> (8 * i));
  os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>(v >> (8 * i));
  os.write(b, 8);
}

std::uint64_t get_le(const unsigned char* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::string& stem,
                                    DatasetManifest manifest, std::span<const float> data) {
  const std::size_t rec = manifest.channels * manifest.samples;
  if (data.size() != manifest.records.size() * rec) {
    throw DataError("write_dataset: " + std::to_string(manifest.records.size()) + " records need " +
                    std::to_string(manifest.records.size() * rec) + " values, got " +
                    std::to_string(data.size()));
  }
  manifest.data_file = stem + ".nadb";
  for (std::size_t i = 0; i < manifest.records.size(); ++i) manifest.records[i].index = i;
  manifest.validate();
  std::filesystem::create_directories(dir);

  const auto data_path = dir / manifest.data_file;
  {
    std::ofstream os(data_path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + data_path.string());
    os.write(kDataMagic, 4);
    put_u32(os, kDatasetVersion);
    put_u64(os, manifest.records.size());
    put_u32(os, static_cast<std::uint32_t>(manifest.channels));
    put_u32(os, static_cast<std::uint32_t>(manifest.samples));
    put_u32(os, 0);  // dtype: f32
    for (float x : data) put_u32(os, std::bit_cast<std::uint32_t>(x));
    if (!os) throw IoError("short write to " + data_path.string());
  }
  const auto manifest_path = dir / (stem + ".json");
  std::ofstream ms(manifest_path, std::ios::trunc);
  if (!ms) throw IoError("cannot write " + manifest_path.string());
  ms << manifest_to_json(manifest).dump(1) << '\n';
  return manifest_path;
}

DatasetReader DatasetReader::open(const std::filesystem::path& manifest_path) {
  std::ifstream ms(manifest_path);
  if (!ms) throw IoError("cannot open manifest " + manifest_path.string());
  json j;
  try {
    j = json::parse(ms);
  } catch (const json::parse_error& e) {
    throw IoError("manifest " + manifest_path.string() + ": " + e.what());
  }
  auto manifest = std::make_shared<DatasetManifest>(manifest_from_json(j));

  DatasetReader r;
  r.data_path_ = manifest_path.parent_path() / manifest->data_file;
  std::ifstream ds(r.data_path_, std::ios::binary);
  if (!ds) throw IoError("cannot open data file " + r.data_path_.string());
  unsigned char h[kDatasetHeaderBytes];
  ds.read(reinterpret_cast<char*>(h), sizeof h);
  if (ds.gcount() != static_cast<std::streamsize>(sizeof h)) {
    throw IoError(r.data_path_.string() + ": truncated header");
  }
  if (std::memcmp(h, kDataMagic, 4) != 0) throw IoError(r.data_path_.string() + ": bad magic");
  const auto version = get_le(h + 4, 4);
  const auto count = get_le(h + 8, 8);
  const auto C = get_le(h + 16, 4), T = get_le(h + 20, 4), dtype = get_le(h + 24, 4);
  if (version != kDatasetVersion) {
    throw IoError(r.data_path_.string() + ": unsupported version " + std::to_string(version));
  }
  if (dtype != 0) throw IoError(r.data_path_.string() + ": unsupported dtype " + std::to_string(dtype));
  if (C != manifest->channels || T != manifest->samples) {
    throw IoError(r.data_path_.string() + ": data shape " + shape_str(C, T) +
                  " disagrees with manifest " + shape_str(manifest->channels, manifest->samples));
  }
  if (count != manifest->records.size()) {
    throw IoError(r.data_path_.string() + ": data file holds " + std::to_string(count) +
                  " records, manifest lists " + std::to_string(manifest->records.size()));
  }
  const auto expected = kDatasetHeaderBytes + count * C * T * 4;
  const auto actual = std::filesystem::file_size(r.data_path_);
  if (actual != expected) {
    throw IoError(r.data_path_.string() + ": expected " + std::to_string(expected) +
                  " bytes, found " + std::to_string(actual));
  }
  for (const auto& rec : manifest->records) {
    if (rec.index >= count) {
      throw IoError("record '" + rec.id + "' index " + std::to_string(rec.index) + " beyond data file");
    }
  }
  r.manifest_ = std::move(manifest);
  r.counters_ = std::make_shared<std::array<std::atomic<std::uint64_t>, 3>>();
  return r;
}

WindowBatch DatasetReader::read(std::span<const std::size_t> positions) const {
  const auto& m = *manifest_;
  WindowBatch b;
  b.channels = m.channels;
  b.samples = m.samples;
  const std::size_t rec = m.channels * m.samples;
  b.data.resize(positions.size() * rec);
  b.record_ids.reserve(positions.size());
  b.subject_ids.reserve(positions.size());
  std::vector<int> labels;
  bool all_labeled = true;

  std::ifstream ds(data_path_, std::ios::binary);
  if (!ds) throw IoError("cannot open data file " + data_path_.string());
  std::vector<unsigned char> buf(rec * 4);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const auto& meta = m.records.at(positions[i]);
    (*counters_)[static_cast<int>(meta.split)].fetch_add(1);
    ds.seekg(static_cast<std::streamoff>(kDatasetHeaderBytes + meta.index * rec * 4));
    ds.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (ds.gcount() != static_cast<std::streamsize>(buf.size())) {
      throw IoError(data_path_.string() + ": short read for record '" + meta.id + "'");
    }
    auto out = b.window(i);
    for (std::size_t k = 0; k < rec; ++k) {
      out[k] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(buf.data() + 4 * k, 4)));
    }
    if (m.normalization == Normalization::p95_window) normalize_p95(out, m.channels, m.samples);
    b.record_ids.push_back(meta.id);
    b.subject_ids.push_back(meta.subject_id);
    if (meta.label) labels.push_back(*meta.label);
    else all_labeled = false;
  }
  if (all_labeled) b.labels = std::move(labels);
  return b;
}

LabeledSplit load_split(const DatasetReader& reader, Split split) {
  const auto idx = reader.manifest().records_in(split);
  LabeledSplit s{split, reader.read(idx)};
  if (!s.batch.labels) throw DataError(std::string("split '") + to_string(split) + "' is not fully labeled");
  return s;
}

std::vector<std::vector<std::size_t>> batch_partition(std::span<const std::size_t> records,
                                                      std::size_t batch_size, BatchOrder order,
                                                      std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> idx(records.begin(), records.end());
  if (order == BatchOrder::shuffled) {
    Rng rng = Rng::derive(seed, "batch_shuffle");
    rng.shuffle(idx.begin(), idx.end());
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < idx.size(); i += batch_size) {
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(i + batch_size, idx.size())));
  }
  return out;
}

BatchIterator::BatchIterator(const DatasetReader& reader, Split split, std::size_t batch_size,
                             BatchOrder order, std::uint64_t seed)
    : reader_(&reader) {
  const auto idx = reader.manifest().records_in(split);
  if (idx.empty()) throw DataError(std::string("split '") + to_string(split) + "' has no records");
  batches_ = batch_partition(idx, batch_size, order, seed);
}

std::optional<WindowBatch> BatchIterator::next() {
  if (cursor_ >= batches_.size()) return std::nullopt;
  return reader_->read(batches_[cursor_++]);
}

// ------------------------------------------------------------------- suites

const char* to_string(SuiteKind k) {
  switch (k) {
    case SuiteKind::subject_shift: return "subject_shift";
    case SuiteKind::label_shift: return "label_shift";
    case SuiteKind::covariate_shift: return "covariate_shift";
    case SuiteKind::modality_shift: return "modality_shift";
  }
  return "?";
}

SuiteKind suite_kind_from_string(const std::string& s) {
  if (s == "subject_shift") return SuiteKind::subject_shift;
  if (s == "label_shift") return SuiteKind::label_shift;
  if (s == "covariate_shift") return SuiteKind::covariate_shift;
  if (s == "modality_shift") return SuiteKind::modality_shift;
  throw ConfigError("unknown suite kind '" + s + "'");
}

std::vector<double> SuiteSpec::resolved_source_priors() const {
  if (!source_priors.empty()) return source_priors;
  return std::vector<double>(num_classes, 1.0 / static_cast<double>(num_classes));
}

std::vector<double> SuiteSpec::resolved_target_priors() const {
  return target_priors.empty() ? resolved_source_priors() : target_priors;
}

void SuiteSpec::validate() const {
  if (num_classes < 2) throw ConfigError("suite: num_classes must be >= 2");
  if (channels == 0 || samples == 0) throw ConfigError("suite: channels/samples must be >= 1");
  if (signal == SignalKind::features && num_classes > channels) {
    throw ConfigError("suite: feature mode needs channels >= num_classes");
  }
  auto check_priors = [&](const std::vector<double>& p, const char* which) {
    if (p.empty()) return;
    if (p.size() != num_classes) {
      throw ConfigError(std::string("suite: ") + which + " has " + std::to_string(p.size()) +
                        " entries for " + std::to_string(num_classes) + " classes");
    }
    double s = 0;
    for (double v : p) {
      if (!(v >= 0) || !std::isfinite(v)) throw ConfigError(std::string("suite: ") + which + " must be >= 0");
      s += v;
    }
    if (std::fabs(s - 1.0) > 1e-6) {
      throw ConfigError(std::string("suite: ") + which + " sums to " + std::to_string(s) + ", not 1");
    }
  };
  check_priors(source_priors, "source_priors");
  check_priors(target_priors, "target_priors");
  auto check_channels = [&](std::size_t n, const char* which) {
    if (n != 0 && n != channels) {
      throw ConfigError(std::string("suite: ") + which + " needs one entry per channel");
    }
  };
  check_channels(channel_gain.size(), "channel_gain");
  check_channels(channel_offset.size(), "channel_offset");
  check_channels(channel_drop.size(), "channel_drop");
  for (double v : channel_gain)
    if (!std::isfinite(v)) throw ConfigError("suite: channel_gain must be finite");
  for (double v : channel_offset)
    if (!std::isfinite(v)) throw ConfigError("suite: channel_offset must be finite");
  if (!std::isfinite(class_separation) || !(noise_sigma > 0) || !(subject_sigma >= 0) ||
      !std::isfinite(modality_scale)) {
    throw ConfigError("suite: separation, noise_sigma, subject_sigma and modality_scale must be finite, sigma > 0");
  }
  if (train_subjects == 0 || val_subjects == 0 || test_subjects == 0) {
    throw ConfigError("suite: every split needs at least one subject");
  }
  if (train_records == 0 || val_records == 0 || test_records == 0) {
    throw ConfigError("suite: every split needs at least one record");
  }
}

SuiteSpec SuiteSpec::preset(SuiteKind kind) {
  SuiteSpec s;
  s.kind = kind;
  s.name = to_string(kind);
  switch (kind) {
    case SuiteKind::subject_shift:
      s.subject_sigma = 1.0;
      break;
    case SuiteKind::label_shift:
      s.class_separation = 2.0;
      s.source_priors = {0.5, 0.5};
      s.target_priors = {0.9, 0.1};
      break;
    case SuiteKind::covariate_shift:
      s.channel_gain.resize(s.channels);
      s.channel_offset.resize(s.channels);
      for (std::size_t c = 0; c < s.channels; ++c) {
        s.channel_gain[c] = c % 2 == 0 ? 1.6 : 0.6;
        s.channel_offset[c] = c % 3 == 0 ? 0.8 : -0.4;
      }
      break;
    case SuiteKind::modality_shift:
      s.channel_drop.assign(s.channels, 0);
      for (std::size_t c = s.channels / 2; c < s.channels; ++c) s.channel_drop[c] = 1;
      s.modality_scale = 2.0;
      break;
  }
  return s;
}

json suite_to_json(const SuiteSpec& s) {
  return {{"name", s.name},
          {"kind", to_string(s.kind)},
          {"signal", s.signal == SignalKind::features ? "features" : "windows"},
          {"num_classes", s.num_classes},
          {"channels", s.channels},
          {"samples", s.samples},
          {"sample_rate", s.sample_rate},
          {"class_separation", s.class_separation},
          {"noise_sigma", s.noise_sigma},
          {"source_priors", s.source_priors},
          {"target_priors", s.target_priors},
          {"subject_sigma", s.subject_sigma},
          {"train_subjects", s.train_subjects},
          {"val_subjects", s.val_subjects},
          {"test_subjects", s.test_subjects},
          {"channel_gain", s.channel_gain},
          {"channel_offset", s.channel_offset},
          {"channel_drop", s.channel_drop},
          {"modality_scale", s.modality_scale},
          {"train_records", s.train_records},
          {"val_records", s.val_records},
          {"test_records", s.test_records},
          {"seed", s.seed}};
}

namespace {

SuiteSpec suite_from_fields(JsonFields& f) {
  SuiteSpec s;
  if (f.has("kind")) {
    // Fields absent from the document fall back to the regime's preset.
    s = SuiteSpec::preset(suite_kind_from_string(f.required<std::string>("kind")));
  }
  s.name = f.get<std::string>("name", s.name);
  const auto signal = f.get<std::string>("signal", s.signal == SignalKind::features ? "features" : "windows");
  if (signal == "features") s.signal = SignalKind::features;
  else if (signal == "windows") s.signal = SignalKind::windows;
  else throw ConfigError(f.path("signal") + ": expected 'features' or 'windows'");
  s.num_classes = f.get<std::size_t>("num_classes", s.num_classes);
  const bool channels_given = f.has("channels");
  s.channels = f.get<std::size_t>("channels", s.channels);
  s.samples = f.get<std::size_t>("samples", s.samples);
  s.sample_rate = f.get<double>("sample_rate", s.sample_rate);
  s.class_separation = f.get<double>("class_separation", s.class_separation);
  s.noise_sigma = f.get<double>("noise_sigma", s.noise_sigma);
  s.source_priors = f.get<std::vector<double>>("source_priors", s.source_priors);
  s.target_priors = f.get<std::vector<double>>("target_priors", s.target_priors);
  s.subject_sigma = f.get<double>("subject_sigma", s.subject_sigma);
  s.train_subjects = f.get<std::size_t>("train_subjects", s.train_subjects);
  s.val_subjects = f.get<std::size_t>("val_subjects", s.val_subjects);
  s.test_subjects = f.get<std::size_t>("test_subjects", s.test_subjects);
  // Preset per-channel vectors are sized for the preset channel count; rebuild
  // them when the document picks another count without spelling them out.
  const auto resize_preset = [&](auto& v, const char* key, auto fill) {
    if (f.has(key)) return;
    if (channels_given && !v.empty() && v.size() != s.channels) {
      auto old = v;
      v.assign(s.channels, fill);
      for (std::size_t c = 0; c < s.channels; ++c) v[c] = old[c % old.size()];
    }
  };
  resize_preset(s.channel_gain, "channel_gain", 1.0);
  resize_preset(s.channel_offset, "channel_offset", 0.0);
  if (!f.has("channel_drop") && channels_given && !s.channel_drop.empty() &&
      s.channel_drop.size() != s.channels) {
    s.channel_drop.assign(s.channels, 0);
    for (std::size_t c = s.channels / 2; c < s.channels; ++c) s.channel_drop[c] = 1;
  }
  s.channel_gain = f.get<std::vector<double>>("channel_gain", s.channel_gain);
  s.channel_offset = f.get<std::vector<double>>("channel_offset", s.channel_offset);
  s.channel_drop = f.get<std::vector<int>>("channel_drop", s.channel_drop);
  s.modality_scale = f.get<double>("modality_scale", s.modality_scale);
  s.train_records = f.get<std::size_t>("train_records", s.train_records);
  s.val_records = f.get<std::size_t>("val_records", s.val_records);
  s.test_records = f.get<std::size_t>("test_records", s.test_records);
  s.seed = f.get<std::uint64_t>("seed", s.seed);
  return s;
}

}  // namespace

SuiteSpec suite_from_json(const json& j, const std::string& path) {
  JsonFields f(j, path);
  SuiteSpec s = suite_from_fields(f);
  f.finish();
  s.validate();
  return s;
}

namespace {

int sample_class(Rng& rng, const std::vector<double>& priors) {
  const double u = rng.uniform();
  double acc = 0;
  for (std::size_t k = 0; k < priors.size(); ++k) {
    acc += priors[k];
    if (u < acc) return static_cast<int>(k);
  }
  // Rounding can leave u above the final cumulative sum.
  for (std::size_t k = priors.size(); k-- > 0;)
    if (priors[k] > 0) return static_cast<int>(k);
  return 0;
}

// K orthonormal directions in R^D by Gram-Schmidt on Gaussian draws.
std::vector<std::vector<double>> orthonormal_directions(Rng& rng, std::size_t k, std::size_t d) {
  std::vector<std::vector<double>> dirs;
  while (dirs.size() < k) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    for (const auto& u : dirs) {
      double dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += v[i] * u[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= dot * u[i];
    }
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (auto& x : v) x /= norm;
    dirs.push_back(std::move(v));
  }
  return dirs;
}

struct SubjectEffect {
  std::vector<double> offset;  // per feature / channel
  std::vector<double> gain;    // windows only
};

struct GeneratorState {
  const SuiteSpec& spec;
  std::vector<std::vector<double>> class_means;  // feature mode
  std::vector<double> class_freq;                // window mode, Hz
};

void fill_record(const GeneratorState& g, const SubjectEffect& subj, int label, Rng& rng,
                 std::span<float> out) {
  const auto& s = g.spec;
  if (s.signal == SignalKind::features) {
    const auto& mu = g.class_means[static_cast<std::size_t>(label)];
    for (std::size_t c = 0; c < s.channels; ++c) {
      out[c] = static_cast<float>(mu[c] + subj.offset[c] + s.noise_sigma * rng.normal());
    }
    return;
  }
  // Class-specific oscillation on top of band-limited noise (3-tap moving
  // average of white noise), per channel.
  const double f = g.class_freq[static_cast<std::size_t>(label)];
  const double amp = s.class_separation * s.noise_sigma;
  for (std::size_t c = 0; c < s.channels; ++c) {
    const double phase = 2.0 * std::numbers::pi * rng.uniform();
    double w0 = rng.normal(), w1 = rng.normal();
    for (std::size_t t = 0; t < s.samples; ++t) {
      const double w2 = rng.normal();
      const double noise = s.noise_sigma * (w0 + w1 + w2) / std::sqrt(3.0);
      w0 = w1;
      w1 = w2;
      const double osc = amp * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(t) / s.sample_rate + phase);
      out[c * s.samples + t] = static_cast<float>(subj.gain[c] * (osc + noise) + subj.offset[c]);
    }
  }
}

SubjectEffect draw_subject(const SuiteSpec& s, Rng& rng) {
  SubjectEffect e;
  e.offset.resize(s.channels);
  e.gain.assign(s.channels, 1.0);
  for (auto& o : e.offset) o = s.subject_sigma * rng.normal();
  if (s.signal == SignalKind::windows) {
    for (auto& gn : e.gain) gn = std::exp(0.5 * s.subject_sigma * rng.normal());
  }
  return e;
}

void apply_target_transform(const SuiteSpec& s, std::span<float> rec) {
  for (std::size_t c = 0; c < s.channels; ++c) {
    const double gain = s.channel_gain.empty() ? 1.0 : s.channel_gain[c];
    const double off = s.channel_offset.empty() ? 0.0 : s.channel_offset[c];
    const bool drop = !s.channel_drop.empty() && s.channel_drop[c] != 0;
    for (std::size_t t = 0; t < s.samples; ++t) {
      float& x = rec[c * s.samples + t];
      if (drop) {
        x = 0.0f;
        continue;
      }
      x = static_cast<float>((gain * x + off) * s.modality_scale);
    }
  }
}

}  // namespace

SuiteData generate_suite(const SuiteSpec& spec) {
  spec.validate();
  GeneratorState g{spec, {}, {}};
  if (spec.signal == SignalKind::features) {
    Rng rng = Rng::derive(spec.seed, "suite.means");
    const auto dirs = orthonormal_directions(rng, spec.num_classes, spec.channels);
    const double radius = spec.class_separation * spec.noise_sigma / std::numbers::sqrt2;
    for (const auto& u : dirs) {
      std::vector<double> mu(spec.channels);
      for (std::size_t i = 0; i < spec.channels; ++i) mu[i] = radius * u[i];
      g.class_means.push_back(std::move(mu));
    }
  } else {
    // Distinct frequencies spread over (0, Nyquist/2].
    const double nyq = spec.sample_rate / 2.0;
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
      g.class_freq.push_back(nyq * static_cast<double>(k + 1) / (2.0 * static_cast<double>(spec.num_classes + 1)));
    }
  }

  struct Pool {
    Split split;
    std::size_t subjects;
    std::size_t records;
    std::string subject_prefix;
    std::string record_prefix;
    const std::vector<double>* priors;
  };
  const auto src_priors = spec.resolved_source_priors();
  const auto tgt_priors = spec.resolved_target_priors();
  const Pool pools[] = {
      {Split::train, spec.train_subjects, spec.train_records, "s", "train-", &src_priors},
      {Split::val, spec.val_subjects, spec.val_records, "v", "val-", &src_priors},
      {Split::test, spec.test_subjects, spec.test_records, "t", "test-", &tgt_priors},
  };

  SuiteData out;
  for (auto* m : {&out.source, &out.target}) {
    m->task.num_classes = spec.num_classes;
    m->channels = spec.channels;
    m->samples = spec.samples;
    m->sample_rate = spec.sample_rate;
    m->normalization = spec.signal == SignalKind::windows ? Normalization::p95_window : Normalization::none;
  }
  const std::size_t rec = spec.channels * spec.samples;
  for (const auto& pool : pools) {
    const bool target = pool.split == Split::test;
    auto& manifest = target ? out.target : out.source;
    auto& data = target ? out.target_data : out.source_data;
    Rng subj_rng = Rng::derive(spec.seed, std::string("suite.subjects.") + to_string(pool.split));
    std::vector<SubjectEffect> subjects;
    for (std::size_t i = 0; i < pool.subjects; ++i) subjects.push_back(draw_subject(spec, subj_rng));
    Rng rng = Rng::derive(spec.seed, std::string("suite.records.") + to_string(pool.split));
    for (std::size_t r = 0; r < pool.records; ++r) {
      const std::size_t subject = r % pool.subjects;
      const int label = sample_class(rng, *pool.priors);
      const std::size_t at = data.size();
      data.resize(at + rec);
      std::span<float> window(data.data() + at, rec);
      fill_record(g, subjects[subject], label, rng, window);
      if (target) apply_target_transform(spec, window);
      char id[32];
      std::snprintf(id, sizeof id, "%s%06zu", pool.record_prefix.c_str(), r);
      manifest.records.push_back({id, pool.subject_prefix + std::to_string(subject), label,
                                  pool.split, manifest.records.size()});
    }
  }
  return out;
}

SuitePaths write_suite(const std::filesystem::path& dir, const SuiteData& data) {
  return {write_dataset(dir, "source", data.source, data.source_data),
          write_dataset(dir, "target", data.target, data.target_data)};
}

}  // namespace neuroadapt
