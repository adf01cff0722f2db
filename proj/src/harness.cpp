#include "neuroadapt/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "neuroadapt/hash.hpp"
#include "neuroadapt/json_fields.hpp"
#include "neuroadapt/rng.hpp"

namespace neuroadapt {

using nlohmann::json;
namespace fs = std::filesystem;

const char* to_string(ReportMode m) { return m == ReportMode::pooled ? "pooled" : "per_batch_size"; }

namespace {

ReportMode report_mode_from_string(const std::string& s, const std::string& path) {
  if (s == "pooled") return ReportMode::pooled;
  if (s == "per_batch_size") return ReportMode::per_batch_size;
  throw ConfigError(path + ": unknown report mode '" + s + "'");
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-' ||
           c == '.';
  });
}

template <typename T>
void check_unique(const std::vector<T>& v, const std::string& what) {
  std::set<T> seen;
  for (const auto& x : v)
    if (!seen.insert(x).second) throw ConfigError(what + ": duplicate entry");
}

json encoder_spec_json(const EncoderSpec& s) {
  return {{"name", s.name},       {"kind", to_string(s.kind)}, {"channels", s.channels}, {"samples", s.samples},
          {"out_dim", s.out_dim}, {"hidden", s.hidden},        {"patch", s.patch},       {"seed", s.seed}};
}

json encoder_entry_json(const EncoderEntry& e) {
  return {{"name", e.name},     {"kind", to_string(e.kind)}, {"out_dim", e.out_dim},
          {"hidden", e.hidden}, {"patch", e.patch},          {"seed", e.seed}};
}

EncoderEntry encoder_entry_from_json(const json& j, const std::string& path) {
  JsonFields f(j, path);
  EncoderEntry e;
  e.name = f.get<std::string>("name", e.name);
  try {
    e.kind = encoder_kind_from_string(f.get<std::string>("kind", to_string(e.kind)));
  } catch (const ConfigError& err) {
    throw ConfigError(f.path("kind") + ": " + err.what());
  }
  e.out_dim = f.get<std::size_t>("out_dim", e.out_dim);
  e.hidden = f.get<std::size_t>("hidden", e.hidden);
  e.patch = f.get<std::size_t>("patch", e.patch);
  e.seed = f.get<std::uint64_t>("seed", e.seed);
  f.finish();
  return e;
}

void read_tent(const json& j, const std::string& path, TentConfig& c) {
  JsonFields f(j, path);
  c.lr = f.get<double>("lr", c.lr);
  c.momentum = f.get<double>("momentum", c.momentum);
  c.steps = f.get<std::size_t>("steps", c.steps);
  f.finish();
}

void read_shot(const json& j, const std::string& path, ShotConfig& c) {
  JsonFields f(j, path);
  c.lr = f.get<double>("lr", c.lr);
  c.momentum = f.get<double>("momentum", c.momentum);
  c.weight_decay = f.get<double>("weight_decay", c.weight_decay);
  c.steps = f.get<std::size_t>("steps", c.steps);
  c.ent_weight = f.get<double>("ent_weight", c.ent_weight);
  c.mi_weight = f.get<double>("mi_weight", c.mi_weight);
  c.pl_weight = f.get<double>("pl_weight", c.pl_weight);
  f.finish();
}

void read_t3a(const json& j, const std::string& path, T3AConfig& c) {
  JsonFields f(j, path);
  c.filter_k = f.get<std::size_t>("filter_k", c.filter_k);
  f.finish();
}

// Reads the tent/shot/t3a/episodic keys of an object into `a`.
void read_adapter_sections(JsonFields& f, AdapterConfig& a) {
  if (f.has("tent")) read_tent(f.raw("tent"), f.path("tent"), a.tent);
  if (f.has("shot")) read_shot(f.raw("shot"), f.path("shot"), a.shot);
  if (f.has("t3a")) read_t3a(f.raw("t3a"), f.path("t3a"), a.t3a);
  a.episodic = f.get<bool>("episodic", a.episodic);
}

FinetuneConfig finetune_from_json(const json& j, const std::string& path) {
  JsonFields f(j, path);
  FinetuneConfig c;
  c.lr = f.get<double>("lr", c.lr);
  c.weight_decay = f.get<double>("weight_decay", c.weight_decay);
  c.epochs = f.get<std::size_t>("epochs", c.epochs);
  c.batch_size = f.get<std::size_t>("batch_size", c.batch_size);
  c.hidden = f.get<std::size_t>("hidden", c.hidden);
  c.dropout = f.get<double>("dropout", c.dropout);
  c.beta1 = f.get<double>("beta1", c.beta1);
  c.beta2 = f.get<double>("beta2", c.beta2);
  c.adam_eps = f.get<double>("adam_eps", c.adam_eps);
  if (f.get<std::string>("lr_schedule", "constant") != "constant") {
    throw ConfigError(f.path("lr_schedule") + ": only 'constant' is supported");
  }
  if (f.get<double>("layernorm_eps", kLayerNormEps) != kLayerNormEps) {
    throw ConfigError(f.path("layernorm_eps") + ": fixed at 1e-5");
  }
  f.finish();
  return c;
}

SuiteEntry suite_entry_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  SuiteEntry e;
  if (j.contains("source") || j.contains("target")) {
    JsonFields f(j, path);
    e.name = f.required<std::string>("name");
    e.source = f.required<std::string>("source");
    e.target = f.required<std::string>("target");
    f.finish();
  } else {
    e.spec = suite_from_json(j, path);
    e.name = e.spec->name;
  }
  return e;
}

json suite_entry_json(const SuiteEntry& e) {
  if (e.spec) return suite_to_json(*e.spec);
  return {{"name", e.name}, {"source", e.source.generic_string()}, {"target", e.target.generic_string()}};
}

}  // namespace

EncoderSpec EncoderEntry::resolve(std::size_t channels, std::size_t samples) const {
  EncoderSpec s;
  s.name = name;
  s.kind = kind;
  s.channels = channels;
  s.samples = samples;
  s.out_dim = out_dim;
  s.hidden = hidden;
  s.patch = patch;
  s.seed = seed;
  s.validate();
  return s;
}

std::size_t ExperimentPlan::cardinality() const {
  return suites.size() * encoders.size() * seeds.size() * batch_sizes.size() * methods.size();
}

void ExperimentPlan::validate() const {
  if (seeds.empty()) throw ConfigError("$.seeds: at least one seed required");
  check_unique(seeds, "$.seeds");
  if (batch_sizes.empty()) throw ConfigError("$.batch_sizes: at least one batch size required");
  for (auto b : batch_sizes)
    if (b == 0) throw ConfigError("$.batch_sizes: batch sizes must be >= 1");
  check_unique(batch_sizes, "$.batch_sizes");
  if (suites.empty()) throw ConfigError("$.suites: at least one suite required");
  std::vector<std::string> names;
  for (const auto& s : suites) {
    if (!valid_name(s.name)) throw ConfigError("$.suites: invalid suite name '" + s.name + "'");
    if (s.spec) s.spec->validate();
    names.push_back(s.name);
  }
  check_unique(names, "$.suites");
  if (encoders.empty()) throw ConfigError("$.encoders: at least one encoder required");
  names.clear();
  for (const auto& e : encoders) {
    if (!valid_name(e.name)) throw ConfigError("$.encoders: invalid encoder name '" + e.name + "'");
    names.push_back(e.name);
  }
  check_unique(names, "$.encoders");
  if (methods.empty() || methods.front().adapter.method != Method::no_tta) {
    throw ConfigError("$.methods: the no_tta baseline must come first");
  }
  names.clear();
  std::size_t baselines = 0;
  for (const auto& m : methods) {
    if (!valid_name(m.label)) throw ConfigError("$.methods: invalid label '" + m.label + "'");
    if (m.adapter.method == Method::no_tta) ++baselines;
    m.adapter.validate();
    names.push_back(m.label);
  }
  if (baselines != 1) throw ConfigError("$.methods: exactly one no_tta entry allowed");
  check_unique(names, "$.methods");
  FinetuneConfig ft = finetune;
  ft.num_classes = std::max<std::size_t>(ft.num_classes, 2);
  ft.validate();
}

ExperimentPlan plan_from_json(const json& j) {
  JsonFields f(j, "$");
  ExperimentPlan p;
  p.name = f.get<std::string>("name", p.name);
  p.output_dir = f.get<std::string>("output_dir", p.output_dir.generic_string());
  p.plan_seed = f.get<std::uint64_t>("plan_seed", p.plan_seed);
  p.seeds = f.get<std::vector<std::uint64_t>>("seeds", p.seeds);
  p.batch_sizes = f.get<std::vector<std::size_t>>("batch_sizes", p.batch_sizes);

  if (!f.has("suites")) throw ConfigError("$.suites: missing required field");
  const json& suites = f.raw("suites");
  if (!suites.is_array()) throw ConfigError("$.suites: expected an array");
  for (std::size_t i = 0; i < suites.size(); ++i)
    p.suites.push_back(suite_entry_from_json(suites[i], "$.suites[" + std::to_string(i) + "]"));

  if (f.has("encoders")) {
    const json& encs = f.raw("encoders");
    if (!encs.is_array()) throw ConfigError("$.encoders: expected an array");
    p.encoders.clear();
    for (std::size_t i = 0; i < encs.size(); ++i)
      p.encoders.push_back(encoder_entry_from_json(encs[i], "$.encoders[" + std::to_string(i) + "]"));
  }

  if (f.has("finetune")) p.finetune = finetune_from_json(f.raw("finetune"), "$.finetune");

  AdapterConfig defaults;
  if (f.has("adaptation")) {
    JsonFields a(f.raw("adaptation"), "$.adaptation");
    read_adapter_sections(a, defaults);
    a.finish();
  }

  if (!f.has("methods")) throw ConfigError("$.methods: missing required field");
  const json& methods = f.raw("methods");
  if (!methods.is_array()) throw ConfigError("$.methods: expected an array");
  if (methods.empty()) throw ConfigError("$.methods: empty method list");
  std::vector<MethodEntry> entries;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    const std::string path = "$.methods[" + std::to_string(i) + "]";
    MethodEntry m;
    m.adapter = defaults;
    try {
      if (methods[i].is_string()) {
        m.adapter.method = method_from_string(methods[i].get<std::string>());
        m.label = methods[i].get<std::string>();
      } else {
        JsonFields mf(methods[i], path);
        m.adapter.method = method_from_string(mf.required<std::string>("method"));
        m.label = mf.get<std::string>("label", to_string(m.adapter.method));
        read_adapter_sections(mf, m.adapter);
        mf.finish();
      }
    } catch (const ConfigError& e) {
      const std::string what = e.what();
      throw ConfigError(what.rfind("$", 0) == 0 ? what : path + ": " + what);
    }
    entries.push_back(std::move(m));
  }
  auto base = std::find_if(entries.begin(), entries.end(),
                           [](const MethodEntry& m) { return m.adapter.method == Method::no_tta; });
  if (base == entries.end()) {
    MethodEntry b;
    b.label = "no_tta";
    b.adapter = defaults;
    b.adapter.method = Method::no_tta;
    p.methods.push_back(std::move(b));
  } else {
    p.methods.push_back(*base);
    entries.erase(base);
  }
  for (auto& m : entries) p.methods.push_back(std::move(m));

  if (f.has("report")) {
    JsonFields r(f.raw("report"), "$.report");
    p.report_mode = report_mode_from_string(r.get<std::string>("mode", "pooled"), "$.report.mode");
    r.finish();
  }
  f.finish();
  p.validate();
  return p;
}

json plan_to_json(const ExperimentPlan& p) {
  json suites = json::array(), encoders = json::array(), methods = json::array();
  for (const auto& s : p.suites) suites.push_back(suite_entry_json(s));
  for (const auto& e : p.encoders) encoders.push_back(encoder_entry_json(e));
  for (const auto& m : p.methods) {
    json a = adapter_to_json(m.adapter);
    a["label"] = m.label;
    methods.push_back(std::move(a));
  }
  return {{"name", p.name},
          {"output_dir", p.output_dir.generic_string()},
          {"plan_seed", p.plan_seed},
          {"seeds", p.seeds},
          {"batch_sizes", p.batch_sizes},
          {"suites", suites},
          {"encoders", encoders},
          {"finetune", finetune_to_json(p.finetune)},
          {"methods", methods},
          {"report", {{"mode", to_string(p.report_mode)}}}};
}

ExperimentPlan load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return plan_from_json(j);
}

// ---------------------------------------------------------------- records

std::string RunRecord::cell_key() const {
  return suite + "|" + encoder + "|" + std::to_string(seed) + "|" + std::to_string(batch_size);
}

std::string RunRecord::key() const { return cell_key() + "|" + method; }

json metrics_to_json(const MetricReport& m) {
  json j = {{"accuracy", m.accuracy},
            {"balanced_accuracy", m.balanced_accuracy},
            {"cohen_kappa", m.cohen_kappa},
            {"weighted_f1", m.weighted_f1}};
  j["roc_auc"] = m.roc_auc ? json(*m.roc_auc) : json(nullptr);
  j["pr_auc"] = m.pr_auc ? json(*m.pr_auc) : json(nullptr);
  return j;
}

MetricReport metrics_from_json(const json& j) {
  MetricReport m;
  m.accuracy = j.at("accuracy").get<double>();
  m.balanced_accuracy = j.at("balanced_accuracy").get<double>();
  m.cohen_kappa = j.at("cohen_kappa").get<double>();
  m.weighted_f1 = j.at("weighted_f1").get<double>();
  if (j.contains("roc_auc") && !j.at("roc_auc").is_null()) m.roc_auc = j.at("roc_auc").get<double>();
  if (j.contains("pr_auc") && !j.at("pr_auc").is_null()) m.pr_auc = j.at("pr_auc").get<double>();
  return m;
}

json record_to_json(const RunRecord& r) {
  json j = {{"suite", r.suite},
            {"encoder", r.encoder},
            {"seed", r.seed},
            {"batch_size", r.batch_size},
            {"method", r.method},
            {"method_kind", to_string(r.method_kind)},
            {"status", r.ok ? "ok" : "failed"}};
  if (!r.ok) {
    json err = {{"kind", r.error_kind}, {"message", r.error_message}};
    if (r.error_batch) err["batch"] = *r.error_batch;
    j["error"] = std::move(err);
  }
  j["metrics"] = r.metrics ? metrics_to_json(*r.metrics) : json(nullptr);
  j["pred_marginal"] = r.pred_marginal;
  j["n_target"] = r.n_target;
  j["run_seed"] = r.run_seed;
  j["checkpoint_hash"] = r.checkpoint_hash;
  j["partition_hash"] = r.partition_hash;
  j["encoder_hash_before"] = r.encoder_hash_before;
  j["encoder_hash_after"] = r.encoder_hash_after;
  j["classifier_hash_before"] = r.classifier_hash_before;
  j["classifier_hash_after"] = r.classifier_hash_after;
  j["non_norm_hash_before"] = r.non_norm_hash_before;
  j["non_norm_hash_after"] = r.non_norm_hash_after;
  j["wall_time_s"] = r.wall_time_s;
  j["version"] = r.version;
  j["config"] = r.config;
  return j;
}

RunRecord record_from_json(const json& j) {
  RunRecord r;
  try {
    r.suite = j.at("suite").get<std::string>();
    r.encoder = j.at("encoder").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.batch_size = j.at("batch_size").get<std::size_t>();
    r.method = j.at("method").get<std::string>();
    r.method_kind = method_from_string(j.at("method_kind").get<std::string>());
    r.ok = j.at("status").get<std::string>() == "ok";
    if (!r.ok) {
      const json& e = j.at("error");
      r.error_kind = e.at("kind").get<std::string>();
      r.error_message = e.at("message").get<std::string>();
      if (e.contains("batch")) r.error_batch = e.at("batch").get<std::size_t>();
    }
    if (!j.at("metrics").is_null()) r.metrics = metrics_from_json(j.at("metrics"));
    r.pred_marginal = j.at("pred_marginal").get<std::vector<double>>();
    r.n_target = j.at("n_target").get<std::size_t>();
    r.run_seed = j.at("run_seed").get<std::uint64_t>();
    r.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
    r.partition_hash = j.at("partition_hash").get<std::string>();
    r.encoder_hash_before = j.at("encoder_hash_before").get<std::string>();
    r.encoder_hash_after = j.at("encoder_hash_after").get<std::string>();
    r.classifier_hash_before = j.at("classifier_hash_before").get<std::string>();
    r.classifier_hash_after = j.at("classifier_hash_after").get<std::string>();
    r.non_norm_hash_before = j.at("non_norm_hash_before").get<std::string>();
    r.non_norm_hash_after = j.at("non_norm_hash_after").get<std::string>();
    r.wall_time_s = j.at("wall_time_s").get<double>();
    r.version = j.at("version").get<std::string>();
    r.config = j.at("config");
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed run record: ") + e.what());
  }
  return r;
}

std::vector<RunRecord> read_records(const fs::path& path, bool repair) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open runs file " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  is.close();
  const auto complete = text.rfind('\n');
  const std::size_t keep = complete == std::string::npos ? 0 : complete + 1;
  if (keep != text.size()) {
    text.resize(keep);
    if (repair) fs::resize_file(path, keep);
  }
  std::vector<RunRecord> out;
  std::istringstream lines(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- runner

namespace {

struct Cell {
  const SuiteEntry* suite;
  const EncoderEntry* encoder;
  std::uint64_t seed;
  std::vector<RunRecord> pending;  // coordinates only, grid order
};

struct PreparedCell {
  std::optional<DatasetReader> target;
  std::optional<Encoder> encoder;
  Checkpoint checkpoint;
  std::size_t num_classes = 0;
  json suite_json;
  json finetune_json;
};

std::uint64_t file_hash(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  Fnv1a h;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof buf);
    h.bytes({reinterpret_cast<const std::uint8_t*>(buf), static_cast<std::size_t>(is.gcount())});
  }
  return h.value();
}

std::uint64_t finetune_seed(const ExperimentPlan& plan, const std::string& suite, const std::string& encoder,
                            std::uint64_t seed) {
  Fnv1a h;
  h.text(suite).byte(0).text(encoder).byte(0).u64(seed);
  return Rng::derive_seed(plan.plan_seed, "finetune", h.value());
}

fs::path checkpoint_path(const ExperimentPlan& plan, const std::string& suite, const std::string& encoder,
                         std::uint64_t seed) {
  return plan.output_dir / "checkpoints" / (suite + "__" + encoder + "__seed-" + std::to_string(seed) + ".nack");
}

// Validation records: the manifest's val split, or a seeded subject split of
// the train records when the manifest has none.
std::pair<LabeledSplit, LabeledSplit> source_splits(const DatasetReader& reader, std::uint64_t seed) {
  const auto& m = reader.manifest();
  if (!m.records_in(Split::val).empty()) return {load_split(reader, Split::train), load_split(reader, Split::val)};
  const SubjectSplit ss = split_patients(m, seed);
  const std::set<std::string> val(ss.val.begin(), ss.val.end());
  std::vector<std::size_t> tr, va;
  for (auto pos : m.records_in(Split::train)) (val.count(m.records[pos].subject_id) ? va : tr).push_back(pos);
  return {LabeledSplit{Split::train, reader.read(tr)}, LabeledSplit{Split::val, reader.read(va)}};
}

PreparedCell prepare_cell(const ExperimentPlan& plan, const SuiteEntry& suite, const EncoderEntry& enc,
                          std::uint64_t seed, std::ostream* log) {
  PreparedCell out;
  SuitePaths paths;
  if (suite.spec) {
    SuiteSpec spec = *suite.spec;
    spec.seed = Rng::derive_seed(suite.spec->seed, "suite_data", seed);
    paths = write_suite(plan.output_dir / "data" / suite.name / ("seed-" + std::to_string(seed)),
                        generate_suite(spec));
    out.suite_json = suite_to_json(spec);
  } else {
    paths = {suite.source, suite.target};
    out.suite_json = suite_entry_json(suite);
  }
  const DatasetReader source = DatasetReader::open(paths.source);
  out.target = DatasetReader::open(paths.target);
  const auto& sm = source.manifest();
  const auto& tm = out.target->manifest();
  if (sm.channels != tm.channels || sm.samples != tm.samples || sm.task.num_classes != tm.task.num_classes) {
    throw DataError("suite '" + suite.name + "': source and target shapes or tasks differ");
  }
  if (tm.records_in(Split::test).empty()) throw DataError("suite '" + suite.name + "': target has no test records");
  out.num_classes = sm.task.num_classes;
  out.encoder.emplace(enc.resolve(sm.channels, sm.samples));

  FinetuneConfig ft = plan.finetune;
  ft.seed = finetune_seed(plan, suite.name, enc.name, seed);
  ft.num_classes = out.num_classes;
  out.finetune_json = finetune_to_json(ft);
  out.finetune_json["seed"] = ft.seed;

  const json inputs = {{"suite", out.suite_json},
                       {"encoder", encoder_spec_json(out.encoder->spec())},
                       {"encoder_hash", hex64(out.encoder->hash())},
                       {"finetune", out.finetune_json},
                       {"source_hash", hex64(file_hash(source.data_path()))}};
  const fs::path ckpt_path = checkpoint_path(plan, suite.name, enc.name, seed);
  fs::path side = ckpt_path;
  side += ".json";
  if (fs::exists(ckpt_path) && fs::exists(side)) {
    std::ifstream is(side);
    json prov = json::parse(is, nullptr, false);
    if (!prov.is_discarded() && prov.contains("inputs") && prov["inputs"] == inputs) {
      out.checkpoint = read_checkpoint(ckpt_path);
      if (log) *log << "  reusing checkpoint " << ckpt_path.string() << '\n';
      return out;
    }
  }
  auto [train, val] = source_splits(source, ft.seed);
  TrainResult tr = train_head(ft, *out.encoder, train, val);
  out.checkpoint = std::move(tr.checkpoint);
  write_checkpoint(ckpt_path, out.checkpoint,
                   {{"inputs", inputs},
                    {"checkpoint_hash", hex64(checkpoint_hash(out.checkpoint))},
                    {"training", training_log_json(tr.log)},
                    {"version", kVersion}});
  if (log) {
    *log << "  fine-tuned " << suite.name << "/" << enc.name << "/seed " << seed << ": epoch "
         << tr.log.selected_epoch + 1 << " of " << ft.epochs << " selected\n";
  }
  return out;
}

std::vector<double> hard_marginal(const PredictionSet& preds, std::size_t K) {
  std::vector<double> m(K, 0.0);
  for (int p : preds.predicted) m[static_cast<std::size_t>(p)] += 1.0;
  for (auto& v : m) v /= static_cast<double>(std::max<std::size_t>(preds.predicted.size(), 1));
  return m;
}

void fail(RunRecord& r, const std::string& kind, const std::string& message) {
  r.ok = false;
  r.error_kind = kind;
  r.error_message = message;
  r.metrics.reset();
}

const MethodEntry& method_entry(const ExperimentPlan& plan, const std::string& label) {
  for (const auto& m : plan.methods)
    if (m.label == label) return m;
  throw ContractError("unknown method label " + label);
}

void write_trace(const fs::path& path, const std::vector<BatchTrace>& trace) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& t : trace) os << trace_to_json(t).dump() << '\n';
}

std::vector<RunRecord> compute_cell(const ExperimentPlan& plan, Cell& cell, bool traces, std::ostream* log,
                                    std::mutex& log_mutex) {
  using clock = std::chrono::steady_clock;
  std::vector<RunRecord> out = cell.pending;
  std::ostringstream local;
  PreparedCell prep;
  try {
    prep = prepare_cell(plan, *cell.suite, *cell.encoder, cell.seed, log ? &local : nullptr);
  } catch (const Error& e) {
    for (auto& r : out) fail(r, e.kind(), std::string("cell setup: ") + e.what());
  } catch (const std::exception& e) {
    for (auto& r : out) fail(r, "internal", std::string("cell setup: ") + e.what());
  }
  if (log) {
    std::lock_guard<std::mutex> lock(log_mutex);
    *log << local.str();
  }
  if (!prep.encoder) return out;

  const Encoder& encoder = *prep.encoder;
  const std::string ckpt_hash = hex64(checkpoint_hash(prep.checkpoint));
  const std::string enc_hash = hex64(encoder.hash());
  const HeadParams& head0 = prep.checkpoint.head;
  const std::vector<std::size_t> test_records = prep.target->manifest().records_in(Split::test);

  std::size_t current_bs = 0;
  std::vector<UnlabeledBatch> stream;
  std::vector<int> truth;
  std::string partition_hash;

  for (auto& r : out) {
    if (r.batch_size != current_bs) {
      current_bs = r.batch_size;
      stream.clear();
      truth.clear();
      Fnv1a ph;
      for (const auto& positions : batch_partition(test_records, current_bs, BatchOrder::sequential)) {
        WindowBatch b = prep.target->read(positions);
        truth.insert(truth.end(), b.labels->begin(), b.labels->end());
        for (const auto& id : b.record_ids) ph.text(id).byte(0);
        ph.byte(1);
        stream.push_back(strip_labels(std::move(b)));
      }
      partition_hash = hex64(ph.value());
    }
    const MethodEntry& m = method_entry(plan, r.method);
    r.checkpoint_hash = ckpt_hash;
    r.partition_hash = partition_hash;
    r.encoder_hash_before = enc_hash;
    r.classifier_hash_before = hex64(hash_classifier(head0));
    r.non_norm_hash_before = hex64(hash_non_norm(head0));
    r.n_target = truth.size();
    r.config = {{"plan", plan.name},
                {"suite", prep.suite_json},
                {"encoder", encoder_spec_json(encoder.spec())},
                {"finetune", prep.finetune_json},
                {"adapter", adapter_to_json(m.adapter)},
                {"batch_size", r.batch_size},
                {"seed", r.seed}};
    const auto t0 = clock::now();
    try {
      AdapterState state = adapter_init(m.adapter, prep.checkpoint, encoder);
      AdaptationResult res = run_adaptation(state, encoder, stream);
      const HeadParams& head = adapted_head(state);
      r.encoder_hash_after = hex64(encoder.hash());
      r.classifier_hash_after = hex64(hash_classifier(head));
      r.non_norm_hash_after = hex64(hash_non_norm(head));
      if (!all_finite(res.probs)) throw AdaptationError(0, "non-finite predictions");
      auto preds = PredictionSet::from_probs(truth, std::move(res.probs));
      r.metrics = evaluate(preds, prep.num_classes);
      r.pred_marginal = hard_marginal(preds, prep.num_classes);
      if (traces) write_trace(trace_path(plan, r), res.trace);
    } catch (const AdaptationError& e) {
      fail(r, e.kind(), e.what());
      r.error_batch = e.batch();
    } catch (const Error& e) {
      fail(r, e.kind(), e.what());
    } catch (const std::exception& e) {
      fail(r, "internal", e.what());
    }
    r.wall_time_s = std::chrono::duration<double>(clock::now() - t0).count();
  }
  return out;
}

std::size_t thread_count(std::size_t requested) {
  std::size_t n = requested;
  if (n == 0) {
    if (const char* env = std::getenv("NEUROADAPT_THREADS")) {
      try {
        n = static_cast<std::size_t>(std::stoul(env));
      } catch (const std::exception&) {
        throw ConfigError(std::string("NEUROADAPT_THREADS: not a number: ") + env);
      }
    }
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

std::vector<Cell> plan_cells(const ExperimentPlan& plan) {
  std::vector<Cell> cells;
  for (const auto& s : plan.suites)
    for (const auto& e : plan.encoders)
      for (auto seed : plan.seeds) {
        Cell c{&s, &e, seed, {}};
        for (auto bs : plan.batch_sizes)
          for (const auto& m : plan.methods) {
            RunRecord r;
            r.suite = s.name;
            r.encoder = e.name;
            r.seed = seed;
            r.batch_size = bs;
            r.method = m.label;
            r.method_kind = m.adapter.method;
            Fnv1a h;
            h.text(r.key());
            r.run_seed = Rng::derive_seed(plan.plan_seed, "run", h.value());
            c.pending.push_back(std::move(r));
          }
        cells.push_back(std::move(c));
      }
  return cells;
}

}  // namespace

fs::path trace_path(const ExperimentPlan& plan, const RunRecord& r) {
  return plan.output_dir / "traces" /
         (r.suite + "__" + r.encoder + "__seed-" + std::to_string(r.seed) + "__bs-" + std::to_string(r.batch_size) +
          "__" + r.method + ".jsonl");
}

RunSummary run_experiment(const ExperimentPlan& plan, const RunOptions& options) {
  plan.validate();
  RunSummary summary;
  summary.runs_path = options.runs_path.empty() ? plan.output_dir / "runs.jsonl" : options.runs_path;
  if (summary.runs_path.has_parent_path()) fs::create_directories(summary.runs_path.parent_path());
  fs::create_directories(plan.output_dir);

  std::set<std::string> done;
  if (options.resume && fs::exists(summary.runs_path)) {
    for (const auto& r : read_records(summary.runs_path, true)) done.insert(r.key());
  } else {
    std::ofstream truncate(summary.runs_path, std::ios::trunc);
    if (!truncate) throw IoError("cannot write " + summary.runs_path.string());
  }

  std::vector<Cell> cells = plan_cells(plan);
  for (auto& c : cells) {
    const auto before = c.pending.size();
    std::erase_if(c.pending, [&](const RunRecord& r) { return done.count(r.key()) > 0; });
    summary.skipped += before - c.pending.size();
  }
  std::erase_if(cells, [](const Cell& c) { return c.pending.empty(); });
  summary.cells_computed = cells.size();

  std::ofstream os(summary.runs_path, std::ios::app | std::ios::binary);
  if (!os) throw IoError("cannot append to " + summary.runs_path.string());

  const std::size_t n = cells.size();
  std::vector<std::optional<std::vector<RunRecord>>> results(n);
  std::mutex mutex, log_mutex;
  std::condition_variable ready;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      auto recs = compute_cell(plan, cells[i], options.traces, options.log, log_mutex);
      {
        std::lock_guard<std::mutex> lock(mutex);
        results[i] = std::move(recs);
      }
      ready.notify_all();
    }
  };
  const std::size_t nthreads = std::min(thread_count(options.threads), std::max<std::size_t>(n, 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < nthreads; ++t) pool.emplace_back(worker);

  // Records go out in grid order whatever order the cells finish in.
  for (std::size_t i = 0; i < n; ++i) {
    if (nthreads == 1) {
      results[i] = compute_cell(plan, cells[i], options.traces, options.log, log_mutex);
    } else {
      std::unique_lock<std::mutex> lock(mutex);
      ready.wait(lock, [&] { return results[i].has_value(); });
    }
    std::vector<RunRecord> recs;
    {
      std::lock_guard<std::mutex> lock(mutex);
      recs = std::move(*results[i]);
      results[i].reset();
    }
    for (const auto& r : recs) {
      os << record_to_json(r).dump() << '\n';
      os.flush();
      if (!os) throw IoError("write to " + summary.runs_path.string() + " failed");
      ++summary.written;
      if (!r.ok) ++summary.failed;
      if (options.log) {
        std::lock_guard<std::mutex> lock(log_mutex);
        *options.log << (r.ok ? "ok     " : "FAILED ") << r.key();
        if (r.ok) {
          char buf[64];
          std::snprintf(buf, sizeof buf, "  bal_acc=%.4f", r.metrics->balanced_accuracy);
          *options.log << buf;
        } else {
          *options.log << "  " << r.error_kind << ": " << r.error_message;
        }
        *options.log << '\n';
      }
    }
  }
  for (auto& t : pool) t.join();
  return summary;
}

std::vector<fs::path> finetune_grid(const ExperimentPlan& plan, std::ostream* log) {
  plan.validate();
  std::vector<fs::path> out;
  for (const auto& s : plan.suites)
    for (const auto& e : plan.encoders)
      for (auto seed : plan.seeds) {
        prepare_cell(plan, s, e, seed, log);
        out.push_back(checkpoint_path(plan, s.name, e.name, seed));
      }
  return out;
}

// ---------------------------------------------------------------- report

namespace {

std::optional<double> metric_value(const MetricReport& m, const std::string& name) {
  if (name == "accuracy") return m.accuracy;
  if (name == "balanced_accuracy") return m.balanced_accuracy;
  if (name == "cohen_kappa") return m.cohen_kappa;
  if (name == "weighted_f1") return m.weighted_f1;
  if (name == "roc_auc") return m.roc_auc;
  if (name == "pr_auc") return m.pr_auc;
  return std::nullopt;
}

struct Accumulator {
  ReportRow row;
  std::map<std::string, std::vector<double>> cells;
};

std::string row_key(const RunRecord& r, ReportMode mode) {
  std::string k = r.suite + "|" + r.encoder + "|" + r.method;
  if (mode == ReportMode::per_batch_size) k += "|" + std::to_string(r.batch_size);
  return k;
}

void add(std::vector<Accumulator>& acc, std::map<std::string, std::size_t>& index, const RunRecord& r,
         ReportMode mode, const std::string& metric, double value) {
  const std::string k = row_key(r, mode);
  auto it = index.find(k);
  if (it == index.end()) {
    Accumulator a;
    a.row.suite = r.suite;
    a.row.encoder = r.encoder;
    a.row.method = r.method;
    if (mode == ReportMode::per_batch_size) a.row.batch_size = r.batch_size;
    it = index.emplace(k, acc.size()).first;
    acc.push_back(std::move(a));
  }
  acc[it->second].cells[metric].push_back(value);
}

std::vector<ReportRow> finish(std::vector<Accumulator> acc) {
  std::vector<ReportRow> rows;
  for (auto& a : acc) {
    for (auto& [metric, cells] : a.cells) a.row.metrics[metric] = aggregate(cells);
    rows.push_back(std::move(a.row));
  }
  return rows;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string table_csv(const std::vector<ReportRow>& rows, ReportMode mode, bool signed_values) {
  std::ostringstream os;
  os << "suite,encoder,method";
  if (mode == ReportMode::per_batch_size) os << ",batch_size";
  os << ",n";
  for (const char* m : kReportMetrics) os << ',' << m;
  os << '\n';
  for (const auto& r : rows) {
    os << csv_field(r.suite) << ',' << csv_field(r.encoder) << ',' << csv_field(r.method);
    if (mode == ReportMode::per_batch_size) os << ',' << (r.batch_size ? std::to_string(*r.batch_size) : "");
    auto ba = r.metrics.find("balanced_accuracy");
    os << ',' << (ba == r.metrics.end() ? 0 : ba->second.n);
    for (const char* m : kReportMetrics) {
      os << ',';
      auto it = r.metrics.find(m);
      if (it != r.metrics.end()) os << (signed_values ? format_signed(it->second) : format_plain(it->second));
    }
    os << '\n';
  }
  return os.str();
}

json rows_json(const std::vector<ReportRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    json j = {{"suite", r.suite}, {"encoder", r.encoder}, {"method", r.method}};
    if (r.batch_size) j["batch_size"] = *r.batch_size;
    json ms = json::object();
    for (const auto& [name, a] : r.metrics) ms[name] = {{"mean", a.mean}, {"std", a.std}, {"n", a.n}};
    j["metrics"] = std::move(ms);
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace

Report build_report(std::span<const RunRecord> records, ReportMode mode) {
  Report rep;
  rep.mode = mode;
  std::map<std::string, const RunRecord*> baselines;
  std::set<std::string> keys;
  for (const auto& r : records) {
    if (!keys.insert(r.key()).second) throw ReportError("duplicate run record " + r.key());
    if (r.method_kind == Method::no_tta) baselines[r.cell_key()] = &r;
  }

  std::vector<Accumulator> deltas, absolute;
  std::map<std::string, std::size_t> delta_index, absolute_index;
  std::vector<std::string> orphans;
  for (const auto& r : records) {
    if (!r.ok) {
      rep.failed.push_back(r.key());
      continue;
    }
    if (!r.metrics) throw ReportError("record " + r.key() + " is ok but has no metrics");
    auto it = baselines.find(r.cell_key());
    std::string why;
    if (it == baselines.end()) {
      why = "no No-TTA record";
    } else if (!it->second->ok) {
      why = "No-TTA record failed";
    } else if (it->second->checkpoint_hash != r.checkpoint_hash) {
      why = "checkpoint hash differs from No-TTA";
    } else if (it->second->partition_hash != r.partition_hash) {
      why = "batch partition differs from No-TTA";
    }
    if (!why.empty()) {
      orphans.push_back(r.key() + " (" + why + ")");
      continue;
    }
    const MetricReport& base = *it->second->metrics;
    for (const char* name : kReportMetrics) {
      const auto v = metric_value(*r.metrics, name);
      if (!v) continue;
      add(absolute, absolute_index, r, mode, name, *v);
      if (const auto b = metric_value(base, name)) add(deltas, delta_index, r, mode, name, delta(*v, *b));
    }
  }
  if (!orphans.empty()) {
    std::string msg = std::to_string(orphans.size()) + " unmatched record(s):";
    for (const auto& o : orphans) msg += "\n  " + o;
    throw ReportError(msg);
  }
  rep.deltas = finish(std::move(deltas));
  rep.absolute = finish(std::move(absolute));
  return rep;
}

std::string format_signed(const Aggregate& a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%+.3f \xC2\xB1 %.3f", a.mean, a.std);
  std::string s = buf;
  if (s.rfind("-0.000 ", 0) == 0) s[0] = '+';
  return s;
}

std::string format_plain(const Aggregate& a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f \xC2\xB1 %.3f", a.mean, a.std);
  return buf;
}

std::string deltas_csv(const Report& r) { return table_csv(r.deltas, r.mode, true); }
std::string absolute_csv(const Report& r) { return table_csv(r.absolute, r.mode, false); }

json summary_json(const Report& r) {
  return {{"mode", to_string(r.mode)},
          {"version", kVersion},
          {"deltas", rows_json(r.deltas)},
          {"absolute", rows_json(r.absolute)},
          {"failed", r.failed}};
}

void write_report(const fs::path& dir, const Report& r) {
  fs::create_directories(dir);
  auto put = [&](const std::string& name, const std::string& text) {
    std::ofstream os(dir / name, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / name).string());
    os << text;
  };
  put("deltas.csv", deltas_csv(r));
  put("absolute.csv", absolute_csv(r));
  put("summary.json", summary_json(r).dump(2) + "\n");
}

}  // namespace neuroadapt
