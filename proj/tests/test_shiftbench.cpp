#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "oracles.hpp"

#include "neuroadapt/finetune.hpp"
#include "neuroadapt/metrics.hpp"
#include "neuroadapt/shiftbench.hpp"

using namespace neuroadapt;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("neuroadapt_test_shiftbench_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

DatasetManifest tiny_manifest(std::size_t n, std::size_t C, std::size_t T) {
  DatasetManifest m;
  m.channels = C;
  m.samples = T;
  for (std::size_t i = 0; i < n; ++i)
    m.records.push_back({"r" + std::to_string(i), "s" + std::to_string(i % 3), static_cast<int>(i % 2), Split::test, i});
  return m;
}

std::vector<float> ramp(std::size_t n) {
  std::vector<float> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<float>(i) * 0.25f - 3.0f;
  return v;
}

}  // namespace

TEST_CASE("normalize_p95 examples") {
  std::vector<float> zero(10, 0.0f);
  normalize_p95(zero, 1, 10);
  for (float v : zero) CHECK(v == 0.0f);

  std::vector<float> cst(8, -2.5f);
  normalize_p95(cst, 1, 8);
  for (float v : cst) CHECK(v == -1.0f);

  std::vector<float> hundred(100);
  for (std::size_t i = 0; i < 100; ++i) hundred[i] = static_cast<float>(i + 1);
  std::vector<double> oracle_in(hundred.begin(), hundred.end());
  CHECK(oracle::percentile_linear(oracle_in, 95) == doctest::Approx(95.05).epsilon(1e-12));
  CHECK(percentile_abs(hundred, 0.95) == doctest::Approx(95.05).epsilon(1e-12));
  normalize_p95(hundred, 1, 100);
  CHECK(hundred[99] == doctest::Approx(100.0 / 95.05).epsilon(1e-6));

  CHECK_THROWS_AS(normalize_p95(hundred, 3, 100), ShapeError);
}

TEST_CASE("normalize_p95 is per channel and scale invariant") {
  for (std::uint64_t t = 0; t < 50; ++t) {
    Rng rng = Rng::derive(t, "p95");
    const std::size_t C = 1 + rng.below(4), T = 1 + rng.below(50);
    std::vector<float> x(C * T);
    for (auto& v : x) v = static_cast<float>(rng.normal() * (1 + rng.below(5)));
    const double alpha = 0.01 + 10 * rng.uniform();
    std::vector<float> y = x;
    for (auto& v : y) v = static_cast<float>(v * alpha);
    normalize_p95(x, C, T);
    normalize_p95(y, C, T);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::fabs(x[i] - y[i]) <= 1e-6 * std::max(1.0f, std::fabs(x[i])));
  }
}

TEST_CASE("dataset round trip and corruption") {
  const fs::path dir = scratch("roundtrip");
  const auto m = tiny_manifest(5, 2, 3);
  const auto data = ramp(5 * 6);
  const auto path = write_dataset(dir, "d", m, data);
  const auto reader = DatasetReader::open(path);
  CHECK(reader.manifest().records == m.records);
  const std::vector<std::size_t> all{0, 1, 2, 3, 4};
  const WindowBatch b = reader.read(all);
  CHECK(b.data == data);
  CHECK(b.labels == std::vector<int>{0, 1, 0, 1, 0});
  CHECK(reader.reads(Split::test) == 5);

  const fs::path nadb = reader.data_path();
  const std::string bytes = slurp(nadb);
  CHECK(bytes.substr(0, 4) == "NADB");
  CHECK(bytes.size() == kDatasetHeaderBytes + 5 * 6 * 4);

  {
    std::ofstream os(nadb, std::ios::binary | std::ios::trunc);
    os << bytes.substr(0, bytes.size() - 5);
  }
  try {
    DatasetReader::open(path);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(std::to_string(bytes.size() - 5)) != std::string::npos);
    CHECK(msg.find(std::to_string(bytes.size())) != std::string::npos);
  }

  {
    std::ofstream os(nadb, std::ios::binary | std::ios::trunc);
    os << "XADB" << bytes.substr(4);
  }
  CHECK_THROWS_AS(DatasetReader::open(path), IoError);

  // manifest lists 6 records but the data file holds 5
  auto longer = m;
  longer.records.push_back({"r5", "s9", 1, Split::test, 5});
  {
    std::ofstream os(nadb, std::ios::binary | std::ios::trunc);
    os << bytes;
  }
  {
    std::ofstream os(path, std::ios::trunc);
    auto j = manifest_to_json(longer);
    j["data_file"] = nadb.filename().string();
    os << j.dump();
  }
  CHECK_THROWS_AS(DatasetReader::open(path), IoError);
  CHECK_THROWS_AS(write_dataset(dir, "short", longer, data), DataError);
}

TEST_CASE("manifest validation") {
  auto m = tiny_manifest(4, 1, 1);
  m.records[1].split = Split::train;  // subject s1 now in train and... only train
  CHECK_NOTHROW(m.validate());
  m.records[0].split = Split::train;
  m.records[3].split = Split::test;  // s0 in train (r0) and test (r3)
  CHECK(m.leaked_subjects() == std::vector<std::string>{"s0"});
  CHECK_THROWS_AS(m.validate(), DataError);
  CHECK_THROWS_AS(manifest_from_json(nlohmann::json{{"version", 99}}), DataError);
}

TEST_CASE("batch partition and iteration") {
  std::vector<std::size_t> idx(130);
  for (std::size_t i = 0; i < 130; ++i) idx[i] = i;
  const auto seq = batch_partition(idx, 64, BatchOrder::sequential);
  REQUIRE(seq.size() == 3);
  CHECK(seq[0].size() == 64);
  CHECK(seq[1].size() == 64);
  CHECK(seq[2].size() == 2);
  CHECK(seq[2][1] == 129);
  CHECK(batch_partition(idx, 64, BatchOrder::sequential) == seq);

  const auto a = batch_partition(idx, 64, BatchOrder::shuffled, 1);
  CHECK(batch_partition(idx, 64, BatchOrder::shuffled, 1) == a);
  CHECK(batch_partition(idx, 64, BatchOrder::shuffled, 2) != a);
  std::set<std::size_t> seen;
  for (const auto& b : a) seen.insert(b.begin(), b.end());
  CHECK(seen.size() == 130);
  CHECK_THROWS_AS(batch_partition(idx, 0, BatchOrder::sequential), ConfigError);

  const fs::path dir = scratch("iter");
  const auto path = write_dataset(dir, "d", tiny_manifest(130, 1, 2), ramp(260));
  const auto reader = DatasetReader::open(path);
  BatchIterator it1(reader, Split::test, 64, BatchOrder::sequential), it2(reader, Split::test, 64, BatchOrder::sequential);
  CHECK(it1.num_batches() == 3);
  std::size_t total = 0;
  while (auto b = it1.next()) {
    const auto c = it2.next();
    REQUIRE(c);
    CHECK(b->data == c->data);
    total += b->size();
  }
  CHECK(total == 130);
  CHECK_THROWS_AS(BatchIterator(reader, Split::train, 64, BatchOrder::sequential), DataError);
}

TEST_CASE("suite generation is deterministic and subject-disjoint") {
  for (auto kind : {SuiteKind::subject_shift, SuiteKind::label_shift, SuiteKind::covariate_shift, SuiteKind::modality_shift}) {
    SuiteSpec spec = SuiteSpec::preset(kind);
    spec.train_records = 200;
    spec.val_records = 50;
    spec.test_records = 100;
    spec.seed = 4;
    const auto pa = write_suite(scratch(std::string("det_a_") + to_string(kind)), generate_suite(spec));
    const auto pb = write_suite(scratch(std::string("det_b_") + to_string(kind)), generate_suite(spec));
    const auto ra = DatasetReader::open(pa.source), rb = DatasetReader::open(pb.source);
    CHECK(slurp(ra.data_path()) == slurp(rb.data_path()));
    const auto ta = DatasetReader::open(pa.target), tb = DatasetReader::open(pb.target);
    CHECK(slurp(ta.data_path()) == slurp(tb.data_path()));

    std::set<std::string> src_subjects, tgt_subjects;
    for (const auto& r : ra.manifest().records) src_subjects.insert(r.subject_id);
    for (const auto& r : ta.manifest().records) tgt_subjects.insert(r.subject_id);
    for (const auto& s : tgt_subjects) CHECK(src_subjects.count(s) == 0);
    CHECK(ra.manifest().leaked_subjects().empty());
    CHECK(ta.manifest().records_in(Split::test).size() == 100);
    CHECK(ra.manifest().records_in(Split::test).empty());
  }
}

TEST_CASE("suite spec validation") {
  SuiteSpec s;
  s.target_priors = {0.5, 0.6};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.target_priors = {0.5};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SuiteSpec{};
  s.channel_gain = {1.0};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_THROWS_AS(suite_from_json(nlohmann::json{{"kind", "label_shift"}, {"bogus", 1}}), ConfigError);
  const auto round = suite_from_json(suite_to_json(SuiteSpec::preset(SuiteKind::covariate_shift)));
  CHECK(suite_to_json(round) == suite_to_json(SuiteSpec::preset(SuiteKind::covariate_shift)));
}

TEST_CASE("label shift target priors are 0.9 and 0.1") {
  SuiteSpec spec = SuiteSpec::preset(SuiteKind::label_shift);
  REQUIRE(spec.resolved_target_priors() == std::vector<double>{0.9, 0.1});
  spec.test_records = 4000;
  spec.seed = 8;
  const auto data = generate_suite(spec);
  double ones = 0, n = 0;
  for (const auto& r : data.target.records) {
    ones += *r.label == 1;
    n += 1;
  }
  // 99% binomial interval around 0.1
  const double half = 2.576 * std::sqrt(0.1 * 0.9 / n);
  CHECK(std::fabs(ones / n - 0.1) <= half);
}

TEST_CASE("null-shift suites: target metrics track source validation") {
  std::vector<double> gaps;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SuiteSpec spec;
    spec.kind = SuiteKind::subject_shift;
    spec.subject_sigma = 0;
    spec.seed = seed;
    const auto paths = write_suite(scratch("null_" + std::to_string(seed)), generate_suite(spec));
    const auto src = DatasetReader::open(paths.source), tgt = DatasetReader::open(paths.target);
    EncoderSpec es;
    es.channels = spec.channels;
    const Encoder enc(es);
    FinetuneConfig fc;
    fc.seed = seed;
    const auto val = load_split(src, Split::val);
    const auto ckpt = train_head(fc, enc, load_split(src, Split::train), val).checkpoint;
    const auto test = load_split(tgt, Split::test);
    auto bal = [&](const LabeledSplit& s) {
      return evaluate(PredictionSet::from_probs(*s.batch.labels, predict_proba(ckpt.head, enc, s.batch)), 2)
          .balanced_accuracy;
    };
    gaps.push_back(std::fabs(bal(test) - bal(val)));
  }
  for (double g : gaps) CHECK(g <= 0.03);
}
