#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"

#include "neuroadapt/harness.hpp"

using namespace neuroadapt;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("neuroadapt_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

json small_suite(const std::string& kind) {
  return {{"kind", kind}, {"name", kind}, {"train_records", 200}, {"val_records", 60}, {"test_records", 150}};
}

json small_plan(const fs::path& out, json methods) {
  return {{"output_dir", out.generic_string()},
          {"seeds", {0, 1}},
          {"batch_sizes", {64}},
          {"suites", {small_suite("label_shift")}},
          {"finetune", {{"epochs", 2}}},
          {"methods", std::move(methods)}};
}

std::string config_error(const json& j) {
  try {
    plan_from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

RunRecord fake(const std::string& suite, std::uint64_t seed, const std::string& method, double bal) {
  RunRecord r;
  r.suite = suite;
  r.encoder = "identity";
  r.seed = seed;
  r.batch_size = 64;
  r.method = method;
  r.method_kind = method == "no_tta" ? Method::no_tta : Method::tent;
  r.checkpoint_hash = "c" + std::to_string(seed);
  r.partition_hash = "p";
  MetricReport m;
  m.accuracy = m.balanced_accuracy = m.cohen_kappa = m.weighted_f1 = bal;
  r.metrics = m;
  return r;
}

}  // namespace

TEST_CASE("config validation names the offending field") {
  const json suites = {small_suite("label_shift")};
  CHECK(config_error({{"suites", suites}, {"methods", json::array()}}) == "$.methods: empty method list");
  CHECK(config_error({{"suites", suites}}).rfind("$.methods", 0) == 0);
  CHECK(config_error({{"suites", suites}, {"methods", {"tent"}}, {"bogus", 1}}).find("$.bogus") != std::string::npos);
  CHECK(config_error({{"suites", suites}, {"methods", {{{"method", "tent"}, {"tent", {{"lr", -1.0}}}}}}}) != "");
  CHECK(config_error({{"suites", suites}, {"methods", {"tent", "tent"}}}).find("$.methods") != std::string::npos);
  CHECK(config_error({{"suites", suites}, {"methods", {"nope"}}}).find("$.methods[0]") != std::string::npos);
}

TEST_CASE("minimal config fills documented defaults") {
  const auto p = plan_from_json({{"suites", {small_suite("label_shift")}}, {"methods", {"tent", "shot", "t3a"}}});
  CHECK(p.seeds == std::vector<std::uint64_t>{0, 1, 2, 3, 4});
  CHECK(p.batch_sizes == std::vector<std::size_t>{64, 128, 256});
  CHECK(p.finetune.lr == 1e-3);
  CHECK(p.finetune.epochs == 10);
  REQUIRE(p.methods.size() == 4);
  CHECK(p.methods[0].adapter.method == Method::no_tta);
  CHECK(p.methods[1].adapter.tent.lr == 1e-3);
  CHECK(p.methods[3].adapter.t3a.filter_k == 20);

  const auto back = plan_from_json(plan_to_json(p));
  CHECK(plan_to_json(back) == plan_to_json(p));
}

TEST_CASE("grid cardinality") {
  auto p = plan_from_json({{"suites", {small_suite("label_shift"), small_suite("covariate_shift")}},
                           {"methods", {"tent", "shot", "t3a"}}});
  CHECK(p.cardinality() == 2 * 1 * 4 * 3 * 5);
  CHECK(p.cardinality() == 120);
}

TEST_CASE("no-TTA-only plan gives zero deltas and resume skips finished records") {
  const fs::path out = scratch("baseline_only");
  const auto plan = plan_from_json(small_plan(out, {"no_tta"}));
  const auto s = run_experiment(plan);
  CHECK(s.written == plan.cardinality());
  CHECK(s.failed == 0);
  const auto recs = read_records(s.runs_path);
  const auto rep = build_report(recs);
  REQUIRE(!rep.deltas.empty());
  for (const auto& row : rep.deltas)
    for (const auto& [name, agg] : row.metrics) {
      CHECK(agg.mean == 0.0);
      CHECK(format_signed(agg) == "+0.000 \xC2\xB1 0.000");
    }

  RunOptions resume;
  resume.resume = true;
  const auto again = run_experiment(plan, resume);
  CHECK(again.written == 0);
  CHECK(again.skipped == plan.cardinality());
}

TEST_CASE("adaptation runs keep the encoder and record provenance") {
  const fs::path out = scratch("full");
  const auto plan = plan_from_json(small_plan(out, {"tent", "shot", "t3a"}));
  const auto s = run_experiment(plan);
  CHECK(s.written == plan.cardinality());
  CHECK(s.cells_computed == 2);
  const auto recs = read_records(s.runs_path);
  REQUIRE(recs.size() == plan.cardinality());
  for (const auto& r : recs) {
    CHECK(r.ok);
    CHECK(r.encoder_hash_before == r.encoder_hash_after);
    CHECK(r.n_target == 150);
    CHECK(!r.checkpoint_hash.empty());
    if (r.method == "tent") CHECK(r.non_norm_hash_before == r.non_norm_hash_after);
    if (r.method == "shot") CHECK(r.classifier_hash_before == r.classifier_hash_after);
  }
  CHECK_NOTHROW(build_report(recs));

  // the same plan in a fresh directory reproduces the records
  const fs::path out2 = scratch("full_again");
  auto j = plan_to_json(plan);
  j["output_dir"] = out2.generic_string();
  const auto s2 = run_experiment(plan_from_json(j));
  const auto recs2 = read_records(s2.runs_path);
  REQUIRE(recs2.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(recs2[i].key() == recs[i].key());
    CHECK(metrics_to_json(*recs2[i].metrics) == metrics_to_json(*recs[i].metrics));
  }
}

TEST_CASE("interrupted runs resume to the same records") {
  const fs::path out = scratch("crash");
  const auto plan = plan_from_json(small_plan(out, {"tent"}));
  const auto full = run_experiment(plan);
  const std::string complete = slurp(full.runs_path);

  // keep the first record and half of the second, as an interrupted append would
  const auto first_end = complete.find('\n') + 1;
  const auto second_end = complete.find('\n', first_end) + 1;
  {
    std::ofstream os(full.runs_path, std::ios::binary | std::ios::trunc);
    os << complete.substr(0, first_end + (second_end - first_end) / 2);
  }
  CHECK(read_records(full.runs_path).size() == 1);
  RunOptions resume;
  resume.resume = true;
  const auto s = run_experiment(plan, resume);
  CHECK(s.skipped == 1);
  CHECK(s.written == plan.cardinality() - 1);

  std::vector<std::string> a, b;
  for (const auto& r : read_records(full.runs_path)) a.push_back(r.key() + metrics_to_json(*r.metrics).dump());
  std::istringstream is(complete);
  for (std::string line; std::getline(is, line);) {
    const auto r = record_from_json(json::parse(line));
    b.push_back(r.key() + metrics_to_json(*r.metrics).dump());
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
}

TEST_CASE("report aggregates deltas over seeds and rejects orphans") {
  const std::vector<double> base{0.60, 0.55, 0.70}, tta{0.80, 0.60, 0.65};
  std::vector<RunRecord> recs;
  std::vector<double> d;
  for (std::uint64_t s = 0; s < 3; ++s) {
    recs.push_back(fake("x", s, "no_tta", base[s]));
    recs.push_back(fake("x", s, "tent", tta[s]));
    d.push_back(tta[s] - base[s]);
  }
  const auto rep = build_report(recs);
  const ReportRow* row = nullptr;
  for (const auto& r : rep.deltas)
    if (r.method == "tent") row = &r;
  REQUIRE(row);
  const auto& agg = row->metrics.at("balanced_accuracy");
  CHECK(agg.n == 3);
  CHECK(agg.mean == doctest::Approx(oracle::sample_mean(d)).epsilon(1e-12));
  CHECK(agg.std == doctest::Approx(oracle::sample_std(d)).epsilon(1e-12));
  CHECK(deltas_csv(rep).find(format_signed(agg)) != std::string::npos);

  auto orphan = recs;
  orphan.push_back(fake("y", 0, "tent", 0.5));
  CHECK_THROWS_AS(build_report(orphan), ReportError);
  auto mismatched = recs;
  mismatched[1].checkpoint_hash = "other";
  try {
    build_report(mismatched);
    FAIL("expected ReportError");
  } catch (const ReportError& e) {
    CHECK(std::string(e.what()).find("x|identity|0|64|tent") != std::string::npos);
  }
  auto dup = recs;
  dup.push_back(recs[0]);
  CHECK_THROWS_AS(build_report(dup), ReportError);
}

TEST_CASE("format_signed") {
  CHECK(format_signed({0.187, 0.035, 5, false}) == "+0.187 \xC2\xB1 0.035");
  CHECK(format_signed({-0.108, 0.02, 5, false}) == "-0.108 \xC2\xB1 0.020");
  CHECK(format_signed({-0.0001, 0.0, 5, false}) == "+0.000 \xC2\xB1 0.000");
  CHECK(format_signed({-0.0, 0.0, 1, true}) == "+0.000 \xC2\xB1 0.000");
  CHECK(format_plain({0.5, 0.25, 2, false}) == "0.500 \xC2\xB1 0.250");
}
