// neuroadapt command line: generate | finetune | adapt | report | selftest

#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "neuroadapt/errors.hpp"
#include "neuroadapt/harness.hpp"
#include "neuroadapt/selftest.hpp"
#include "neuroadapt/shiftbench.hpp"

namespace na = neuroadapt;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitPartial = 2;

na::ExperimentPlan plan_for(const std::string& config, const std::string& out) {
  na::ExperimentPlan plan = na::load_config(config);
  if (!out.empty()) plan.output_dir = out;
  return plan;
}

int cmd_generate(const std::string& kind, const std::string& spec_path, std::uint64_t seed, const std::string& out) {
  nlohmann::json j = nlohmann::json::object();
  if (!spec_path.empty()) {
    std::ifstream is(spec_path);
    if (!is) throw na::IoError("cannot open spec " + spec_path);
    j = nlohmann::json::parse(is);
  }
  if (!kind.empty()) {
    if (j.contains("kind") && j["kind"] != kind) throw na::ConfigError("--suite disagrees with the spec's kind");
    j["kind"] = kind;
  }
  j["seed"] = seed;
  const na::SuiteSpec spec = na::suite_from_json(j);
  const auto paths = na::write_suite(out, na::generate_suite(spec));
  std::cout << "source " << paths.source.string() << "\ntarget " << paths.target.string() << '\n';
  return kExitOk;
}

int cmd_finetune(const std::string& config, const std::string& out) {
  const auto plan = plan_for(config, out);
  for (const auto& p : na::finetune_grid(plan, &std::cerr)) std::cout << p.string() << '\n';
  return kExitOk;
}

int cmd_adapt(const std::string& config, const std::string& out, bool resume, std::size_t threads, bool dry_run,
              bool traces) {
  const auto plan = plan_for(config, out);
  if (dry_run) {
    std::cout << na::plan_to_json(plan).dump(2) << '\n';
    std::cerr << plan.cardinality() << " run records\n";
    return kExitOk;
  }
  na::RunOptions opts;
  opts.resume = resume;
  opts.threads = threads;
  opts.traces = traces;
  opts.log = &std::cerr;
  const auto summary = na::run_experiment(plan, opts);
  {
    std::ofstream os(plan.output_dir / "resolved_config.json", std::ios::trunc);
    os << na::plan_to_json(plan).dump(2) << '\n';
  }
  std::cerr << summary.written << " written, " << summary.skipped << " already present, " << summary.failed
            << " failed -> " << summary.runs_path.string() << '\n';
  return summary.failed > 0 ? kExitPartial : kExitOk;
}

int cmd_report(const std::string& runs, const std::string& out, bool per_batch_size) {
  const auto records = na::read_records(runs);
  const auto report =
      na::build_report(records, per_batch_size ? na::ReportMode::per_batch_size : na::ReportMode::pooled);
  na::write_report(out, report);
  std::cout << na::deltas_csv(report);
  if (!report.failed.empty()) std::cerr << report.failed.size() << " failed record(s) left out\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time adaptation benchmark for frozen-encoder classifiers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", na::kVersion);

  std::string kind, spec, out, config, runs;
  std::uint64_t seed = 0;
  bool resume = false, per_bs = false, dry_run = false, traces = false;
  std::size_t threads = 0;

  auto* gen = app.add_subcommand("generate", "write a synthetic shift suite");
  gen->add_option("--suite", kind, "subject_shift | label_shift | covariate_shift | modality_shift");
  gen->add_option("--spec", spec, "suite spec JSON");
  gen->add_option("--seed", seed, "generator seed");
  gen->add_option("--out", out, "output directory")->required();

  auto* ft = app.add_subcommand("finetune", "train one head per (suite, encoder, seed)");
  ft->add_option("--config", config, "experiment config")->required()->check(CLI::ExistingFile);
  ft->add_option("--out", out, "override output_dir");

  auto* ad = app.add_subcommand("adapt", "run the experiment grid");
  ad->add_option("--config", config, "experiment config")->required()->check(CLI::ExistingFile);
  ad->add_option("--out", out, "override output_dir");
  ad->add_flag("--resume", resume, "skip records already in runs.jsonl");
  ad->add_option("--threads", threads, "parallel cells (default NEUROADAPT_THREADS or all cores)");
  ad->add_flag("--dry-run", dry_run, "print the resolved plan and exit");
  ad->add_flag("--trace", traces, "write per-batch diagnostics under <output_dir>/traces");

  auto* rep = app.add_subcommand("report", "delta tables from a runs file");
  rep->add_option("--runs", runs, "runs.jsonl")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", out, "output directory")->required();
  rep->add_flag("--per-batch-size", per_bs, "one row per batch size instead of pooling");

  auto* st = app.add_subcommand("selftest", "run built-in consistency checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*gen) return cmd_generate(kind, spec, seed, out);
    if (*ft) return cmd_finetune(config, out);
    if (*ad) return cmd_adapt(config, out, resume, threads, dry_run, traces);
    if (*rep) return cmd_report(runs, out, per_bs);
    if (*st) return na::run_selftest(std::cout) == 0 ? kExitOk : kExitInvalid;
  } catch (const na::Error& e) {
    std::cerr << "error [" << e.kind() << "]: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvalid;
  }
  return kExitOk;
}
