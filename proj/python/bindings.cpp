#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "neuroadapt/errors.hpp"
#include "neuroadapt/harness.hpp"
#include "neuroadapt/metrics.hpp"
#include "neuroadapt/rng.hpp"
#include "neuroadapt/selftest.hpp"
#include "neuroadapt/shiftbench.hpp"

namespace py = pybind11;
namespace na = neuroadapt;
using nlohmann::json;

namespace {

// Dicts cross the boundary as JSON text; the Python side wraps these.
std::pair<std::string, std::string> generate(const std::string& spec_json, const std::string& out_dir) {
  const auto spec = na::suite_from_json(json::parse(spec_json));
  na::SuitePaths p;
  {
    py::gil_scoped_release nogil;
    p = na::write_suite(out_dir, na::generate_suite(spec));
  }
  return {p.source.string(), p.target.string()};
}

py::dict run(const std::string& plan_json, bool resume, std::size_t threads) {
  const auto plan = na::plan_from_json(json::parse(plan_json));
  na::RunOptions opt;
  opt.resume = resume;
  opt.threads = threads;
  na::RunSummary s;
  {
    py::gil_scoped_release nogil;
    s = na::run_experiment(plan, opt);
  }
  py::dict d;
  d["written"] = s.written;
  d["skipped"] = s.skipped;
  d["failed"] = s.failed;
  d["runs_path"] = s.runs_path.string();
  return d;
}

std::string report(const std::string& runs_path, const std::string& mode, const std::string& out_dir) {
  const auto recs = na::read_records(runs_path);
  const auto rep =
      na::build_report(recs, mode == "per_batch_size" ? na::ReportMode::per_batch_size : na::ReportMode::pooled);
  if (!out_dir.empty()) na::write_report(out_dir, rep);
  return na::summary_json(rep).dump();
}

std::string selftest() {
  std::ostringstream os;
  const int rc = na::run_selftest(os);
  if (rc != 0) throw na::ContractError("selftest failed:\n" + os.str());
  return os.str();
}

}  // namespace

PYBIND11_MODULE(_neuroadapt, m) {
  m.attr("__version__") = na::kVersion;

  auto base = py::register_exception<na::Error>(m, "Error");
  py::register_exception<na::ShapeError>(m, "ShapeError", base);
  py::register_exception<na::ContractError>(m, "ContractError", base);
  py::register_exception<na::ConfigError>(m, "ConfigError", base);
  py::register_exception<na::DataError>(m, "DataError", base);
  py::register_exception<na::IoError>(m, "IoError", base);
  py::register_exception<na::AdaptationError>(m, "AdaptationError", base);
  py::register_exception<na::UndefinedMetricError>(m, "UndefinedMetricError", base);
  py::register_exception<na::ReportError>(m, "ReportError", base);

  m.def("roc_auc", [](std::vector<double> s, std::vector<int> y) { return na::roc_auc(s, y); });
  m.def("pr_auc", [](std::vector<double> s, std::vector<int> y) { return na::pr_auc(s, y); });
  m.def(
      "class_metrics",
      [](std::vector<int> y, std::vector<int> p, std::size_t k) {
        const auto cm = na::confusion_matrix(y, p, k);
        py::dict d;
        d["accuracy"] = na::accuracy(cm);
        d["balanced_accuracy"] = na::balanced_accuracy(cm);
        d["cohen_kappa"] = na::cohen_kappa(cm);
        d["weighted_f1"] = na::weighted_f1(cm);
        return d;
      },
      py::arg("truth"), py::arg("pred"), py::arg("num_classes") = 2);
  m.def("aggregate", [](std::vector<double> v) {
    const auto a = na::aggregate(v);
    return py::make_tuple(a.mean, a.std, a.n);
  });
  m.def("format_signed", [](double mean, double sd) { return na::format_signed({mean, sd, 2, false}); });

  m.def("rng_u64", [](std::uint64_t key, std::size_t n) {
    na::Rng r(key);
    std::vector<std::uint64_t> out(n);
    for (auto& v : out) v = r.next_u64();
    return out;
  });

  m.def("suite_preset", [](const std::string& kind) {
    return na::suite_to_json(na::SuiteSpec::preset(na::suite_kind_from_string(kind))).dump();
  });
  m.def("generate_suite", &generate, py::arg("spec_json"), py::arg("out_dir"));
  m.def("run_experiment", &run, py::arg("plan_json"), py::arg("resume") = false, py::arg("threads") = 0);
  m.def("report", &report, py::arg("runs_path"), py::arg("mode") = "pooled", py::arg("out_dir") = "");
  m.def("selftest", &selftest);
}
