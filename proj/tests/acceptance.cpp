// Acceptance suite: one PASS/FAIL line per criterion.
//
// Criteria listed in kKnownRed are reported as FAIL when they fail but do not
// fail the process; the measured numbers are printed either way.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "oracles.hpp"

#include "neuroadapt/finetune.hpp"
#include "neuroadapt/harness.hpp"
#include "neuroadapt/kernels.hpp"
#include "neuroadapt/metrics.hpp"
#include "neuroadapt/model.hpp"
#include "neuroadapt/shiftbench.hpp"
#include "neuroadapt/tta.hpp"

using namespace neuroadapt;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ------------------------------------------------------------ tolerances

constexpr std::size_t kGradInstances = 120;       // per kernel, >= 100
constexpr double kAucTol = 1e-12;
constexpr double kMetricTol = 1e-12;  // same formulas, different summation order
constexpr std::size_t kAucInstances = 1000;
constexpr std::size_t kAucMaxN = 200;
constexpr double kDeltaAnchorTol = 1e-9;
constexpr std::size_t kT3AInputs = 10000;
constexpr std::size_t kDescentInstances = 100;
constexpr double kDescentLr = 1e-4;
constexpr double kDescentRequired = 0.95;
constexpr double kCollapseLr = 1.0;
constexpr std::size_t kCollapseBatches = 200;
constexpr std::size_t kCollapseWindow = 20;       // final batches averaged
constexpr double kCollapseMarginal = 0.9;
constexpr std::size_t kShotSeedsRequired = 4;     // of 5
constexpr double kShotAmplifiedLr = 0.05;
constexpr double kNullShiftTol = 0.05;

const std::set<int> kKnownRed = {6, 7};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

fs::path work_dir() { return fs::current_path() / "acceptance_work"; }

std::map<std::string, std::vector<RunRecord>> g_runs;  // plan name -> records

const std::vector<RunRecord>& run_plan(const std::string& name, const json& config, bool traces = false,
                                       std::size_t threads = 1) {
  auto it = g_runs.find(name);
  if (it != g_runs.end()) return it->second;
  json cfg = config;
  cfg["output_dir"] = (work_dir() / name).string();
  fs::remove_all(work_dir() / name);
  const ExperimentPlan plan = plan_from_json(cfg);
  RunOptions opts;
  opts.traces = traces;
  opts.threads = threads;
  const RunSummary s = run_experiment(plan, opts);
  return g_runs[name] = read_records(s.runs_path);
}

ExperimentPlan plan_of(const std::string& name, const json& config) {
  json cfg = config;
  cfg["output_dir"] = (work_dir() / name).string();
  return plan_from_json(cfg);
}

const json kMainPlan = {
    {"suites",
     {{{"kind", "label_shift"}, {"name", "label_shift"}},
      {{"kind", "covariate_shift"}, {"name", "covariate_shift"}},
      {{"kind", "subject_shift"}, {"name", "null_shift"}, {"subject_sigma", 0.0}}}},
    {"methods", {"tent", "shot", "t3a"}}};

const json kCollapsePlan = {
    {"batch_sizes", {64}},
    {"suites",
     {{{"kind", "covariate_shift"},
       {"name", "covariate_shift"},
       {"test_records", 64 * kCollapseBatches},
       {"test_subjects", 40}}}},
    {"methods", {{{"method", "tent"}, {"label", "tent_lr1"}, {"tent", {{"lr", kCollapseLr}}}}}}};

const json kShotPlan = {
    {"suites", {{{"kind", "label_shift"}, {"name", "label_shift"}}}},
    {"methods",
     {{{"method", "shot"}, {"label", "shot_mi1"}, {"shot", {{"mi_weight", 1.0}, {"pl_weight", 0.0}}}},
      {{"method", "shot"}, {"label", "shot_mi0"}, {"shot", {{"mi_weight", 0.0}, {"pl_weight", 0.0}}}},
      {{"method", "shot"},
       {"label", "shot_mi1_fast"},
       {"shot", {{"mi_weight", 1.0}, {"pl_weight", 0.0}, {"lr", kShotAmplifiedLr}}}},
      {{"method", "shot"},
       {"label", "shot_mi0_fast"},
       {"shot", {{"mi_weight", 0.0}, {"pl_weight", 0.0}, {"lr", kShotAmplifiedLr}}}}}}};

const json kDeterminismPlan = {
    {"seeds", {0, 1}},
    {"batch_sizes", {64, 256}},
    {"suites",
     {{{"kind", "label_shift"}, {"name", "label_shift"}},
      {{"kind", "modality_shift"}, {"name", "modality_shift"}}}},
    {"methods", {"tent", "shot", "t3a"}}};

// Δ balanced accuracy per record key, matched on the No-TTA record of the cell.
std::map<std::string, double> balanced_deltas(const std::vector<RunRecord>& recs) {
  std::map<std::string, const RunRecord*> base;
  for (const auto& r : recs)
    if (r.method_kind == Method::no_tta && r.ok) base[r.cell_key()] = &r;
  std::map<std::string, double> out;
  for (const auto& r : recs) {
    if (!r.ok) continue;
    auto it = base.find(r.cell_key());
    if (it == base.end()) continue;
    out[r.key()] = delta(r.metrics->balanced_accuracy, it->second->metrics->balanced_accuracy);
  }
  return out;
}

double marginal_entropy(const std::vector<double>& m) {
  double h = 0;
  for (double p : m)
    if (p > 0) h -= p * std::log(p);
  return h;
}

// ------------------------------------------------------------ criterion 1

Outcome gradients() {
  std::map<std::string, std::pair<std::size_t, std::size_t>> tally;  // kernel -> (instances, bad entries)
  for (std::uint64_t t = 0; t < kGradInstances; ++t) {
    Rng rng = Rng::derive(t, "acceptance_grad");
    const std::size_t B = 1 + rng.below(5), D = 2 + rng.below(7), H = 1 + rng.below(6), K = 2 + rng.below(4);

    {  // layernorm
      MatrixD x = oracle::random_matrix(rng, B, D, 2.0);
      auto gamma = oracle::random_vector(rng, D, 0.5, 1.0), beta = oracle::random_vector(rng, D, 0.5);
      const MatrixD r = oracle::random_matrix(rng, B, D);
      auto loss = [&] { return oracle::project(layernorm_forward<double>(x, gamma, beta, kLayerNormEps).first, r); };
      auto [y, cache] = layernorm_forward<double>(x, gamma, beta, kLayerNormEps);
      auto g = layernorm_backward(cache, r);
      auto xs = x.data();
      std::size_t bad = oracle::count_mismatches(g.dx.data(), oracle::numeric_gradient(xs, loss));
      bad += oracle::count_mismatches(g.dgamma, oracle::numeric_gradient(gamma, loss));
      bad += oracle::count_mismatches(g.dbeta, oracle::numeric_gradient(beta, loss));
      tally["layernorm"].first++;
      tally["layernorm"].second += bad;
    }
    {  // linear
      MatrixD x = oracle::random_matrix(rng, B, D), w = oracle::random_matrix(rng, D, H);
      auto b = oracle::random_vector(rng, H);
      const MatrixD r = oracle::random_matrix(rng, B, H);
      auto loss = [&] { return oracle::project(linear_forward<double>(x, w, b).first, r); };
      auto [y, cache] = linear_forward<double>(x, w, b);
      auto g = linear_backward(cache, r);
      auto xs = x.data();
      auto ws = w.data();
      std::size_t bad = oracle::count_mismatches(g.dx.data(), oracle::numeric_gradient(xs, loss));
      bad += oracle::count_mismatches(g.dw.data(), oracle::numeric_gradient(ws, loss));
      bad += oracle::count_mismatches(g.db, oracle::numeric_gradient(b, loss));
      tally["linear"].first++;
      tally["linear"].second += bad;
    }
    {  // gelu
      MatrixD x = oracle::random_matrix(rng, B, D, 2.0);
      const MatrixD r = oracle::random_matrix(rng, B, D);
      auto loss = [&] { return oracle::project(gelu_forward<double>(x).first, r); };
      auto [y, cache] = gelu_forward<double>(x);
      auto dx = gelu_backward(cache, r);
      auto xs = x.data();
      tally["gelu"].first++;
      tally["gelu"].second += oracle::count_mismatches(dx.data(), oracle::numeric_gradient(xs, loss));
    }
    std::vector<int> labels(B);
    for (auto& y : labels) y = static_cast<int>(rng.below(K));
    {  // cross-entropy
      MatrixD l = oracle::random_matrix(rng, B, K, 2.0);
      auto loss = [&] { return cross_entropy<double>(l, labels).loss; };
      auto ce = cross_entropy<double>(l, labels);
      auto ls = l.data();
      tally["cross_entropy"].first++;
      tally["cross_entropy"].second += oracle::count_mismatches(ce.dlogits.data(), oracle::numeric_gradient(ls, loss));
    }
    {  // shot loss, random term weights
      MatrixD l = oracle::random_matrix(rng, B, K, 2.0);
      ShotConfig w;
      w.ent_weight = rng.uniform() * 2;
      w.mi_weight = rng.uniform() * 2;
      w.pl_weight = rng.uniform() * 2;
      auto loss = [&] { return shot_loss<double>(l, labels, w).total; };
      auto out = shot_loss<double>(l, labels, w);
      auto ls = l.data();
      tally["shot_loss"].first++;
      tally["shot_loss"].second += oracle::count_mismatches(out.dlogits.data(), oracle::numeric_gradient(ls, loss));
    }
    {  // tent objective through the whole head, w.r.t. the norm-affine parameters
      Rng init = Rng::derive(t, "acceptance_grad_head");
      HeadParamsD head = init_head(D, K, init, 2 + H, 0.1).cast<double>();
      head.ln_gamma = oracle::random_vector(rng, D, 0.5, 1.0);
      head.ln_beta = oracle::random_vector(rng, D, 0.5);
      const MatrixD z = oracle::random_matrix(rng, B + 1, D, 2.0);
      auto loss = [&] { return tent_objective(head, z).loss; };
      auto obj = tent_objective(head, z);
      std::size_t bad = oracle::count_mismatches(obj.grads.ln_gamma, oracle::numeric_gradient(head.ln_gamma, loss));
      bad += oracle::count_mismatches(obj.grads.ln_beta, oracle::numeric_gradient(head.ln_beta, loss));
      tally["tent_objective"].first++;
      tally["tent_objective"].second += bad;
    }
  }
  Outcome o{true, ""};
  for (const auto& [kernel, c] : tally) {
    o.pass = o.pass && c.first >= 100 && c.second == 0;
    o.detail += kernel + " " + std::to_string(c.first) + "x/" + std::to_string(c.second) + " bad; ";
  }
  return o;
}

// ------------------------------------------------------------ criterion 2

// All tables of `cells` non-negative counts summing to n.
void compositions(std::size_t cells, std::size_t n, std::vector<std::size_t>& cur,
                  const std::function<void(const std::vector<std::size_t>&)>& f) {
  if (cur.size() + 1 == cells) {
    cur.push_back(n);
    f(cur);
    cur.pop_back();
    return;
  }
  for (std::size_t v = 0; v <= n; ++v) {
    cur.push_back(v);
    compositions(cells, n - v, cur, f);
    cur.pop_back();
  }
}

Outcome metric_oracles() {
  std::size_t auc_bad = 0;
  for (std::uint64_t t = 0; t < kAucInstances; ++t) {
    Rng rng = Rng::derive(t, "acceptance_auc");
    const std::size_t n = 2 + rng.below(kAucMaxN - 1);
    const std::size_t levels = 1 + rng.below(6);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(levels)) / 4.0;
      y[i] = static_cast<int>(rng.below(2));
    }
    y[rng.below(n)] = 1;
    std::size_t j = rng.below(n);
    while (y[j] == 1 && std::count(y.begin(), y.end(), 1) == 1) j = rng.below(n);
    y[j] = 0;
    if (std::count(y.begin(), y.end(), 1) == 0) y[(j + 1) % n] = 1;
    if (std::fabs(roc_auc(s, y) - oracle::brute_auc(s, y)) > kAucTol) ++auc_bad;
  }

  std::size_t tables = 0, table_bad = 0;
  double worst = 0;
  auto check_table = [&](std::size_t K, const std::vector<std::size_t>& counts) {
    std::vector<int> truth, pred;
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = 0; b < K; ++b)
        for (std::size_t c = 0; c < counts[a * K + b]; ++c) {
          truth.push_back(static_cast<int>(a));
          pred.push_back(static_cast<int>(b));
        }
    if (truth.empty()) return;
    ++tables;
    const auto cm = confusion_matrix(truth, pred, K);
    const auto d = oracle::direct_metrics(truth, pred, K);
    const double err = std::max({std::fabs(accuracy(cm) - d.accuracy),
                                 std::fabs(balanced_accuracy(cm) - d.balanced_accuracy),
                                 std::fabs(cohen_kappa(cm) - d.cohen_kappa),
                                 std::fabs(weighted_f1(cm) - d.weighted_f1)});
    worst = std::max(worst, err);
    if (err > kMetricTol) ++table_bad;
  };
  std::vector<std::size_t> cur;
  for (std::size_t n = 1; n <= 12; ++n) {
    compositions(4, n, cur, [&](const auto& c) { check_table(2, c); });
    compositions(9, n, cur, [&](const auto& c) { check_table(3, c); });
  }
  for (std::size_t n = 1; n <= 6; ++n) compositions(16, n, cur, [&](const auto& c) { check_table(4, c); });
  for (std::uint64_t t = 0; t < 100000; ++t) {
    Rng rng = Rng::derive(t, "acceptance_k4");
    const std::size_t n = 7 + rng.below(6);
    std::vector<std::size_t> c(16, 0);
    for (std::size_t i = 0; i < n; ++i) c[rng.below(16)]++;
    check_table(4, c);
  }

  std::size_t ap_bad = 0, ap_cases = 0;
  for (std::uint64_t t = 0; t < 20000; ++t) {
    Rng rng = Rng::derive(t, "acceptance_ap");
    const std::size_t n = 1 + rng.below(12);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(4));
      y[i] = static_cast<int>(rng.below(2));
    }
    if (std::count(y.begin(), y.end(), 1) == 0) continue;
    ++ap_cases;
    const double err = std::fabs(pr_auc(s, y) - oracle::direct_average_precision(s, y));
    worst = std::max(worst, err);
    if (err > kMetricTol) ++ap_bad;
  }
  Outcome o;
  o.pass = auc_bad == 0 && table_bad == 0 && ap_bad == 0;
  o.detail = "roc_auc " + std::to_string(kAucInstances) + " instances/" + std::to_string(auc_bad) + " off; " +
             std::to_string(tables) + " confusion tables/" + std::to_string(table_bad) + " off; pr_auc " +
             std::to_string(ap_cases) + " instances/" + std::to_string(ap_bad) + " off; max error " +
             fmt("%.1e", worst);
  return o;
}

// ------------------------------------------------------------ criterion 3

Outcome delta_anchor() {
  auto make = [](const std::string& method, Method kind, double bal) {
    RunRecord r;
    r.suite = "chb-mit";
    r.encoder = "reve-large";
    r.seed = 0;
    r.batch_size = 64;
    r.method = method;
    r.method_kind = kind;
    MetricReport m;
    m.balanced_accuracy = bal;
    r.metrics = m;
    r.checkpoint_hash = "c";
    r.partition_hash = "p";
    return r;
  };
  const std::vector<RunRecord> recs = {make("no_tta", Method::no_tta, 0.608), make("t3a", Method::t3a, 0.795)};
  const Report rep = build_report(recs);
  const ReportRow* row = nullptr;
  for (const auto& r : rep.deltas)
    if (r.method == "t3a") row = &r;
  if (!row) return {false, "no t3a row"};
  const Aggregate a = row->metrics.at("balanced_accuracy");
  const std::string cell = format_signed(a);
  const bool in_csv = deltas_csv(rep).find(cell) != std::string::npos;
  return {std::fabs(a.mean - 0.187) <= kDeltaAnchorTol && cell == "+0.187 \xC2\xB1 0.000" && in_csv,
          "delta " + fmt("%.12f", a.mean) + ", cell \"" + cell + "\""};
}

// ------------------------------------------------------------ criterion 4

Outcome t3a_init_equivalence() {
  std::size_t total = 0, differ = 0;
  for (std::uint64_t h = 0; h < 10; ++h) {
    Rng rng = Rng::derive(h, "acceptance_t3a");
    const std::size_t D = 8 + rng.below(24), K = 2 + rng.below(4);
    HeadParams head = init_head(D, K, rng);
    for (auto& v : head.ln_gamma) v = static_cast<float>(1.0 + 0.3 * rng.normal());
    for (auto& v : head.ln_beta) v = static_cast<float>(0.3 * rng.normal());
    std::fill(head.b2.begin(), head.b2.end(), 0.0f);
    EncoderSpec es;
    es.channels = D;
    const Encoder enc(es);
    AdapterConfig cfg;
    cfg.method = Method::t3a;
    AdapterState state = adapter_init(cfg, {head, enc.hash()}, enc);
    NoTtaState base{head};
    Matrix z(kT3AInputs / 10, D);
    for (auto& v : z.data()) v = static_cast<float>(3.0 * rng.normal());
    const Matrix a = t3a_predict(std::get<T3AState>(state), head_trunk(head, z));
    const Matrix b = predict_proba(base.head, z);
    for (std::size_t i = 0; i < z.rows(); ++i, ++total)
      if (argmax<float>(a.row(i)) != argmax<float>(b.row(i))) ++differ;
  }
  return {total == kT3AInputs && differ == 0,
          std::to_string(total) + " inputs, " + std::to_string(differ) + " argmax differences"};
}

// ------------------------------------------------------------ criterion 5

double mean_entropy_d(const HeadParams& head, const Matrix& z) {
  const HeadParamsD hd = head.cast<double>();
  const MatrixD p = softmax(head_forward(hd, z.cast<double>(), HeadMode::eval()).logits);
  double s = 0;
  for (std::size_t i = 0; i < p.rows(); ++i) s += entropy<double>(p.row(i));
  return s / static_cast<double>(p.rows());
}

Outcome entropy_descent() {
  SuiteSpec spec = SuiteSpec::preset(SuiteKind::covariate_shift);
  spec.seed = 11;
  const auto paths = write_suite(work_dir() / "descent", generate_suite(spec));
  const auto src = DatasetReader::open(paths.source), tgt = DatasetReader::open(paths.target);
  EncoderSpec es;
  es.channels = spec.channels;
  const Encoder enc(es);
  FinetuneConfig fc;
  fc.seed = 11;
  const Checkpoint ckpt = train_head(fc, enc, load_split(src, Split::train), load_split(src, Split::val)).checkpoint;
  const auto test = tgt.manifest().records_in(Split::test);

  std::size_t decreased = 0;
  AdapterConfig cfg;
  cfg.method = Method::tent;
  cfg.tent.lr = kDescentLr;
  for (std::uint64_t i = 0; i < kDescentInstances; ++i) {
    auto parts = batch_partition(test, 64, BatchOrder::shuffled, Rng::derive_seed(5, "descent", i));
    const FeatureBatch fb = enc.encode(strip_labels(tgt.read(parts.front())));
    auto state = std::get<TentState>(adapter_init(cfg, ckpt, enc));
    const double before = mean_entropy_d(state.head, fb.z);
    tent_step(state, fb);
    const double after = mean_entropy_d(state.head, fb.z);
    if (after < before) ++decreased;
  }
  const double share = static_cast<double>(decreased) / kDescentInstances;
  return {share >= kDescentRequired,
          std::to_string(decreased) + "/" + std::to_string(kDescentInstances) + " batches decreased"};
}

// ------------------------------------------------------------ criterion 6

Outcome collapse() {
  const auto& recs = run_plan("collapse", kCollapsePlan, true);
  const ExperimentPlan plan = plan_of("collapse", kCollapsePlan);
  const auto deltas = balanced_deltas(recs);
  std::size_t collapsed = 0, degraded = 0, seeds = 0;
  std::string per_seed;
  for (const auto& r : recs) {
    if (r.method != "tent_lr1") continue;
    ++seeds;
    double tail = 0;
    std::size_t batches = 0;
    if (r.ok) {
      std::ifstream is(trace_path(plan, r));
      std::vector<double> maxima;
      std::string line;
      while (std::getline(is, line)) {
        const auto m = json::parse(line).at("pred_marginal").get<std::vector<double>>();
        maxima.push_back(*std::max_element(m.begin(), m.end()));
      }
      batches = maxima.size();
      const std::size_t from = maxima.size() > kCollapseWindow ? maxima.size() - kCollapseWindow : 0;
      for (std::size_t i = from; i < maxima.size(); ++i) tail += maxima[i];
      tail /= static_cast<double>(std::max<std::size_t>(maxima.size() - from, 1));
    }
    const double d = r.ok ? deltas.at(r.key()) : 0.0;
    const bool col = r.ok && batches == kCollapseBatches && tail >= kCollapseMarginal;
    collapsed += col;
    degraded += r.ok && d < 0;
    per_seed += " seed " + std::to_string(r.seed) + ": " + fmt("%.2f", tail) + "/" + fmt("%+.3f", d) + ";";
  }
  return {seeds == 5 && collapsed == 5 && degraded == 5,
          "collapsed " + std::to_string(collapsed) + "/5, delta<0 " + std::to_string(degraded) +
              "/5 (tail marginal max/delta bal.acc:" + per_seed + ")"};
}

// ------------------------------------------------------------ criterion 7

Outcome label_shift_t3a() {
  const auto& recs = run_plan("main", kMainPlan);
  const auto deltas = balanced_deltas(recs);
  std::vector<double> t3a, tent;
  for (const auto& r : recs) {
    if (r.suite != "label_shift" || !r.ok) continue;
    if (r.method == "t3a") t3a.push_back(deltas.at(r.key()));
    if (r.method == "tent") tent.push_back(deltas.at(r.key()));
  }
  if (t3a.size() != 15 || tent.size() != 15) return {false, "incomplete grid"};
  const double mt = oracle::sample_mean(t3a), mn = oracle::sample_mean(tent);
  return {mt > 0 && mt > mn, "mean delta bal.acc t3a " + fmt("%+.4f", mt) + ", tent " + fmt("%+.4f", mn) +
                                 " over 5 seeds x 3 batch sizes"};
}

// ------------------------------------------------------------ criterion 8

Outcome shot_diversity() {
  const auto& recs = run_plan("shot", kShotPlan);
  auto per_seed = [&](const std::string& label) {
    std::map<std::uint64_t, std::vector<double>> h;
    for (const auto& r : recs)
      if (r.method == label && r.ok) h[r.seed].push_back(marginal_entropy(r.pred_marginal));
    std::map<std::uint64_t, double> out;
    for (auto& [s, v] : h) out[s] = oracle::sample_mean(v);
    return out;
  };
  auto wins = [&](const std::string& a, const std::string& b) {
    const auto ha = per_seed(a), hb = per_seed(b);
    std::size_t w = 0;
    for (const auto& [s, v] : ha)
      if (hb.count(s) && v >= hb.at(s)) ++w;
    return w;
  };
  const std::size_t w_default = wins("shot_mi1", "shot_mi0");
  const std::size_t w_fast = wins("shot_mi1_fast", "shot_mi0_fast");
  return {w_default >= kShotSeedsRequired && w_fast >= kShotSeedsRequired,
          "marginal entropy mi=1 >= mi=0 in " + std::to_string(w_default) + "/5 seeds at lr 1e-4, " +
              std::to_string(w_fast) + "/5 at lr " + fmt("%g", kShotAmplifiedLr)};
}

// ------------------------------------------------------------ criterion 9

Outcome frozen_contracts() {
  std::size_t checked = 0, broken = 0, failed = 0;
  for (const char* name : {"main", "collapse", "shot"}) {
    const json& cfg = std::string(name) == "main" ? kMainPlan : std::string(name) == "collapse" ? kCollapsePlan : kShotPlan;
    for (const auto& r : run_plan(name, cfg)) {
      if (!r.ok) {
        ++failed;
        continue;
      }
      ++checked;
      bool ok = r.encoder_hash_before == r.encoder_hash_after;
      if (r.method_kind == Method::shot || r.method_kind == Method::t3a || r.method_kind == Method::no_tta)
        ok = ok && r.classifier_hash_before == r.classifier_hash_after;
      if (r.method_kind == Method::tent || r.method_kind == Method::t3a || r.method_kind == Method::no_tta)
        ok = ok && r.non_norm_hash_before == r.non_norm_hash_after;
      broken += !ok;
    }
  }
  return {broken == 0 && checked > 0, std::to_string(checked) + " runs checked, " + std::to_string(broken) +
                                          " violations, " + std::to_string(failed) + " failed runs"};
}

// ------------------------------------------------------------ criterion 10

std::string without_wall_time(const fs::path& runs) {
  std::ifstream is(runs);
  std::string line, out;
  while (std::getline(is, line)) {
    json j = json::parse(line);
    j.erase("wall_time_s");
    out += j.dump() + "\n";
  }
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome determinism() {
  std::string runs[2], csv[2];
  for (int k = 0; k < 2; ++k) {
    const std::string name = "determinism_" + std::to_string(k);
    run_plan(name, kDeterminismPlan, false, k == 0 ? 1 : 3);
    const fs::path dir = work_dir() / name;
    runs[k] = without_wall_time(dir / "runs.jsonl");
    write_report(dir / "report", build_report(read_records(dir / "runs.jsonl")));
    csv[k] = read_file(dir / "report" / "deltas.csv");
  }
  const bool same = runs[0] == runs[1] && csv[0] == csv[1] && !runs[0].empty();
  return {same, std::string("runs.jsonl ") + (runs[0] == runs[1] ? "identical" : "DIFFER") + ", deltas.csv " +
                    (csv[0] == csv[1] ? "identical" : "DIFFER") + " (1 vs 3 threads)"};
}

// ------------------------------------------------------------ criterion 11

Outcome null_shift() {
  const auto& recs = run_plan("main", kMainPlan);
  const auto deltas = balanced_deltas(recs);
  double worst = 0;
  std::size_t n = 0, missing = 0;
  for (const auto& r : recs) {
    if (r.suite != "null_shift") continue;
    if (!r.ok) {
      ++missing;
      continue;
    }
    worst = std::max(worst, std::fabs(deltas.at(r.key())));
    ++n;
  }
  return {missing == 0 && n == 60 && worst <= kNullShiftTol,
          std::to_string(n) + " runs, max |delta bal.acc| " + fmt("%.4f", worst)};
}

}  // namespace

int main() {
  fs::create_directories(work_dir());
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria = {
      {"gradient correctness", gradients},
      {"metric oracle equivalence", metric_oracles},
      {"delta arithmetic anchor", delta_anchor},
      {"t3a equals no-tta at init", t3a_init_equivalence},
      {"tent entropy descent", entropy_descent},
      {"tent collapse at lr 1", collapse},
      {"t3a label-shift recalibration", label_shift_t3a},
      {"shot diversity guard", shot_diversity},
      {"frozen-parameter contracts", frozen_contracts},
      {"end-to-end determinism", determinism},
      {"null-shift sanity", null_shift},
  };
  int unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool known = kKnownRed.count(id) > 0;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << id << "] " << criteria[i].first << ": " << o.detail
              << fmt(" (%.1fs)", secs) << (!o.pass && known ? "  [known red]" : "") << std::endl;
    if (!o.pass && !known) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
