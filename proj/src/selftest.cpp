#include "neuroadapt/selftest.hpp"

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "neuroadapt/kernels.hpp"
#include "neuroadapt/metrics.hpp"
#include "neuroadapt/model.hpp"
#include "neuroadapt/rng.hpp"
#include "neuroadapt/tta.hpp"

namespace neuroadapt {

namespace {

bool close(double a, double b) { return std::fabs(a - b) <= 1e-4 * std::max(std::fabs(a), std::fabs(b)) + 1e-8; }

MatrixD random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  MatrixD m(r, c);
  for (auto& v : m.data()) v = scale * rng.normal();
  return m;
}

HeadParamsD random_head(Rng& rng, std::size_t D, std::size_t K, std::size_t H) {
  HeadParamsD h = init_head(D, K, rng, H, 0.0).cast<double>();
  for (auto& v : h.ln_gamma) v = 1.0 + 0.3 * rng.normal();
  for (auto& v : h.ln_beta) v = 0.3 * rng.normal();
  return h;
}

// Central differences of f over every entry of `param`, compared to `grad`.
bool check_gradient(std::vector<double>& param, const std::vector<double>& grad, const std::function<double()>& f) {
  const double h = 1e-6;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double saved = param[i];
    param[i] = saved + h;
    const double up = f();
    param[i] = saved - h;
    const double down = f();
    param[i] = saved;
    if (!close((up - down) / (2 * h), grad[i])) return false;
  }
  return true;
}

bool tent_gradients() {
  for (std::uint64_t t = 0; t < 10; ++t) {
    Rng rng = Rng::derive(t, "selftest_tent");
    HeadParamsD head = random_head(rng, 5, 3, 6);
    const MatrixD z = random_matrix(rng, 7, 5);
    auto obj = tent_objective(head, z);
    auto loss = [&] { return tent_objective(head, z).loss; };
    if (!check_gradient(head.ln_gamma, obj.grads.ln_gamma, loss)) return false;
    if (!check_gradient(head.ln_beta, obj.grads.ln_beta, loss)) return false;
  }
  return true;
}

bool shot_gradients() {
  for (std::uint64_t t = 0; t < 10; ++t) {
    Rng rng = Rng::derive(t, "selftest_shot");
    MatrixD logits = random_matrix(rng, 6, 3, 2.0);
    std::vector<int> pseudo(6);
    for (auto& y : pseudo) y = static_cast<int>(rng.below(3));
    const ShotConfig w;
    auto out = shot_loss(logits, pseudo, w);
    std::vector<double> flat(logits.data().begin(), logits.data().end());
    std::vector<double> grad(out.dlogits.data().begin(), out.dlogits.data().end());
    auto loss = [&] {
      MatrixD l(6, 3);
      std::copy(flat.begin(), flat.end(), l.data().begin());
      return shot_loss(l, pseudo, w).total;
    };
    if (!check_gradient(flat, grad, loss)) return false;
  }
  return true;
}

bool auc_brute_force() {
  for (std::uint64_t t = 0; t < 200; ++t) {
    Rng rng = Rng::derive(t, "selftest_auc");
    const std::size_t n = 2 + rng.below(60);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(5));
      y[i] = static_cast<int>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] == 1 && y[j] == 0) {
          pairs += 1;
          wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    if (std::fabs(roc_auc(s, y) - wins / pairs) > 1e-12) return false;
  }
  return true;
}

bool t3a_init_matches_source() {
  Rng rng = Rng::derive(7, "selftest_t3a");
  HeadParams head = init_head(8, 3, rng, 16, 0.0);
  std::fill(head.b2.begin(), head.b2.end(), 0.0f);
  EncoderSpec es;
  es.channels = 8;
  const Encoder enc(es);
  AdapterConfig cfg;
  cfg.method = Method::t3a;
  auto state = std::get<T3AState>(adapter_init(cfg, {head, enc.hash()}, enc));
  Matrix z(500, 8);
  for (auto& v : z.data()) v = static_cast<float>(2.0 * rng.normal());
  const Matrix a = t3a_predict(state, head_trunk(head, z));
  const Matrix b = predict_proba(head, z);
  for (std::size_t i = 0; i < z.rows(); ++i)
    if (argmax<float>(a.row(i)) != argmax<float>(b.row(i))) return false;
  return true;
}

bool checkpoint_round_trip() {
  Rng rng = Rng::derive(3, "selftest_ckpt");
  const Checkpoint c{init_head(6, 4, rng), 0x1234};
  const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(c));
  return back.head == c.head && back.encoder_hash == c.encoder_hash;
}

bool rng_determinism() {
  Rng a = Rng::derive(42, "selftest"), b = Rng::derive(42, "selftest"), c = Rng::derive(43, "selftest");
  bool same = true, differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    same = same && x == b.next_u64();
    differs = differs || x != c.next_u64();
  }
  return same && differs;
}

}  // namespace

int run_selftest(std::ostream& os) {
  const std::pair<const char*, bool (*)()> checks[] = {
      {"tent objective gradient (finite differences)", tent_gradients},
      {"shot loss gradient (finite differences)", shot_gradients},
      {"roc_auc vs pairwise count", auc_brute_force},
      {"t3a at init agrees with source head", t3a_init_matches_source},
      {"checkpoint round trip", checkpoint_round_trip},
      {"rng determinism", rng_determinism},
  };
  int failures = 0;
  for (const auto& [name, fn] : checks) {
    bool ok = false;
    std::string err;
    try {
      ok = fn();
    } catch (const std::exception& e) {
      err = e.what();
    }
    os << (ok ? "PASS " : "FAIL ") << name;
    if (!err.empty()) os << " (" << err << ")";
    os << '\n';
    failures += ok ? 0 : 1;
  }
  return failures;
}

}  // namespace neuroadapt
