#include "neuroadapt/optim.hpp"

#include <cmath>
#include <string>

#include "neuroadapt/errors.hpp"

namespace neuroadapt {

namespace {

std::vector<std::vector<float>> zero_buffers(std::span<const std::size_t> sizes) {
  std::vector<std::vector<float>> out;
  out.reserve(sizes.size());
  for (auto n : sizes) out.emplace_back(n, 0.0f);
  return out;
}

void check_shapes(const ParamBlocks& params, const GradBlocks& grads,
                  const std::vector<std::vector<float>>& buffers, const char* who) {
  if (params.size() != grads.size() || params.size() != buffers.size()) {
    throw ContractError(std::string(who) + ": " + std::to_string(params.size()) +
                        " parameter blocks, " + std::to_string(grads.size()) + " gradient blocks, " +
                        std::to_string(buffers.size()) + " state blocks");
  }
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != grads[b].size() || params[b].size() != buffers[b].size()) {
      throw ContractError(std::string(who) + ": block " + std::to_string(b) + " size mismatch");
    }
  }
}

}  // namespace

OptimizerState OptimizerState::adamw(std::span<const std::size_t> block_sizes) {
  return {OptimizerKind::adamw, zero_buffers(block_sizes), zero_buffers(block_sizes), 0};
}

OptimizerState OptimizerState::sgd_momentum(std::span<const std::size_t> block_sizes) {
  return {OptimizerKind::sgd_momentum, zero_buffers(block_sizes), {}, 0};
}

void adamw_step(const ParamBlocks& params, const GradBlocks& grads, OptimizerState& state,
                const AdamWHyper& h) {
  if (state.kind != OptimizerKind::adamw) throw ContractError("adamw_step: state is not AdamW");
  check_shapes(params, grads, state.first, "adamw_step");
  check_shapes(params, grads, state.second, "adamw_step");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  const float decay = static_cast<float>(1.0 - h.lr * h.weight_decay);
  const float b1 = static_cast<float>(h.beta1), b2 = static_cast<float>(h.beta2);
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto w = params[b];
    auto g = grads[b];
    auto& m = state.first[b];
    auto& v = state.second[b];
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] *= decay;
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] -= static_cast<float>(h.lr * m_hat / (std::sqrt(v_hat) + h.eps));
    }
  }
}

void sgd_momentum_step(const ParamBlocks& params, const GradBlocks& grads, OptimizerState& state,
                       const SgdHyper& h) {
  if (state.kind != OptimizerKind::sgd_momentum) {
    throw ContractError("sgd_momentum_step: state is not SGD");
  }
  check_shapes(params, grads, state.first, "sgd_momentum_step");
  ++state.step;
  const float mu = static_cast<float>(h.momentum);
  const float wd = static_cast<float>(h.weight_decay);
  const float lr = static_cast<float>(h.lr);
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto w = params[b];
    auto g = grads[b];
    auto& vel = state.first[b];
    for (std::size_t i = 0; i < w.size(); ++i) {
      vel[i] = mu * vel[i] + g[i] + wd * w[i];
      w[i] -= lr * vel[i];
    }
  }
}

}  // namespace neuroadapt
