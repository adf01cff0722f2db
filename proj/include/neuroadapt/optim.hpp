#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace neuroadapt {

enum class OptimizerKind { adamw, sgd_momentum };

// Moment buffers mirror the parameter blocks they were created for. AdamW
// uses `first` and `second`; SGD keeps its velocity in `first`.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adamw;
  std::vector<std::vector<float>> first;
  std::vector<std::vector<float>> second;
  std::uint64_t step = 0;

  static OptimizerState adamw(std::span<const std::size_t> block_sizes);
  static OptimizerState sgd_momentum(std::span<const std::size_t> block_sizes);
};

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct SgdHyper {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

using ParamBlocks = std::vector<std::span<float>>;
using GradBlocks = std::vector<std::span<const float>>;

// Decoupled decay: w <- w (1 - lr wd), then the bias-corrected Adam update.
void adamw_step(const ParamBlocks& params, const GradBlocks& grads, OptimizerState& state,
                const AdamWHyper& hyper);

// v <- momentum v + g + wd w;  w <- w - lr v.
void sgd_momentum_step(const ParamBlocks& params, const GradBlocks& grads, OptimizerState& state,
                       const SgdHyper& hyper);

}  // namespace neuroadapt
