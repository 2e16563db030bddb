#ifndef FLOWPREC_TRAINING_HPP
#define FLOWPREC_TRAINING_HPP

#include "flowprec/flows.hpp"

#include <cstdint>
#include <vector>

namespace flowprec::training {

/// AdamW moments and hyperparameters. Kept by the caller so a flow that
/// persists across warmup cycles also keeps its optimizer progress.
struct OptimizerState {
  Vector first_moment;
  Vector second_moment;
  std::int64_t step_count = 0;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  /// Zeroes the moments for `n` parameters if the shape changed.
  void ensure_size(Index n);
};

struct TrainConfig {
  int epochs = 3500;
  Index full_batch_limit = 4096;  // full-batch gradient up to this many rows
  Index batch_size = 1024;        // minibatch size above the limit
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct TrainTrace {
  std::vector<double> loss;  // mean minibatch loss per epoch
  bool diverged = false;
  double best_loss = 0.0;
};

/// Mean negative log-likelihood -log q(x | ctx) over rows. Runs the
/// data-dependent ActNorm initialization first if the flow still needs it.
double nll_loss(flows::Bijection& flow, const Matrix& batch, const Matrix& ctx);

/// Gradient of the mean NLL with respect to flow.params(). The flow must
/// already be initialized. The loss is written to *loss when non-null.
Vector grad_nll(const flows::Bijection& flow, const Matrix& batch, const Matrix& ctx,
                double* loss = nullptr);

/// Decoupled-weight-decay Adam update with bias correction.
void adamw_step(Vector& params, const Vector& grads, OptimizerState& state);

/// Maximum-likelihood training. On divergence (non-finite loss or loss
/// above 1e10) training stops, the best parameters seen are restored and a
/// warning is emitted.
TrainTrace fit_flow(flows::Bijection& flow, const Matrix& data, const Matrix& ctx,
                    const TrainConfig& config, OptimizerState& state);

}  // namespace flowprec::training

#endif  // FLOWPREC_TRAINING_HPP
