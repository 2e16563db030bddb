#include "flowprec/training.hpp"

#include "flowprec/math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace flowprec::training {

namespace {

constexpr double kDivergenceLoss = 1e10;

Matrix rows_of(const Matrix& m, const std::vector<Index>& idx, std::size_t begin, std::size_t end) {
  Matrix out(static_cast<Index>(end - begin), m.cols());
  for (std::size_t k = begin; k < end; ++k) out.row(static_cast<Index>(k - begin)) = m.row(idx[k]);
  return out;
}

}  // namespace

void OptimizerState::ensure_size(Index n) {
  if (first_moment.size() != n || second_moment.size() != n) {
    first_moment = Vector::Zero(n);
    second_moment = Vector::Zero(n);
    step_count = 0;
  }
}

double nll_loss(flows::Bijection& flow, const Matrix& batch, const Matrix& ctx) {
  if (flow.needs_initialization()) flow.initialize(batch, ctx);
  Vector logdet;
  Matrix z;
  if (auto* composite = dynamic_cast<flows::Composite*>(&flow)) {
    z = composite->forward_checked(batch, ctx, logdet);
  } else {
    z = flow.forward(batch, ctx, logdet);
  }
  const double d = static_cast<double>(z.cols());
  const Vector nll = (0.5 * (z.rowwise().squaredNorm().array() + d * kLog2Pi)).matrix() - logdet;
  const double loss = nll.mean();
  if (!std::isfinite(loss)) throw NonFiniteError("nll_loss: loss is not finite");
  return loss;
}

Vector grad_nll(const flows::Bijection& flow, const Matrix& batch, const Matrix& ctx,
                double* loss) {
  const double b = static_cast<double>(batch.rows());
  const auto* composite = dynamic_cast<const flows::Composite*>(&flow);
  // Layer inputs are kept so the backward pass does not redo the forward one.
  std::vector<Matrix> inputs;
  Vector logdet;
  Matrix z;
  if (composite) {
    const auto& layers = composite->layers();
    inputs.reserve(layers.size());
    z = batch;
    logdet = Vector::Zero(batch.rows());
    Vector ld;
    for (const auto& layer : layers) {
      inputs.push_back(z);
      z = layer->forward(inputs.back(), ctx, ld);
      logdet += ld;
    }
  } else {
    z = flow.forward(batch, ctx, logdet);
  }
  if (loss) {
    const double d = static_cast<double>(z.cols());
    *loss = (0.5 * (z.rowwise().squaredNorm().array() + d * kLog2Pi)).mean() - logdet.mean();
  }
  Vector grad = Vector::Zero(flow.num_params());
  const Vector grad_logdet = Vector::Constant(batch.rows(), -1.0 / b);
  if (!composite) {
    flow.forward_vjp(batch, ctx, z / b, grad_logdet, nullptr, grad);
    return grad;
  }
  const auto& layers = composite->layers();
  Index offset = grad.size();
  Matrix g = z / b;
  for (std::size_t k = layers.size(); k-- > 0;) {
    const Index np = layers[k]->num_params();
    offset -= np;
    g = layers[k]->forward_vjp(inputs[k], ctx, g, grad_logdet, nullptr, grad.segment(offset, np));
  }
  return grad;
}

void adamw_step(Vector& params, const Vector& grads, OptimizerState& state) {
  state.ensure_size(params.size());
  if (grads.size() != params.size()) throw std::invalid_argument("adamw_step: shape mismatch");
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads;
  state.second_moment =
      state.beta2 * state.second_moment + (1.0 - state.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  params *= 1.0 - state.learning_rate * state.weight_decay;
  params.array() -= state.learning_rate * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

TrainTrace fit_flow(flows::Bijection& flow, const Matrix& data, const Matrix& ctx,
                    const TrainConfig& config, OptimizerState& state) {
  if (data.rows() < 2) throw std::invalid_argument("fit_flow: need at least 2 rows");
  if (config.epochs < 1) throw std::invalid_argument("fit_flow: epochs must be >= 1");
  if (config.batch_size < 2) throw std::invalid_argument("fit_flow: batch_size must be >= 2");
  if (ctx.rows() != data.rows() && ctx.cols() > 0)
    throw std::invalid_argument("fit_flow: context rows do not match data");
  state.learning_rate = config.learning_rate;

  const Index n = data.rows();
  const bool full_batch = n <= config.full_batch_limit;
  const Matrix context = ctx.cols() > 0 ? ctx : flows::empty_context(n);
  Rng rng = make_rng(config.seed, 0x7a1);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});

  TrainTrace trace;
  trace.best_loss = std::numeric_limits<double>::infinity();
  Vector best;
  Vector params;
  bool started = false;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (!full_batch) std::shuffle(order.begin(), order.end(), rng);
    const auto batch = static_cast<std::size_t>(full_batch ? n : config.batch_size);
    double total = 0.0;
    std::size_t batches = 0;
    bool bad = false;
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t end = std::min(order.size(), begin + batch);
      if (end - begin < 2) continue;  // a single leftover row adds nothing useful
      Matrix xb = full_batch ? data : rows_of(data, order, begin, end);
      Matrix cb = full_batch ? context : rows_of(context, order, begin, end);
      if (!started) {
        if (flow.needs_initialization()) flow.initialize(xb, cb);
        params = flow.params();
        state.ensure_size(params.size());
        started = true;
      }
      double loss = 0.0;
      const Vector grad = grad_nll(flow, xb, cb, &loss);
      if (!std::isfinite(loss) || loss > kDivergenceLoss || !grad.allFinite()) {
        bad = true;
        break;
      }
      // The full-batch loss is evaluated at the pre-update parameters.
      if (full_batch && loss < trace.best_loss) {
        trace.best_loss = loss;
        best = params;
      }
      total += loss;
      ++batches;
      adamw_step(params, grad, state);
      flow.set_params(params);
    }
    if (bad) {
      trace.diverged = true;
      warn("fit_flow: training diverged at epoch " + std::to_string(epoch + 1) +
           "; keeping best parameters");
      if (best.size() == params.size()) flow.set_params(best);
      break;
    }
    const double epoch_loss = total / static_cast<double>(std::max<std::size_t>(batches, 1));
    trace.loss.push_back(epoch_loss);
    if (!full_batch && epoch_loss < trace.best_loss) {
      trace.best_loss = epoch_loss;
      best = params;
    }
  }
  return trace;
}

}  // namespace flowprec::training
