#ifndef ENVROBUST_KERNELS_HPP_
#define ENVROBUST_KERNELS_HPP_

// Batched network kernels. Every kernel has an OpenMP path and a plain serial
// reference path. The parallel path splits rows into fixed-size chunks,
// reduces each chunk on its own and then sums chunk results in chunk order,
// so its output is bit-identical for any thread count.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "envrobust/nn.hpp"

namespace envrobust::kernels {

enum class Exec { Serial, Parallel };

inline constexpr std::size_t kChunkRows = 64;

/// Deterministic sum over rows of per-row contributions. `fn(row, ws, acc)`
/// adds row `row`'s contribution into `acc` (size `width`) and returns a
/// scalar that is summed alongside (e.g. the row loss).
template <class WorkspaceT, class Fn>
double chunked_reduce(std::size_t rows, std::size_t width, Fn&& fn, std::span<double> out, Exec exec) {
  std::fill(out.begin(), out.end(), 0.0);
  if (exec == Exec::Serial) {
    WorkspaceT ws;
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) total += fn(r, ws, out);
    return total;
  }
  const std::size_t n_chunks = (rows + kChunkRows - 1) / kChunkRows;
  std::vector<std::vector<double>> partial(n_chunks);
  std::vector<double> partial_total(n_chunks, 0.0);
  const auto n = static_cast<long>(n_chunks);
#pragma omp parallel
  {
    WorkspaceT ws;
#pragma omp for schedule(dynamic, 1)
    for (long c = 0; c < n; ++c) {
      auto& acc = partial[static_cast<std::size_t>(c)];
      acc.assign(width, 0.0);
      const std::size_t begin = static_cast<std::size_t>(c) * kChunkRows;
      const std::size_t end = std::min(rows, begin + kChunkRows);
      double t = 0.0;
      for (std::size_t r = begin; r < end; ++r) t += fn(r, ws, std::span<double>(acc));
      partial_total[static_cast<std::size_t>(c)] = t;
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < n_chunks; ++c) {
    const auto& acc = partial[c];
    for (std::size_t i = 0; i < width; ++i) out[i] += acc[i];
    total += partial_total[c];
  }
  return total;
}

template <class T>
struct RowWorkspace {
  nn::Workspace<T> net;
  std::vector<T> input;
  std::array<T, nn::kJoint> dlogits{};
};

/// Sum over rows of dLoss_row/dparams into `grad`; returns the summed loss.
///
/// input(row, scratch) -> std::span<const T>   observation for the row
/// loss(row, const Output<T>&, std::span<T> dlogits, T& dvalue) -> double
template <class T, class InputFn, class LossFn>
double accumulate_gradient(const nn::PolicyNetwork<T>& net, std::size_t rows, InputFn&& input, LossFn&& loss,
                           std::span<double> grad, Exec exec) {
  auto row_fn = [&](std::size_t r, RowWorkspace<T>& ws, std::span<double> acc) -> double {
    const std::span<const T> x = input(r, ws.input);
    const auto& out = net.forward(x, ws.net);
    ws.dlogits.fill(T(0));
    T dvalue = T(0);
    const double l = loss(r, out, std::span<T>(ws.dlogits), dvalue);
    net.backward(x, ws.net, ws.dlogits, dvalue, acc, {});
    return l;
  };
  return chunked_reduce<RowWorkspace<T>>(rows, net.num_params(), row_fn, grad, exec);
}

/// Forward pass over rows; out[row] receives logits and value.
template <class T, class InputFn>
void forward_batch(const nn::PolicyNetwork<T>& net, std::size_t rows, InputFn&& input, std::span<nn::Output<T>> out,
                   Exec exec) {
  if (exec == Exec::Serial) {
    RowWorkspace<T> ws;
    for (std::size_t r = 0; r < rows; ++r) out[r] = net.forward(input(r, ws.input), ws.net);
    return;
  }
  const auto n = static_cast<long>(rows);
#pragma omp parallel
  {
    RowWorkspace<T> ws;
#pragma omp for schedule(static)
    for (long r = 0; r < n; ++r) {
      const auto row = static_cast<std::size_t>(r);
      out[row] = net.forward(input(row, ws.input), ws.net);
    }
  }
}

/// Minibatch gradient step: gradient of the mean row loss, optional norm
/// clipping, then one Adam update. Returns the mean loss. Throws
/// NumericalError if the loss or gradient is not finite.
template <class T, class InputFn, class LossFn>
double train_step(nn::PolicyNetwork<T>& net, std::size_t rows, double denominator, InputFn&& input, LossFn&& loss,
                  nn::AdamState& adam, double lr, double max_grad_norm, std::vector<double>& grad, Exec exec) {
  grad.assign(net.num_params(), 0.0);
  const double total = accumulate_gradient(net, rows, input, loss, grad, exec);
  const double mean = total / denominator;
  for (auto& g : grad) g /= denominator;
  const double norm = nn::clip_grad_norm(grad, max_grad_norm);
  if (!std::isfinite(mean) || !std::isfinite(norm))
    throw NumericalError("non-finite loss (" + std::to_string(mean) + ") or gradient norm (" +
                         std::to_string(norm) + ") after " + std::to_string(adam.step) + " optimizer steps");
  nn::adam_step(net.params(), grad, adam, lr);
  return mean;
}

}  // namespace envrobust::kernels

#endif  // ENVROBUST_KERNELS_HPP_
