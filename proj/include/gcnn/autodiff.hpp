#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gcnn/tensor.hpp"

// Reverse-mode differentiation over a graph of shared nodes. Each op builds a
// new node holding its value and a closure that pushes the node's gradient to
// its parents. The graph is released when the last Var referencing it dies.

namespace gcnn::ad {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  std::string name;

  /// Adds `g` into the gradient, allocating it on first use.
  void accumulate(Tensor<T>&& g);
  void accumulate(std::span<const T> g);
  void zero_grad() { grad = Tensor<T>(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> constant(Tensor<T> value);
template <typename T>
Var<T> parameter(Tensor<T> value, std::string name = {});

/// Seeds d(loss)/d(loss) = 1 and runs every reachable backward rule in
/// reverse topological order. `loss` must hold a single element.
template <typename T>
void backward(const Var<T>& loss);

enum class Padding { same, valid };
enum class PoolMode { max, avg };

/// x[B,C,D,D,D] (*) w[F,C,k,k,k] (+ b[F]) -> [B,F,D',D',D']. `bias` may be null.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Padding padding);

/// 2x2x2 max pooling with stride 2 over [B,C,D,D,D], D even.
template <typename T>
Var<T> maxpool3d(const Var<T>& x);

/// Spatial mean of [B,C,D,D,D] -> [B,C].
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

/// x[B,I] w[I,J] + b[J].
template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <typename T>
Var<T> relu(const Var<T>& x);

/// x[B,C,...] + b[C], broadcast over batch and trailing extents.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b);

/// Mean over the batch of -log softmax(logits)[label]. Returns shape [1].
template <typename T>
Var<T> softmax_xent(const Var<T>& logits, std::span<const std::size_t> labels);

/// Reduction over axis 2 of [B,M,H,...] -> [B,M,...]. Max ties go to the
/// lowest orientation index.
template <typename T>
Var<T> orientation_pool(const Var<T>& x, PoolMode mode);

/// out[i] = src[index[i]] with the given output shape; gradients scatter-add back.
template <typename T>
Var<T> gather(const Var<T>& src, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape);

/// Sum of all elements -> [1].
template <typename T>
Var<T> sum(const Var<T>& x);

/// Row-wise softmax of [B,N] (no graph).
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  std::size_t skipped = 0;  // probes straddling a relu/max kink
};

/// Compares reverse-mode gradients of `loss_fn` w.r.t. `param` with central
/// differences (L(p+h) - L(p-h)) / 2h at `probes` random coordinates.
/// Relative error is |a-b| / max(|a|, |b|, 1e-6). A probe is skipped when its
/// one-sided differences disagree, which only happens across a kink.
GradCheckResult grad_check(const std::function<Var<double>()>& loss_fn, const Var<double>& param,
                           std::size_t probes, double h, std::uint64_t seed);

}  // namespace gcnn::ad
