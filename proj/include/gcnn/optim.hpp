#pragma once

#include <cstdint>
#include <vector>

#include "gcnn/autodiff.hpp"
#include "gcnn/tensor.hpp"

namespace gcnn {

/// Glorot/Xavier uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
/// Throws std::invalid_argument on zero fans.
template <typename T>
Tensor<T> xavier_init(Shape shape, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed);

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment estimates for a list of parameters, in parameter order.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// One bias-corrected Adam update of every parameter from its gradient.
/// Parameters without a gradient are treated as having a zero gradient.
/// Throws ShapeError when the state does not match the parameters.
template <typename T>
void adam_step(std::vector<ad::Var<T>>& params, AdamState<T>& state);

}  // namespace gcnn
