#include "gcnn/optim.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "gcnn/errors.hpp"

namespace gcnn {

template <typename T>
Tensor<T> xavier_init(Shape shape, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
  if (fan_in == 0 || fan_out == 0) throw std::invalid_argument("xavier_init: fans must be positive");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
void adam_step(std::vector<ad::Var<T>>& params, AdamState<T>& state) {
  if (state.m.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: optimizer state does not match parameter list");

  ++state.step;
  const auto& c = state.config;
  const double correct1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double correct2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    require_shape(state.m[k].shape(), p.value.shape(), "adam_step first moment");
    require_shape(state.v[k].shape(), p.value.shape(), "adam_step second moment");
    if (p.grad.empty()) {
      p.grad = Tensor<T>(p.value.shape());
    }
    require_shape(p.grad.shape(), p.value.shape(), "adam_step gradient");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double m = c.beta1 * state.m[k][i] + (1.0 - c.beta1) * g;
      const double v = c.beta2 * state.v[k][i] + (1.0 - c.beta2) * g * g;
      state.m[k][i] = static_cast<T>(m);
      state.v[k][i] = static_cast<T>(v);
      const double update = c.learning_rate * (m / correct1) / (std::sqrt(v / correct2) + c.epsilon);
      p.value[i] = static_cast<T>(p.value[i] - update);
    }
  }
}

template Tensor<float> xavier_init<float>(Shape, std::size_t, std::size_t, std::uint64_t);
template Tensor<double> xavier_init<double>(Shape, std::size_t, std::size_t, std::uint64_t);
template void adam_step<float>(std::vector<ad::Var<float>>&, AdamState<float>&);
template void adam_step<double>(std::vector<ad::Var<double>>&, AdamState<double>&);

}  // namespace gcnn
