#include "gcnn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <unordered_set>

#include "gcnn/errors.hpp"
#include "gcnn/kernels.hpp"

namespace gcnn::ad {

template <typename T>
void Node<T>::accumulate(Tensor<T>&& g) {
  if (grad.empty()) {
    grad = std::move(g).reshaped(value.shape());
    return;
  }
  accumulate(std::span<const T>(g.values()));
}

template <typename T>
void Node<T>::accumulate(std::span<const T> g) {
  if (grad.empty()) grad = Tensor<T>(value.shape());
  T* dst = grad.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <typename T>
Var<T> parameter(Tensor<T> value, std::string name) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->name = std::move(name);
  return n;
}

namespace {

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = std::any_of(parents.begin(), parents.end(), [](const Var<T>& p) { return p && p->requires_grad; });
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

template <typename T>
bool wants_grad(const Var<T>& v) {
  return v && v->requires_grad;
}

}  // namespace

template <typename T>
void backward(const Var<T>& loss) {
  if (loss->value.size() != 1) throw ShapeError("backward: loss must be a scalar");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->accumulate(Tensor<T>(loss->value.shape(), T(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
  }
}

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Padding padding) {
  const Shape& xs = x->value.shape();
  const Shape& ws = w->value.shape();
  if (xs.size() != 5 || ws.size() != 5) throw ShapeError("conv3d: expected rank-5 input and weights");
  if (xs[2] != xs[3] || xs[2] != xs[4]) throw ShapeError("conv3d: input volume must be cubic");
  if (ws[2] != ws[3] || ws[2] != ws[4]) throw ShapeError("conv3d: kernel must be cubic");
  if (ws[1] != xs[1])
    throw ShapeError("conv3d: weights expect " + std::to_string(ws[1]) + " input channels, got " +
                     std::to_string(xs[1]));
  if (bias) require_shape(bias->value.shape(), {ws[0]}, "conv3d bias");

  const auto geom = kernels::make_conv3d_geometry(xs[0], xs[1], ws[0], xs[2], ws[2], padding == Padding::same);
  Tensor<T> out({geom.batch, geom.out_channels, geom.out_dim, geom.out_dim, geom.out_dim});
  kernels::parallel::conv3d_forward<T>(geom, x->value.values(), w->value.values(),
                                       bias ? bias->value.values() : std::span<const T>{}, out.values());

  return make_node<T>(std::move(out), {x, w, bias}, [geom](Node<T>& self) {
    const auto& x = self.parents[0];
    const auto& w = self.parents[1];
    const auto& b = self.parents[2];
    if (wants_grad(x)) {
      Tensor<T> gx(x->value.shape());
      kernels::parallel::conv3d_backward_input<T>(geom, self.grad.values(), w->value.values(), gx.values());
      x->accumulate(std::move(gx));
    }
    if (wants_grad(w) || wants_grad(b)) {
      Tensor<T> gw(w->value.shape());
      Tensor<T> gb = b ? Tensor<T>(b->value.shape()) : Tensor<T>();
      kernels::parallel::conv3d_backward_weight<T>(geom, x->value.values(), self.grad.values(), gw.values(),
                                                   gb.values());
      if (wants_grad(w)) w->accumulate(std::move(gw));
      if (wants_grad(b)) b->accumulate(std::move(gb));
    }
  });
}

template <typename T>
Var<T> maxpool3d(const Var<T>& x) {
  const Shape& xs = x->value.shape();
  if (xs.size() != 5) throw ShapeError("maxpool3d: expected [B,C,D,D,D]");
  if (xs[2] % 2 != 0) throw ShapeError("maxpool3d: spatial size must be even, got " + std::to_string(xs[2]));
  const kernels::PoolGeometry geom{xs[0] * xs[1], xs[2]};
  const std::size_t d_o = geom.out_dim();
  Tensor<T> out({xs[0], xs[1], d_o, d_o, d_o});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  kernels::parallel::maxpool2_forward<T>(geom, x->value.values(), out.values(), *argmax);

  return make_node<T>(std::move(out), {x}, [geom, argmax](Node<T>& self) {
    const auto& x = self.parents[0];
    Tensor<T> gx(x->value.shape());
    const std::size_t in_plane = geom.in_dim * geom.in_dim * geom.in_dim;
    const std::size_t out_plane = self.value.size() / geom.planes;
    for (std::size_t p = 0; p < geom.planes; ++p)
      for (std::size_t i = 0; i < out_plane; ++i)
        gx[p * in_plane + (*argmax)[p * out_plane + i]] += self.grad[p * out_plane + i];
    x->accumulate(std::move(gx));
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape& xs = x->value.shape();
  if (xs.size() != 5) throw ShapeError("global_avg_pool: expected [B,C,D,D,D]");
  const std::size_t rows = xs[0] * xs[1];
  const std::size_t plane = xs[2] * xs[3] * xs[4];
  Tensor<T> out({xs[0], xs[1]});
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    const T* src = x->value.data() + r * plane;
    for (std::size_t i = 0; i < plane; ++i) acc += src[i];
    out[r] = acc / static_cast<T>(plane);
  }
  return make_node<T>(std::move(out), {x}, [rows, plane](Node<T>& self) {
    const auto& x = self.parents[0];
    Tensor<T> gx(x->value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T g = self.grad[r] / static_cast<T>(plane);
      std::fill(gx.data() + r * plane, gx.data() + (r + 1) * plane, g);
    }
    x->accumulate(std::move(gx));
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  return make_node<T>(x->value.reshaped(std::move(shape)), {x}, [](Node<T>& self) {
    self.parents[0]->accumulate(std::span<const T>(self.grad.values()));
  });
}

template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& xs = x->value.shape();
  const Shape& ws = w->value.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0])
    throw ShapeError("dense: cannot apply weights " + shape_string(ws) + " to input " + shape_string(xs));
  require_shape(b->value.shape(), {ws[1]}, "dense bias");
  const std::size_t batch = xs[0], in = ws[0], outs = ws[1];

  Tensor<T> out({batch, outs});
  for (std::size_t r = 0; r < batch; ++r) {
    T* o = out.data() + r * outs;
    std::copy(b->value.data(), b->value.data() + outs, o);
    for (std::size_t i = 0; i < in; ++i) {
      const T xv = x->value[r * in + i];
      const T* wrow = w->value.data() + i * outs;
      for (std::size_t j = 0; j < outs; ++j) o[j] += xv * wrow[j];
    }
  }

  return make_node<T>(std::move(out), {x, w, b}, [batch, in, outs](Node<T>& self) {
    const auto& x = self.parents[0];
    const auto& w = self.parents[1];
    const auto& b = self.parents[2];
    const T* g = self.grad.data();
    if (wants_grad(x)) {
      Tensor<T> gx(x->value.shape());
      for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t i = 0; i < in; ++i) {
          const T* wrow = w->value.data() + i * outs;
          T acc = T(0);
          for (std::size_t j = 0; j < outs; ++j) acc += g[r * outs + j] * wrow[j];
          gx[r * in + i] = acc;
        }
      x->accumulate(std::move(gx));
    }
    if (wants_grad(w)) {
      Tensor<T> gw(w->value.shape());
      for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t i = 0; i < in; ++i) {
          const T xv = x->value[r * in + i];
          T* grow = gw.data() + i * outs;
          for (std::size_t j = 0; j < outs; ++j) grow[j] += xv * g[r * outs + j];
        }
      w->accumulate(std::move(gw));
    }
    if (wants_grad(b)) {
      Tensor<T> gb(b->value.shape());
      for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t j = 0; j < outs; ++j) gb[j] += g[r * outs + j];
      b->accumulate(std::move(gb));
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  // NaN passes through so that numeric failures reach the loss.
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->value[i] < T(0) ? T(0) : x->value[i];
  return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
    const auto& x = self.parents[0];
    Tensor<T> gx(x->value.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = x->value[i] > T(0) ? self.grad[i] : T(0);
    x->accumulate(std::move(gx));
  });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
  const Shape& xs = x->value.shape();
  if (xs.size() < 2) throw ShapeError("add_bias: expected [B,C,...]");
  require_shape(b->value.shape(), {xs[1]}, "add_bias");
  const std::size_t batch = xs[0], channels = xs[1], inner = x->value.size() / (batch * channels);
  Tensor<T> out = x->value;
  for (std::size_t r = 0; r < batch * channels; ++r) {
    const T bv = b->value[r % channels];
    for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] += bv;
  }
  return make_node<T>(std::move(out), {x, b}, [batch, channels, inner](Node<T>& self) {
    const auto& x = self.parents[0];
    const auto& b = self.parents[1];
    if (wants_grad(x)) x->accumulate(std::span<const T>(self.grad.values()));
    if (wants_grad(b)) {
      Tensor<T> gb(b->value.shape());
      for (std::size_t r = 0; r < batch * channels; ++r) {
        T acc = T(0);
        for (std::size_t i = 0; i < inner; ++i) acc += self.grad[r * inner + i];
        gb[r % channels] += acc;
      }
      b->accumulate(std::move(gb));
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax: expected [B,N]");
  const std::size_t batch = logits.dim(0), n = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t r = 0; r < batch; ++r) {
    const T* z = logits.data() + r * n;
    const T m = *std::max_element(z, z + n);
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) total += (p[r * n + j] = std::exp(z[j] - m));
    for (std::size_t j = 0; j < n; ++j) p[r * n + j] /= total;
  }
  return p;
}

template <typename T>
Var<T> softmax_xent(const Var<T>& logits, std::span<const std::size_t> labels) {
  const Tensor<T>& z = logits->value;
  if (z.rank() != 2) throw ShapeError("softmax_xent: expected [B,N] logits");
  const std::size_t batch = z.dim(0), n = z.dim(1);
  if (labels.size() != batch)
    throw ShapeError("softmax_xent: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  for (std::size_t label : labels)
    if (label >= n) throw std::out_of_range("softmax_xent: label " + std::to_string(label) + " out of range");

  T loss = T(0);
  for (std::size_t r = 0; r < batch; ++r) {
    const T* row = z.data() + r * n;
    const T m = *std::max_element(row, row + n);
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) total += std::exp(row[j] - m);
    loss += m + std::log(total) - row[labels[r]];
  }
  loss /= static_cast<T>(batch);

  std::vector<std::size_t> owned(labels.begin(), labels.end());
  return make_node<T>(Tensor<T>({1}, T(loss)), {logits}, [owned = std::move(owned), batch, n](Node<T>& self) {
    const auto& logits = self.parents[0];
    Tensor<T> g = softmax(logits->value);
    const T scale = self.grad[0] / static_cast<T>(batch);
    for (std::size_t r = 0; r < batch; ++r) {
      g[r * n + owned[r]] -= T(1);
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] *= scale;
    }
    logits->accumulate(std::move(g));
  });
}

template <typename T>
Var<T> orientation_pool(const Var<T>& x, PoolMode mode) {
  const Shape& xs = x->value.shape();
  if (xs.size() < 3) throw ShapeError("orientation_pool: expected [B,M,H,...]");
  const std::size_t outer = xs[0] * xs[1], h = xs[2];
  const std::size_t inner = x->value.size() / (outer * h);
  Shape os{xs[0], xs[1]};
  os.insert(os.end(), xs.begin() + 3, xs.end());
  Tensor<T> out(os);

  std::shared_ptr<std::vector<std::uint32_t>> argmax;
  if (mode == PoolMode::max) argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = x->value.data() + o * h * inner;
    for (std::size_t i = 0; i < inner; ++i) {
      if (mode == PoolMode::max) {
        std::uint32_t best = 0;
        for (std::size_t r = 1; r < h; ++r)
          if (src[r * inner + i] > src[best * inner + i]) best = static_cast<std::uint32_t>(r);
        out[o * inner + i] = src[best * inner + i];
        (*argmax)[o * inner + i] = best;
      } else {
        T acc = T(0);
        for (std::size_t r = 0; r < h; ++r) acc += src[r * inner + i];
        out[o * inner + i] = acc / static_cast<T>(h);
      }
    }
  }

  return make_node<T>(std::move(out), {x}, [mode, argmax, outer, h, inner](Node<T>& self) {
    const auto& x = self.parents[0];
    Tensor<T> gx(x->value.shape());
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const T g = self.grad[o * inner + i];
        if (mode == PoolMode::max) {
          gx[(o * h + (*argmax)[o * inner + i]) * inner + i] = g;
        } else {
          for (std::size_t r = 0; r < h; ++r) gx[(o * h + r) * inner + i] = g / static_cast<T>(h);
        }
      }
    x->accumulate(std::move(gx));
  });
}

template <typename T>
Var<T> gather(const Var<T>& src, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape) {
  if (shape_size(shape) != index->size()) throw ShapeError("gather: index length does not match output shape");
  Tensor<T> out(std::move(shape));
  const T* s = src->value.data();
  const std::size_t n = src->value.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t from = (*index)[i];
    if (from >= n) throw std::out_of_range("gather: index out of range");
    out[i] = s[from];
  }
  return make_node<T>(std::move(out), {src}, [index](Node<T>& self) {
    const auto& src = self.parents[0];
    Tensor<T> gs(src->value.shape());
    for (std::size_t i = 0; i < index->size(); ++i) gs[(*index)[i]] += self.grad[i];
    src->accumulate(std::move(gs));
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = T(0);
  for (T v : x->value.values()) acc += v;
  return make_node<T>(Tensor<T>({1}, acc), {x}, [](Node<T>& self) {
    const auto& x = self.parents[0];
    x->accumulate(Tensor<T>(x->value.shape(), self.grad[0]));
  });
}

GradCheckResult grad_check(const std::function<Var<double>()>& loss_fn, const Var<double>& param,
                           std::size_t probes, double h, std::uint64_t seed) {
  param->zero_grad();
  backward(loss_fn());
  const Tensor<double> analytic = param->grad.empty() ? Tensor<double>(param->value.shape()) : param->grad;
  param->zero_grad();

  auto eval = [&] { return loss_fn()->value[0]; };
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, param->value.size() - 1);

  GradCheckResult result;
  const double base = eval();
  for (std::size_t p = 0; p < probes; ++p) {
    const std::size_t i = pick(rng);
    const double saved = param->value[i];
    param->value[i] = saved + h;
    const double up = eval();
    param->value[i] = saved - h;
    const double down = eval();
    param->value[i] = saved;

    const double fwd = (up - base) / h, bwd = (base - down) / h;
    if (std::abs(fwd - bwd) > 1e-2 * std::max({std::abs(fwd), std::abs(bwd), 1e-4})) {
      ++result.skipped;
      continue;
    }
    const double numeric = (up - down) / (2 * h);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
    result.max_rel_error = std::max(result.max_rel_error, err);
    ++result.probes;
  }
  return result;
}

#define GCNN_INSTANTIATE(T)                                                                 \
  template struct Node<T>;                                                                  \
  template Var<T> constant<T>(Tensor<T>);                                                   \
  template Var<T> parameter<T>(Tensor<T>, std::string);                                     \
  template void backward<T>(const Var<T>&);                                                 \
  template Var<T> conv3d<T>(const Var<T>&, const Var<T>&, const Var<T>&, Padding);          \
  template Var<T> maxpool3d<T>(const Var<T>&);                                              \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                        \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                         \
  template Var<T> dense<T>(const Var<T>&, const Var<T>&, const Var<T>&);                    \
  template Var<T> relu<T>(const Var<T>&);                                                   \
  template Var<T> add_bias<T>(const Var<T>&, const Var<T>&);                                \
  template Var<T> softmax_xent<T>(const Var<T>&, std::span<const std::size_t>);             \
  template Var<T> orientation_pool<T>(const Var<T>&, PoolMode);                             \
  template Var<T> gather<T>(const Var<T>&, std::shared_ptr<const std::vector<std::size_t>>, \
                            Shape);                                                         \
  template Var<T> sum<T>(const Var<T>&);                                                    \
  template Tensor<T> softmax<T>(const Tensor<T>&);

GCNN_INSTANTIATE(float)
GCNN_INSTANTIATE(double)

#undef GCNN_INSTANTIATE

}  // namespace gcnn::ad
