#include <limits>

#include "gcnn/errors.hpp"
#include "gcnn/kernels.hpp"

namespace gcnn::kernels {

Conv3dGeometry make_conv3d_geometry(std::size_t batch, std::size_t in_channels, std::size_t out_channels,
                                    std::size_t in_dim, std::size_t kernel, bool same_padding) {
  if (kernel % 2 == 0) throw ShapeError("conv3d: kernel size must be odd, got " + std::to_string(kernel));
  Conv3dGeometry g;
  g.batch = batch;
  g.in_channels = in_channels;
  g.out_channels = out_channels;
  g.in_dim = in_dim;
  g.kernel = kernel;
  g.pad = same_padding ? (kernel - 1) / 2 : 0;
  if (in_dim + 2 * g.pad < kernel)
    throw ShapeError("conv3d: kernel " + std::to_string(kernel) + " larger than input " + std::to_string(in_dim));
  g.out_dim = in_dim + 2 * g.pad - kernel + 1;
  return g;
}

namespace serial {

namespace {

inline bool source_coord(std::size_t out, std::size_t k, std::size_t pad, std::size_t dim, std::size_t& in) {
  // in = out + k - pad, rejected when outside [0, dim)
  const std::size_t shifted = out + k;
  if (shifted < pad) return false;
  in = shifted - pad;
  return in < dim;
}

}  // namespace

template <typename T>
void conv3d_forward(const Conv3dGeometry& g, std::span<const T> input, std::span<const T> weights,
                    std::span<const T> bias, std::span<T> output) {
  const std::size_t di = g.in_dim, d_o = g.out_dim, k = g.kernel;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t f = 0; f < g.out_channels; ++f)
      for (std::size_t oz = 0; oz < d_o; ++oz)
        for (std::size_t oy = 0; oy < d_o; ++oy)
          for (std::size_t ox = 0; ox < d_o; ++ox) {
            T acc = bias.empty() ? T(0) : bias[f];
            for (std::size_t c = 0; c < g.in_channels; ++c)
              for (std::size_t kz = 0; kz < k; ++kz) {
                std::size_t iz;
                if (!source_coord(oz, kz, g.pad, di, iz)) continue;
                for (std::size_t ky = 0; ky < k; ++ky) {
                  std::size_t iy;
                  if (!source_coord(oy, ky, g.pad, di, iy)) continue;
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    std::size_t ix;
                    if (!source_coord(ox, kx, g.pad, di, ix)) continue;
                    acc += weights[(((f * g.in_channels + c) * k + kz) * k + ky) * k + kx] *
                           input[(((b * g.in_channels + c) * di + iz) * di + iy) * di + ix];
                  }
                }
              }
            output[(((b * g.out_channels + f) * d_o + oz) * d_o + oy) * d_o + ox] = acc;
          }
}

template <typename T>
void conv3d_backward_input(const Conv3dGeometry& g, std::span<const T> grad_output, std::span<const T> weights,
                           std::span<T> grad_input) {
  const std::size_t di = g.in_dim, d_o = g.out_dim, k = g.kernel;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < g.in_channels; ++c)
      for (std::size_t iz = 0; iz < di; ++iz)
        for (std::size_t iy = 0; iy < di; ++iy)
          for (std::size_t ix = 0; ix < di; ++ix) {
            T acc = T(0);
            for (std::size_t f = 0; f < g.out_channels; ++f)
              for (std::size_t kz = 0; kz < k; ++kz) {
                // out = in - k + pad
                if (iz + g.pad < kz || iz + g.pad - kz >= d_o) continue;
                const std::size_t oz = iz + g.pad - kz;
                for (std::size_t ky = 0; ky < k; ++ky) {
                  if (iy + g.pad < ky || iy + g.pad - ky >= d_o) continue;
                  const std::size_t oy = iy + g.pad - ky;
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    if (ix + g.pad < kx || ix + g.pad - kx >= d_o) continue;
                    const std::size_t ox = ix + g.pad - kx;
                    acc += weights[(((f * g.in_channels + c) * k + kz) * k + ky) * k + kx] *
                           grad_output[(((b * g.out_channels + f) * d_o + oz) * d_o + oy) * d_o + ox];
                  }
                }
              }
            grad_input[(((b * g.in_channels + c) * di + iz) * di + iy) * di + ix] = acc;
          }
}

template <typename T>
void conv3d_backward_weight(const Conv3dGeometry& g, std::span<const T> input, std::span<const T> grad_output,
                            std::span<T> grad_weights, std::span<T> grad_bias) {
  const std::size_t di = g.in_dim, d_o = g.out_dim, k = g.kernel;
  for (std::size_t f = 0; f < g.out_channels; ++f)
    for (std::size_t c = 0; c < g.in_channels; ++c)
      for (std::size_t kz = 0; kz < k; ++kz)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            T acc = T(0);
            for (std::size_t b = 0; b < g.batch; ++b)
              for (std::size_t oz = 0; oz < d_o; ++oz) {
                std::size_t iz;
                if (!source_coord(oz, kz, g.pad, di, iz)) continue;
                for (std::size_t oy = 0; oy < d_o; ++oy) {
                  std::size_t iy;
                  if (!source_coord(oy, ky, g.pad, di, iy)) continue;
                  for (std::size_t ox = 0; ox < d_o; ++ox) {
                    std::size_t ix;
                    if (!source_coord(ox, kx, g.pad, di, ix)) continue;
                    acc += grad_output[(((b * g.out_channels + f) * d_o + oz) * d_o + oy) * d_o + ox] *
                           input[(((b * g.in_channels + c) * di + iz) * di + iy) * di + ix];
                  }
                }
              }
            grad_weights[(((f * g.in_channels + c) * k + kz) * k + ky) * k + kx] = acc;
          }

  if (grad_bias.empty()) return;
  const std::size_t plane = d_o * d_o * d_o;
  for (std::size_t f = 0; f < g.out_channels; ++f) {
    T acc = T(0);
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t i = 0; i < plane; ++i) acc += grad_output[(b * g.out_channels + f) * plane + i];
    grad_bias[f] = acc;
  }
}

template <typename T>
void maxpool2_forward(const PoolGeometry& g, std::span<const T> input, std::span<T> output,
                      std::span<std::uint32_t> argmax) {
  const std::size_t di = g.in_dim, d_o = g.out_dim();
  const std::size_t in_plane = di * di * di, out_plane = d_o * d_o * d_o;
  for (std::size_t p = 0; p < g.planes; ++p)
    for (std::size_t oz = 0; oz < d_o; ++oz)
      for (std::size_t oy = 0; oy < d_o; ++oy)
        for (std::size_t ox = 0; ox < d_o; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          std::uint32_t best_at = 0;
          bool first = true;
          for (std::size_t wz = 0; wz < 2; ++wz)
            for (std::size_t wy = 0; wy < 2; ++wy)
              for (std::size_t wx = 0; wx < 2; ++wx) {
                const std::size_t at = ((2 * oz + wz) * di + 2 * oy + wy) * di + 2 * ox + wx;
                const T v = input[p * in_plane + at];
                if (first || v > best) {
                  best = v;
                  best_at = static_cast<std::uint32_t>(at);
                  first = false;
                }
              }
          const std::size_t o = p * out_plane + (oz * d_o + oy) * d_o + ox;
          output[o] = best;
          argmax[o] = best_at;
        }
}

#define GCNN_INSTANTIATE(T)                                                                                   \
  template void conv3d_forward<T>(const Conv3dGeometry&, std::span<const T>, std::span<const T>,              \
                                  std::span<const T>, std::span<T>);                                          \
  template void conv3d_backward_input<T>(const Conv3dGeometry&, std::span<const T>, std::span<const T>,       \
                                         std::span<T>);                                                       \
  template void conv3d_backward_weight<T>(const Conv3dGeometry&, std::span<const T>, std::span<const T>,      \
                                          std::span<T>, std::span<T>);                                        \
  template void maxpool2_forward<T>(const PoolGeometry&, std::span<const T>, std::span<T>,                    \
                                    std::span<std::uint32_t>);

GCNN_INSTANTIATE(float)
GCNN_INSTANTIATE(double)

#undef GCNN_INSTANTIATE

}  // namespace serial
}  // namespace gcnn::kernels
