#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

// Hot loops of the engine. Two implementations with identical signatures:
//
//   kernels::serial   - direct per-output-element loops; the reference.
//   kernels::parallel - im2col plus tiled GEMM, OpenMP over output tiles.
//
// The parallel forward pass sums every output element in the serial order
// (bias, then channel and kernel offsets ascending) and is bit-identical to
// the reference. The backward kernels use their own fixed summation order:
// they agree with the reference to rounding and are bit-identical across
// worker counts.

namespace gcnn::kernels {

/// Stride-1 3D cross-correlation over cubic volumes.
struct Conv3dGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t in_dim = 1;
  std::size_t kernel = 1;
  std::size_t pad = 0;
  std::size_t out_dim = 1;

  std::size_t input_size() const { return batch * in_channels * in_dim * in_dim * in_dim; }
  std::size_t weight_size() const { return out_channels * in_channels * kernel * kernel * kernel; }
  std::size_t output_size() const { return batch * out_channels * out_dim * out_dim * out_dim; }
};

/// Throws gcnn::ShapeError for even kernels or kernels larger than the padded input.
Conv3dGeometry make_conv3d_geometry(std::size_t batch, std::size_t in_channels, std::size_t out_channels,
                                    std::size_t in_dim, std::size_t kernel, bool same_padding);

/// 2x2x2 window, stride 2, over `planes` independent cubes of side `in_dim` (even).
struct PoolGeometry {
  std::size_t planes = 1;
  std::size_t in_dim = 2;
  std::size_t out_dim() const { return in_dim / 2; }
};

/// Number of OpenMP workers used by kernels::parallel. Defaults to 1.
int workers();
void set_workers(int n);

// `bias` / `grad_bias` may be empty. Outputs are overwritten, not accumulated.
// maxpool2 argmax holds the flat input index within each plane; ties go to the
// first element in raster order.
namespace serial {

template <typename T>
void conv3d_forward(const Conv3dGeometry& g, std::span<const T> input, std::span<const T> weights,
                    std::span<const T> bias, std::span<T> output);
template <typename T>
void conv3d_backward_input(const Conv3dGeometry& g, std::span<const T> grad_output, std::span<const T> weights,
                           std::span<T> grad_input);
template <typename T>
void conv3d_backward_weight(const Conv3dGeometry& g, std::span<const T> input, std::span<const T> grad_output,
                            std::span<T> grad_weights, std::span<T> grad_bias);
template <typename T>
void maxpool2_forward(const PoolGeometry& g, std::span<const T> input, std::span<T> output,
                      std::span<std::uint32_t> argmax);

}  // namespace serial

namespace parallel {

template <typename T>
void conv3d_forward(const Conv3dGeometry& g, std::span<const T> input, std::span<const T> weights,
                    std::span<const T> bias, std::span<T> output);
template <typename T>
void conv3d_backward_input(const Conv3dGeometry& g, std::span<const T> grad_output, std::span<const T> weights,
                           std::span<T> grad_input);
template <typename T>
void conv3d_backward_weight(const Conv3dGeometry& g, std::span<const T> input, std::span<const T> grad_output,
                            std::span<T> grad_weights, std::span<T> grad_bias);
template <typename T>
void maxpool2_forward(const PoolGeometry& g, std::span<const T> input, std::span<T> output,
                      std::span<std::uint32_t> argmax);

}  // namespace parallel

}  // namespace gcnn::kernels
