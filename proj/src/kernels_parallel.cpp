#include <omp.h>

#include <algorithm>
#include <limits>
#include <vector>

#include "gcnn/kernels.hpp"

namespace gcnn::kernels {

namespace {
int g_workers = 1;
}

int workers() { return g_workers; }

void set_workers(int n) { g_workers = std::max(1, n); }

namespace parallel {

namespace {

using Index = long long;

// Convolutions run as GEMMs over an unfolded input ("col" matrix of shape
// [C*k^3, positions]) built for a chunk of output positions at a time.

constexpr std::size_t kColBudget = std::size_t{1} << 20;  // elements per col buffer

std::size_t chunk_positions(std::size_t rows, std::size_t positions) {
  const std::size_t pc = std::max<std::size_t>(64, kColBudget / std::max<std::size_t>(rows, 1)) / 32 * 32;
  return std::min(pc, positions);
}

// col[r][j] = in[c](o + kernel offset - pad) for output position p0 + j, or 0 when outside.
template <typename T>
void im2col(const Conv3dGeometry& g, const T* in, std::size_t p0, std::size_t n, T* col) {
  const std::size_t di = g.in_dim, d_o = g.out_dim, k = g.kernel, k3 = k * k * k;
  const std::size_t in_plane = di * di * di;
  const Index rows = static_cast<Index>(g.in_channels * k3);
  const auto pad = static_cast<long>(g.pad);
  const auto dim = static_cast<long>(di);

#pragma omp parallel for schedule(static) num_threads(g_workers)
  for (Index r = 0; r < rows; ++r) {
    const std::size_t c = static_cast<std::size_t>(r) / k3, kk = static_cast<std::size_t>(r) % k3;
    const long kz = static_cast<long>(kk / (k * k)), ky = static_cast<long>(kk / k % k),
               kx = static_cast<long>(kk % k);
    const T* src = in + c * in_plane;
    T* dst = col + static_cast<std::size_t>(r) * n;
    std::size_t ox = p0 % d_o, oy = p0 / d_o % d_o, oz = p0 / (d_o * d_o);
    for (std::size_t j = 0; j < n; ++j) {
      const long iz = static_cast<long>(oz) + kz - pad, iy = static_cast<long>(oy) + ky - pad,
                 ix = static_cast<long>(ox) + kx - pad;
      dst[j] = (iz < 0 || iy < 0 || ix < 0 || iz >= dim || iy >= dim || ix >= dim)
                   ? T(0)
                   : src[static_cast<std::size_t>((iz * dim + iy) * dim + ix)];
      if (++ox == d_o) {
        ox = 0;
        if (++oy == d_o) {
          oy = 0;
          ++oz;
        }
      }
    }
  }
}

// Inverse of im2col: in[c](o + offset - pad) += col[r][j].
template <typename T>
void col2im_add(const Conv3dGeometry& g, const T* col, std::size_t p0, std::size_t n, T* in) {
  const std::size_t di = g.in_dim, d_o = g.out_dim, k = g.kernel, k3 = k * k * k;
  const std::size_t in_plane = di * di * di;
  const Index channels = static_cast<Index>(g.in_channels);
  const auto pad = static_cast<long>(g.pad);
  const auto dim = static_cast<long>(di);

#pragma omp parallel for schedule(static) num_threads(g_workers)
  for (Index ci = 0; ci < channels; ++ci) {
    const std::size_t c = static_cast<std::size_t>(ci);
    T* dst = in + c * in_plane;
    for (std::size_t kk = 0; kk < k3; ++kk) {
      const long kz = static_cast<long>(kk / (k * k)), ky = static_cast<long>(kk / k % k),
                 kx = static_cast<long>(kk % k);
      const T* src = col + (c * k3 + kk) * n;
      std::size_t ox = p0 % d_o, oy = p0 / d_o % d_o, oz = p0 / (d_o * d_o);
      for (std::size_t j = 0; j < n; ++j) {
        const long iz = static_cast<long>(oz) + kz - pad, iy = static_cast<long>(oy) + ky - pad,
                   ix = static_cast<long>(ox) + kx - pad;
        if (iz >= 0 && iy >= 0 && ix >= 0 && iz < dim && iy < dim && ix < dim)
          dst[static_cast<std::size_t>((iz * dim + iy) * dim + ix)] += src[j];
        if (++ox == d_o) {
          ox = 0;
          if (++oy == d_o) {
            oy = 0;
            ++oz;
          }
        }
      }
    }
  }
}

constexpr std::size_t kTileM = 6;
constexpr std::size_t kTileN = 32;

// Register tile of MI rows by kTileN columns; r ascending for every element.
template <std::size_t MI, typename T>
void gemm_tile(std::size_t depth, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  T acc[MI][kTileN];
  for (std::size_t i = 0; i < MI; ++i)
    for (std::size_t j = 0; j < kTileN; ++j) acc[i][j] = c[i * ldc + j];
  for (std::size_t r = 0; r < depth; ++r) {
    const T* brow = b + r * ldb;
    for (std::size_t i = 0; i < MI; ++i) {
      const T av = a[i * lda + r];
      for (std::size_t j = 0; j < kTileN; ++j) acc[i][j] += av * brow[j];
    }
  }
  for (std::size_t i = 0; i < MI; ++i)
    for (std::size_t j = 0; j < kTileN; ++j) c[i * ldc + j] = acc[i][j];
}

// C[i][j] += sum_r A[i][r] * B[r][j], r ascending for every element. Each
// element is owned by one tile, so the result does not depend on how tiles
// are spread over workers.
template <typename T>
void gemm_rows(std::size_t mi, std::size_t depth, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
               std::size_t ldc) {
  switch (mi) {
    case 6: gemm_tile<6>(depth, a, lda, b, ldb, c, ldc); break;
    case 5: gemm_tile<5>(depth, a, lda, b, ldb, c, ldc); break;
    case 4: gemm_tile<4>(depth, a, lda, b, ldb, c, ldc); break;
    case 3: gemm_tile<3>(depth, a, lda, b, ldb, c, ldc); break;
    case 2: gemm_tile<2>(depth, a, lda, b, ldb, c, ldc); break;
    default: gemm_tile<1>(depth, a, lda, b, ldb, c, ldc); break;
  }
}

// C[i][j] += sum_r A[i][r] * B[r][j], r ascending for every element. Each
// element is owned by one tile, so the result does not depend on how tiles
// are spread over workers.
template <typename T>
void gemm_accumulate(std::size_t m, std::size_t n, std::size_t depth, const T* a, std::size_t lda, const T* b,
                     std::size_t ldb, T* c, std::size_t ldc) {
  const std::size_t mt = (m + kTileM - 1) / kTileM, nt = (n + kTileN - 1) / kTileN;
  const std::size_t full = n / kTileN * kTileN, rest = n - full;
  // Trailing columns are zero-padded to a whole tile.
  std::vector<T> tail(rest ? depth * kTileN : 0, T(0));
  for (std::size_t r = 0; r < depth && rest; ++r)
    std::copy_n(b + r * ldb + full, rest, tail.data() + r * kTileN);
  const Index tiles = static_cast<Index>(mt * nt);

#pragma omp parallel for schedule(static) num_threads(g_workers)
  for (Index t = 0; t < tiles; ++t) {
    // Row tiles vary fastest so a column panel of B stays in cache.
    const std::size_t i0 = static_cast<std::size_t>(t) % mt * kTileM, j0 = static_cast<std::size_t>(t) / mt * kTileN;
    const std::size_t mi = std::min(kTileM, m - i0);
    if (j0 < full) {
      gemm_rows(mi, depth, a + i0 * lda, lda, b + j0, ldb, c + i0 * ldc + j0, ldc);
      continue;
    }
    T ct[kTileM * kTileN] = {};
    for (std::size_t i = 0; i < mi; ++i) std::copy_n(c + (i0 + i) * ldc + j0, rest, ct + i * kTileN);
    gemm_rows(mi, depth, a + i0 * lda, lda, tail.data(), kTileN, ct, kTileN);
    for (std::size_t i = 0; i < mi; ++i) std::copy_n(ct + i * kTileN, rest, c + (i0 + i) * ldc + j0);
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out) {
  constexpr std::size_t kBlock = 32;
  const std::size_t rb = (rows + kBlock - 1) / kBlock, cb = (cols + kBlock - 1) / kBlock;
  const Index blocks = static_cast<Index>(rb * cb);
#pragma omp parallel for schedule(static) num_threads(g_workers)
  for (Index t = 0; t < blocks; ++t) {
    const std::size_t r0 = static_cast<std::size_t>(t) / cb * kBlock, c0 = static_cast<std::size_t>(t) % cb * kBlock;
    for (std::size_t r = r0; r < std::min(rows, r0 + kBlock); ++r)
      for (std::size_t c = c0; c < std::min(cols, c0 + kBlock); ++c) out[c * rows + r] = in[r * cols + c];
  }
}

}  // namespace

template <typename T>
void conv3d_forward(const Conv3dGeometry& g, std::span<const T> input, std::span<const T> weights,
                    std::span<const T> bias, std::span<T> output) {
  const std::size_t k3 = g.kernel * g.kernel * g.kernel, rows = g.in_channels * k3;
  const std::size_t positions = g.out_dim * g.out_dim * g.out_dim, in_plane = g.in_dim * g.in_dim * g.in_dim;
  const std::size_t pc = chunk_positions(rows, positions);
  std::vector<T> col(rows * pc);

  for (std::size_t b = 0; b < g.batch; ++b) {
    T* out = output.data() + b * g.out_channels * positions;
    for (std::size_t f = 0; f < g.out_channels; ++f)
      std::fill(out + f * positions, out + (f + 1) * positions, bias.empty() ? T(0) : bias[f]);
    for (std::size_t p0 = 0; p0 < positions; p0 += pc) {
      const std::size_t n = std::min(pc, positions - p0);
      im2col(g, input.data() + b * g.in_channels * in_plane, p0, n, col.data());
      gemm_accumulate(g.out_channels, n, rows, weights.data(), rows, col.data(), n, out + p0, positions);
    }
  }
}

template <typename T>
void conv3d_backward_input(const Conv3dGeometry& g, std::span<const T> grad_output, std::span<const T> weights,
                           std::span<T> grad_input) {
  const std::size_t k3 = g.kernel * g.kernel * g.kernel, rows = g.in_channels * k3;
  const std::size_t positions = g.out_dim * g.out_dim * g.out_dim, in_plane = g.in_dim * g.in_dim * g.in_dim;
  const std::size_t pc = chunk_positions(rows, positions);
  std::vector<T> dcol(rows * pc), wt(rows * g.out_channels);
  for (std::size_t f = 0; f < g.out_channels; ++f)
    for (std::size_t r = 0; r < rows; ++r) wt[r * g.out_channels + f] = weights[f * rows + r];
  std::fill(grad_input.begin(), grad_input.end(), T(0));

  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* gout = grad_output.data() + b * g.out_channels * positions;
    for (std::size_t p0 = 0; p0 < positions; p0 += pc) {
      const std::size_t n = std::min(pc, positions - p0);
      std::fill(dcol.begin(), dcol.begin() + static_cast<std::ptrdiff_t>(rows * n), T(0));
      gemm_accumulate(rows, n, g.out_channels, wt.data(), g.out_channels, gout + p0, positions, dcol.data(), n);
      col2im_add(g, dcol.data(), p0, n, grad_input.data() + b * g.in_channels * in_plane);
    }
  }
}

template <typename T>
void conv3d_backward_weight(const Conv3dGeometry& g, std::span<const T> input, std::span<const T> grad_output,
                            std::span<T> grad_weights, std::span<T> grad_bias) {
  const std::size_t k3 = g.kernel * g.kernel * g.kernel, rows = g.in_channels * k3;
  const std::size_t positions = g.out_dim * g.out_dim * g.out_dim, in_plane = g.in_dim * g.in_dim * g.in_dim;
  const std::size_t pc = chunk_positions(rows, positions);
  std::vector<T> col(rows * pc), colt(rows * pc);
  std::fill(grad_weights.begin(), grad_weights.end(), T(0));

  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* gout = grad_output.data() + b * g.out_channels * positions;
    for (std::size_t p0 = 0; p0 < positions; p0 += pc) {
      const std::size_t n = std::min(pc, positions - p0);
      im2col(g, input.data() + b * g.in_channels * in_plane, p0, n, col.data());
      transpose(rows, n, col.data(), colt.data());
      gemm_accumulate(g.out_channels, rows, n, gout + p0, positions, colt.data(), rows, grad_weights.data(), rows);
    }
  }

  if (grad_bias.empty()) return;
  const Index filters = static_cast<Index>(g.out_channels);
#pragma omp parallel for schedule(static) num_threads(g_workers)
  for (Index fi = 0; fi < filters; ++fi) {
    const std::size_t f = static_cast<std::size_t>(fi);
    T acc = T(0);
    for (std::size_t b = 0; b < g.batch; ++b) {
      const T* gout = grad_output.data() + (b * g.out_channels + f) * positions;
      for (std::size_t i = 0; i < positions; ++i) acc += gout[i];
    }
    grad_bias[f] = acc;
  }
}

template <typename T>
void maxpool2_forward(const PoolGeometry& g, std::span<const T> input, std::span<T> output,
                      std::span<std::uint32_t> argmax) {
  const std::size_t di = g.in_dim, d_o = g.out_dim();
  const std::size_t in_plane = di * di * di, out_plane = d_o * d_o * d_o;
  const Index planes = static_cast<Index>(g.planes);

#pragma omp parallel for schedule(static) num_threads(g_workers)
  for (Index pi = 0; pi < planes; ++pi) {
    const std::size_t p = static_cast<std::size_t>(pi);
    const T* in = input.data() + p * in_plane;
    for (std::size_t oz = 0; oz < d_o; ++oz)
      for (std::size_t oy = 0; oy < d_o; ++oy)
        for (std::size_t ox = 0; ox < d_o; ++ox) {
          std::size_t best_at = ((2 * oz) * di + 2 * oy) * di + 2 * ox;
          T best = in[best_at];
          for (std::size_t w = 1; w < 8; ++w) {
            const std::size_t at = ((2 * oz + (w >> 2)) * di + 2 * oy + ((w >> 1) & 1)) * di + 2 * ox + (w & 1);
            if (in[at] > best) {
              best = in[at];
              best_at = at;
            }
          }
          const std::size_t o = p * out_plane + (oz * d_o + oy) * d_o + ox;
          output[o] = best;
          argmax[o] = static_cast<std::uint32_t>(best_at);
        }
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

}  // namespace parallel
}  // namespace gcnn::kernels
