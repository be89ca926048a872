#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

namespace stgaze::detail {

// C[MxN] = (acc ? C : 0) + A[MxK] * B[KxN].
// Loop order i-k-j keeps the inner loop over independent contiguous outputs,
// so it vectorizes without reassociating the reduction.
template <typename S>
void gemm_nn(int m, int k, int n, const S* a, const S* b, S* c, bool acc) {
  for (int i = 0; i < m; ++i) {
    S* ci = c + static_cast<std::size_t>(i) * n;
    if (!acc) {
      for (int j = 0; j < n; ++j) ci[j] = S(0);
    }
    const S* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const S av = ai[p];
      const S* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// out[KxN] += A[MxK]^T * B[MxN].
template <typename S>
void gemm_at_b(int m, int k, int n, const S* a, const S* b, S* out) {
  for (int i = 0; i < m; ++i) {
    const S* ai = a + static_cast<std::size_t>(i) * k;
    const S* bi = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = ai[p];
      S* op = out + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) op[j] += av * bi[j];
    }
  }
}

template <typename S>
void transpose(int rows, int cols, const S* in, S* out) {
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      out[static_cast<std::size_t>(j) * rows + i] = in[static_cast<std::size_t>(i) * cols + j];
    }
  }
}

// Unfolds conv patches: col[(c*kh+u)*kw+v][y*ow+x] = in[c][y*stride+u-ph][x*stride+v-pw],
// zero where the source index is out of range.
template <typename S>
void im2col(const S* in, int c_in, int h, int w, int kh, int kw, int stride, int ph, int pw,
            int oh, int ow, S* col) {
  const std::int64_t patches = static_cast<std::int64_t>(oh) * ow;
  for (int c = 0; c < c_in; ++c) {
    const S* plane = in + static_cast<std::size_t>(c) * h * w;
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        S* row = col + (static_cast<std::size_t>(c) * kh + u) * kw * patches +
                 static_cast<std::size_t>(v) * patches;
        for (int y = 0; y < oh; ++y) {
          const int sy = y * stride + u - ph;
          S* dst = row + static_cast<std::size_t>(y) * ow;
          if (sy < 0 || sy >= h) {
            for (int x = 0; x < ow; ++x) dst[x] = S(0);
            continue;
          }
          const S* src = plane + static_cast<std::size_t>(sy) * w;
          for (int x = 0; x < ow; ++x) {
            const int sx = x * stride + v - pw;
            dst[x] = (sx >= 0 && sx < w) ? src[sx] : S(0);
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col.
template <typename S>
void col2im(const S* col, int c_in, int h, int w, int kh, int kw, int stride, int ph, int pw,
            int oh, int ow, S* in_grad) {
  const std::int64_t patches = static_cast<std::int64_t>(oh) * ow;
  for (int c = 0; c < c_in; ++c) {
    S* plane = in_grad + static_cast<std::size_t>(c) * h * w;
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        const S* row = col + (static_cast<std::size_t>(c) * kh + u) * kw * patches +
                       static_cast<std::size_t>(v) * patches;
        for (int y = 0; y < oh; ++y) {
          const int sy = y * stride + u - ph;
          if (sy < 0 || sy >= h) continue;
          S* dst = plane + static_cast<std::size_t>(sy) * w;
          const S* src = row + static_cast<std::size_t>(y) * ow;
          for (int x = 0; x < ow; ++x) {
            const int sx = x * stride + v - pw;
            if (sx >= 0 && sx < w) dst[sx] += src[x];
          }
        }
      }
    }
  }
}

}  // namespace stgaze::detail
