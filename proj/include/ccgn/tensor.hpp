#pragma once
// Dense row-major tensors, the small matmul kernels the layer engine is built
// on, and a portable splitmix64 RNG so every seeded result is reproducible
// across compilers and thread counts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace ccgn {

struct ShapeError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ValueError : std::runtime_error { using std::runtime_error::runtime_error; };
struct FormatError : std::runtime_error { using std::runtime_error::runtime_error; };
struct LengthError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ConsistencyError : std::runtime_error { using std::runtime_error::runtime_error; };
struct VersionError : std::runtime_error { using std::runtime_error::runtime_error; };

using Shape = std::vector<int>;

inline long long numel(const Shape& s) {
  long long n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense tensor with positive extents and row-major storage.
template <typename T = float>
struct TensorT {
  Shape shape;
  std::vector<T> data;

  TensorT() = default;
  explicit TensorT(Shape s) : shape(std::move(s)) {
    for (int e : shape)
      if (e <= 0) throw ShapeError("tensor extent must be positive, got " + shape_str(shape));
    data.assign(static_cast<std::size_t>(numel(shape)), T(0));
  }
  TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    for (int e : shape)
      if (e <= 0) throw ShapeError("tensor extent must be positive, got " + shape_str(shape));
    if (static_cast<long long>(data.size()) != numel(shape))
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static TensorT zeros(Shape s) { return TensorT(std::move(s)); }
  static TensorT full(Shape s, T v) {
    TensorT t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  long long size() const { return static_cast<long long>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  T& operator()(int i) { return data[static_cast<std::size_t>(i)]; }
  T operator()(int i) const { return data[static_cast<std::size_t>(i)]; }
  T& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  T operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  T& operator()(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  T operator()(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  T& operator()(int i, int j, int k, int l) {
    return data[((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  T operator()(int i, int j, int k, int l) const {
    return data[((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
};

using Tensor = TensorT<float>;

template <typename T>
inline bool all_finite(const T* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

// Exponent-bits scan; vectorizes, unlike isfinite.
inline bool all_finite(const float* p, std::size_t n) {
  std::uint32_t bad = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t u;
    std::memcpy(&u, p + i, 4);
    bad |= (u & 0x7f800000u) == 0x7f800000u;
  }
  return bad == 0;
}

template <typename T>
inline void require_finite(const TensorT<T>& t, const char* what) {
  if (!all_finite(t.data.data(), t.data.size()))
    throw ValueError(std::string(what) + ": tensor contains non-finite values");
}

// ---------------------------------------------------------------------------
// RNG

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Seeded generator; all randomness in the library flows through this type.
struct Rng {
  std::uint64_t state;
  explicit Rng(std::uint64_t seed) : state(seed) {}
  std::uint64_t next() { return splitmix64(state); }
  /// Uniform in [0,1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  float uniformf() { return static_cast<float>(next() >> 40) * 0x1.0p-24f; }
  float uniformf(float lo, float hi) { return lo + (hi - lo) * uniformf(); }
  /// Uniform integer in [0,n).
  int uniform_int(int n) { return static_cast<int>(next() % static_cast<std::uint64_t>(n)); }
};

inline std::uint64_t hash_mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  return splitmix64(s);
}

/// Stateless uniform in [0,1) from a key tuple; used for dropout masks so the
/// draw for a given element never depends on evaluation order.
inline float hash_uniformf(std::uint64_t key, std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = hash_mix(hash_mix(key, a), b);
  return static_cast<float>(splitmix64(s) >> 40) * 0x1.0p-24f;
}

// ---------------------------------------------------------------------------
// Matmul kernels, row-major throughout. Accumulation order is fixed, so
// results are identical for any thread count.

namespace detail {

// Reduction-dimension tile sized so the streamed operand block stays in L1.
inline int reduction_tile(int n) {
  const int t = 4096 / (n < 1 ? 1 : n);
  return t < 16 ? 16 : t;
}

}  // namespace detail

/// C[M,N] = A[M,K] * B[K,N], adding into C when accumulate is set. Tiled over
/// K so the active B block stays cache-resident; the per-element accumulation
/// order is plain ascending k regardless of tiling.
template <typename T>
inline void matmul(const T* __restrict A, const T* __restrict B, T* __restrict C, int M, int K,
                   int N, bool accumulate = false) {
  if (!accumulate)
    std::fill(C, C + static_cast<std::size_t>(M) * N, T(0));
  const int TK = detail::reduction_tile(N);
  for (int k0 = 0; k0 < K; k0 += TK) {
    const int k1 = std::min(K, k0 + TK);
    int i = 0;
    for (; i + 4 <= M; i += 4) {
      T* __restrict c0 = C + static_cast<std::size_t>(i) * N;
      T* __restrict c1 = c0 + N;
      T* __restrict c2 = c1 + N;
      T* __restrict c3 = c2 + N;
      const T* __restrict a0 = A + static_cast<std::size_t>(i) * K;
      const T* __restrict a1 = a0 + K;
      const T* __restrict a2 = a1 + K;
      const T* __restrict a3 = a2 + K;
      for (int k = k0; k < k1; ++k) {
        const T av0 = a0[k], av1 = a1[k], av2 = a2[k], av3 = a3[k];
        const T* __restrict b = B + static_cast<std::size_t>(k) * N;
        for (int j = 0; j < N; ++j) {
          c0[j] += av0 * b[j];
          c1[j] += av1 * b[j];
          c2[j] += av2 * b[j];
          c3[j] += av3 * b[j];
        }
      }
    }
    for (; i < M; ++i) {
      T* __restrict c = C + static_cast<std::size_t>(i) * N;
      const T* __restrict a = A + static_cast<std::size_t>(i) * K;
      for (int k = k0; k < k1; ++k) {
        const T av = a[k];
        const T* __restrict b = B + static_cast<std::size_t>(k) * N;
        for (int j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  }
}

/// C[K,N] += A^T * B with A[M,K], B[M,N]. A is transposed into thread-local
/// scratch first so the accumulation walks C row by row.
template <typename T>
inline void matmul_at_b(const T* __restrict A, const T* __restrict B, T* __restrict C, int M,
                        int K, int N) {
  thread_local std::vector<T> at;
  at.resize(static_cast<std::size_t>(M) * K);
  for (int m = 0; m < M; ++m)
    for (int k = 0; k < K; ++k) at[static_cast<std::size_t>(k) * M + m] = A[static_cast<std::size_t>(m) * K + k];
  matmul(at.data(), B, C, K, M, N, /*accumulate=*/true);
}

/// C[M,K] = A[M,N] * B^T with B[K,N], adding into C when accumulate is set.
/// Tiled over K so the active block of B rows stays cache-resident.
template <typename T>
inline void matmul_a_bt(const T* __restrict A, const T* __restrict B, T* __restrict C, int M,
                        int N, int K, bool accumulate = false) {
  const int TK = detail::reduction_tile(N);
  for (int k0 = 0; k0 < K; k0 += TK) {
    const int k1 = std::min(K, k0 + TK);
    for (int i = 0; i < M; ++i) {
      const T* __restrict a = A + static_cast<std::size_t>(i) * N;
      T* __restrict c = C + static_cast<std::size_t>(i) * K;
      for (int k = k0; k < k1; ++k) {
        const T* __restrict b = B + static_cast<std::size_t>(k) * N;
        T acc = 0;
        for (int j = 0; j < N; ++j) acc += a[j] * b[j];
        c[k] = accumulate ? c[k] + acc : acc;
      }
    }
  }
}

/// Same product computed by transposing B into scratch and running the saxpy
/// kernel; the fast choice when K is the wide dimension and N is small.
template <typename T>
inline void matmul_a_bt_wide(const T* __restrict A, const T* __restrict B, T* __restrict C, int M,
                             int N, int K, bool accumulate = false) {
  thread_local std::vector<T> bt;
  bt.resize(static_cast<std::size_t>(N) * K);
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < N; ++j) bt[static_cast<std::size_t>(j) * K + k] = B[static_cast<std::size_t>(k) * N + j];
  matmul(A, bt.data(), C, M, N, K, accumulate);
}

// ---------------------------------------------------------------------------
// Convolution primitives

enum class Padding { Same, Valid };
enum class Mode { Train, Infer };

struct ConvGeom {
  int in_h = 0, in_w = 0, in_c = 0;
  int kh = 0, kw = 0, out_c = 0;
  int out_h = 0, out_w = 0;
  int stride = 1;
  int pad_top = 0, pad_left = 0;
  int patch() const { return kh * kw * in_c; }
  int positions() const { return out_h * out_w; }
};

inline ConvGeom conv_geometry(const Shape& in, const Shape& kernel, int stride, Padding padding) {
  if (in.size() != 3) throw ShapeError("conv2d: input must be rank 3 [H,W,C], got " + shape_str(in));
  if (kernel.size() != 4)
    throw ShapeError("conv2d: kernel must be rank 4 [kh,kw,Cin,Cout], got " + shape_str(kernel));
  if (stride < 1) throw ValueError("conv2d: stride must be positive");
  ConvGeom g;
  g.in_h = in[0]; g.in_w = in[1]; g.in_c = in[2];
  g.kh = kernel[0]; g.kw = kernel[1]; g.out_c = kernel[3];
  g.stride = stride;
  if (kernel[2] != g.in_c)
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel[2]) +
                     " input channels, input has " + std::to_string(g.in_c));
  if (padding == Padding::Valid) {
    if (g.kh > g.in_h || g.kw > g.in_w)
      throw ShapeError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                       " exceeds input " + std::to_string(g.in_h) + "x" + std::to_string(g.in_w));
    g.out_h = (g.in_h - g.kh) / stride + 1;
    g.out_w = (g.in_w - g.kw) / stride + 1;
  } else {
    g.out_h = (g.in_h + stride - 1) / stride;
    g.out_w = (g.in_w + stride - 1) / stride;
    int pad_h = std::max((g.out_h - 1) * stride + g.kh - g.in_h, 0);
    int pad_w = std::max((g.out_w - 1) * stride + g.kw - g.in_w, 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
  }
  return g;
}

/// Patch matrix extraction: patches is [positions, kh*kw*in_c]. Inner copies
/// are hand loops; the runtime-sized spans are too small for libc calls.
template <typename T>
inline void im2col(const T* __restrict x, const ConvGeom& g, T* __restrict patches) {
  const int K = g.patch();
  const int c = g.in_c;
  for (int oh = 0; oh < g.out_h; ++oh) {
    for (int ow = 0; ow < g.out_w; ++ow) {
      T* __restrict row = patches + (static_cast<std::size_t>(oh) * g.out_w + ow) * K;
      for (int u = 0; u < g.kh; ++u) {
        const int ih = oh * g.stride + u - g.pad_top;
        T* __restrict dst = row + static_cast<std::size_t>(u) * g.kw * c;
        if (ih < 0 || ih >= g.in_h) {
          for (int j = 0; j < g.kw * c; ++j) dst[j] = T(0);
          continue;
        }
        for (int v = 0; v < g.kw; ++v) {
          const int iw = ow * g.stride + v - g.pad_left;
          T* __restrict d = dst + static_cast<std::size_t>(v) * c;
          if (iw < 0 || iw >= g.in_w) {
            for (int j = 0; j < c; ++j) d[j] = T(0);
          } else {
            const T* __restrict s = x + (static_cast<std::size_t>(ih) * g.in_w + iw) * c;
            for (int j = 0; j < c; ++j) d[j] = s[j];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-add patch rows back onto the image.
template <typename T>
inline void col2im_add(const T* __restrict patches, const ConvGeom& g, T* __restrict x) {
  const int K = g.patch();
  for (int oh = 0; oh < g.out_h; ++oh) {
    for (int ow = 0; ow < g.out_w; ++ow) {
      const T* __restrict row = patches + (static_cast<std::size_t>(oh) * g.out_w + ow) * K;
      for (int u = 0; u < g.kh; ++u) {
        const int ih = oh * g.stride + u - g.pad_top;
        if (ih < 0 || ih >= g.in_h) continue;
        for (int v = 0; v < g.kw; ++v) {
          const int iw = ow * g.stride + v - g.pad_left;
          if (iw < 0 || iw >= g.in_w) continue;
          const T* __restrict s = row + (static_cast<std::size_t>(u) * g.kw + v) * g.in_c;
          T* __restrict d = x + (static_cast<std::size_t>(ih) * g.in_w + iw) * g.in_c;
          for (int c = 0; c < g.in_c; ++c) d[c] += s[c];
        }
      }
    }
  }
}

/// Cross-correlation of a [H,W,Cin] input with a [kh,kw,Cin,Cout] kernel.
template <typename T>
inline TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& kernel, int stride, Padding padding) {
  require_finite(x, "conv2d input");
  require_finite(kernel, "conv2d kernel");
  const ConvGeom g = conv_geometry(x.shape, kernel.shape, stride, padding);
  std::vector<T> patches(static_cast<std::size_t>(g.positions()) * g.patch());
  im2col(x.data.data(), g, patches.data());
  TensorT<T> out({g.out_h, g.out_w, g.out_c});
  matmul(patches.data(), kernel.data.data(), out.data.data(), g.positions(), g.patch(), g.out_c);
  return out;
}

/// Adjoint of the same-padded conv2d that maps [h*s, w*s, Cin] -> [h, w, Cout]:
/// takes [h, w, Cout] and returns [h*s, w*s, Cin] with the shared kernel.
template <typename T>
inline TensorT<T> conv2d_transpose(const TensorT<T>& x, const TensorT<T>& kernel, int stride) {
  require_finite(x, "conv2d_transpose input");
  require_finite(kernel, "conv2d_transpose kernel");
  if (x.shape.size() != 3)
    throw ShapeError("conv2d_transpose: input must be rank 3, got " + shape_str(x.shape));
  if (kernel.shape.size() != 4)
    throw ShapeError("conv2d_transpose: kernel must be rank 4, got " + shape_str(kernel.shape));
  if (kernel.shape[3] != x.shape[2])
    throw ShapeError("conv2d_transpose: kernel expects " + std::to_string(kernel.shape[3]) +
                     " input channels, input has " + std::to_string(x.shape[2]));
  const Shape big{x.shape[0] * stride, x.shape[1] * stride, kernel.shape[2]};
  const ConvGeom g = conv_geometry(big, kernel.shape, stride, Padding::Same);
  std::vector<T> patches(static_cast<std::size_t>(g.positions()) * g.patch());
  matmul_a_bt_wide(x.data.data(), kernel.data.data(), patches.data(), g.positions(), g.out_c,
                   g.patch());
  TensorT<T> out(big);
  col2im_add(patches.data(), g, out.data.data());
  return out;
}

}  // namespace ccgn
