#pragma once
// Single-input single-output layer graphs with reverse-mode gradients and a
// batched forward (tangent) sweep for exact Jacobians.
//
// The layer vocabulary is fixed: conv2d, conv2d_transpose, dense, relu,
// leaky_relu, tanh, sigmoid, dropout, global average pool, residual add.
// Nodes form a DAG built in evaluation order; node i only reads nodes < i.

#include <cassert>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ccgn/tensor.hpp"

namespace ccgn {

enum class LayerKind {
  Conv2d,
  ConvTranspose2d,
  Dense,
  Relu,
  LeakyRelu,
  Tanh,
  Sigmoid,
  Dropout,
  GlobalAvgPool,
  ResidualAdd,
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::ConvTranspose2d: return "conv2d_transpose";
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
    case LayerKind::LeakyRelu: return "leaky_relu";
    case LayerKind::Tanh: return "tanh";
    case LayerKind::Sigmoid: return "sigmoid";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::GlobalAvgPool: return "global_avg_pool";
    case LayerKind::ResidualAdd: return "residual_add";
  }
  return "?";
}

struct Node {
  LayerKind kind;
  int src = -1;   // producing node, -1 for the graph input
  int src2 = -1;  // second operand of residual_add
  float param = 0.f;  // leaky slope or dropout rate
  int stride = 1;
  int kernel = -1, bias = -1;  // parameter indices
  Shape out_shape;
  ConvGeom geom;  // conv kinds only; for transpose, in conv orientation
  std::string label;
};

template <typename T = float>
struct GraphT {
  Shape input_shape;
  std::vector<Node> nodes;
  std::vector<std::string> param_names;
  std::vector<TensorT<T>> params;

  explicit GraphT(Shape in = {}) : input_shape(std::move(in)) {}

  int output() const { return static_cast<int>(nodes.size()) - 1; }
  const Shape& node_shape(int i) const { return i < 0 ? input_shape : nodes[i].out_shape; }
  int node_dim(int i) const { return static_cast<int>(numel(node_shape(i))); }
  int input_dim() const { return static_cast<int>(numel(input_shape)); }
  int output_dim() const { return node_dim(output()); }
  const Shape& output_shape() const { return node_shape(output()); }

  // -- builder -------------------------------------------------------------

  int conv2d(int src, int kh, int kw, int out_c, int stride, Padding padding,
             const std::string& name) {
    Node n;
    n.kind = LayerKind::Conv2d;
    n.src = check_src(src);
    n.stride = stride;
    n.label = name;
    const Shape& in = node_shape(src);
    n.geom = conv_geometry(in, {kh, kw, in.size() == 3 ? in[2] : -1, out_c}, stride, padding);
    n.out_shape = {n.geom.out_h, n.geom.out_w, out_c};
    n.kernel = add_param(name + "/kernel", {kh, kw, n.geom.in_c, out_c});
    n.bias = add_param(name + "/bias", {out_c});
    nodes.push_back(std::move(n));
    return output();
  }

  /// Upsampling transpose: maps [h,w,Cin] to [h*stride, w*stride, out_c];
  /// the kernel is stored in conv orientation [kh,kw,out_c,Cin].
  int conv2d_transpose(int src, int kh, int kw, int out_c, int stride, const std::string& name) {
    Node n;
    n.kind = LayerKind::ConvTranspose2d;
    n.src = check_src(src);
    n.stride = stride;
    n.label = name;
    const Shape& in = node_shape(src);
    if (in.size() != 3)
      throw ShapeError(name + ": conv2d_transpose input must be rank 3, got " + shape_str(in));
    const Shape big{in[0] * stride, in[1] * stride, out_c};
    n.geom = conv_geometry(big, {kh, kw, out_c, in[2]}, stride, Padding::Same);
    n.out_shape = big;
    n.kernel = add_param(name + "/kernel", {kh, kw, out_c, in[2]});
    n.bias = add_param(name + "/bias", {out_c});
    nodes.push_back(std::move(n));
    return output();
  }

  int dense(int src, int units, const std::string& name) {
    Node n;
    n.kind = LayerKind::Dense;
    n.src = check_src(src);
    n.label = name;
    const int in_dim = node_dim(src);
    n.out_shape = {units};
    n.kernel = add_param(name + "/kernel", {in_dim, units});
    n.bias = add_param(name + "/bias", {units});
    nodes.push_back(std::move(n));
    return output();
  }

  int relu(int src) { return unary(LayerKind::Relu, src, 0.f); }
  int leaky_relu(int src, float slope) { return unary(LayerKind::LeakyRelu, src, slope); }
  int tanh(int src) { return unary(LayerKind::Tanh, src, 0.f); }
  int sigmoid(int src) { return unary(LayerKind::Sigmoid, src, 0.f); }

  int dropout(int src, float rate) {
    if (rate < 0.f || rate >= 1.f)
      throw ValueError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    return unary(LayerKind::Dropout, src, rate);
  }

  int global_avg_pool(int src) {
    Node n;
    n.kind = LayerKind::GlobalAvgPool;
    n.src = check_src(src);
    n.label = "gap";
    const Shape& in = node_shape(src);
    if (in.size() != 3)
      throw ShapeError("global_avg_pool: input must be rank 3, got " + shape_str(in));
    n.out_shape = {in[2]};
    nodes.push_back(std::move(n));
    return output();
  }

  int residual_add(int a, int b) {
    Node n;
    n.kind = LayerKind::ResidualAdd;
    n.src = check_src(a);
    n.src2 = check_src(b);
    n.label = "add";
    if (node_shape(a) != node_shape(b))
      throw ShapeError("residual_add: operand shapes differ, " + shape_str(node_shape(a)) +
                       " vs " + shape_str(node_shape(b)));
    n.out_shape = node_shape(a);
    nodes.push_back(std::move(n));
    return output();
  }

  /// Kaiming-uniform kernels, zero biases.
  void init_params(Rng& rng) {
    for (const Node& n : nodes) {
      if (n.kernel < 0) continue;
      TensorT<T>& w = params[n.kernel];
      int fan_in = 0;
      switch (n.kind) {
        case LayerKind::Conv2d: fan_in = w.shape[0] * w.shape[1] * w.shape[2]; break;
        case LayerKind::ConvTranspose2d: fan_in = w.shape[0] * w.shape[1] * w.shape[3]; break;
        case LayerKind::Dense: fan_in = w.shape[0]; break;
        default: break;
      }
      const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
      for (auto& v : w.data) v = static_cast<T>(rng.uniformf(-bound, bound));
      std::fill(params[n.bias].data.begin(), params[n.bias].data.end(), T(0));
    }
  }

 private:
  int check_src(int src) const {
    if (src < -1 || src >= static_cast<int>(nodes.size()))
      throw ValueError("graph: bad source node " + std::to_string(src));
    return src;
  }
  int unary(LayerKind kind, int src, float p) {
    Node n;
    n.kind = kind;
    n.src = check_src(src);
    n.param = p;
    n.label = layer_kind_name(kind);
    n.out_shape = node_shape(src);
    nodes.push_back(std::move(n));
    return output();
  }
  int add_param(const std::string& name, Shape shape) {
    param_names.push_back(name);
    params.emplace_back(std::move(shape));
    return static_cast<int>(params.size()) - 1;
  }
};

using Graph = GraphT<float>;

template <typename T, typename U>
inline GraphT<T> convert_graph(const GraphT<U>& g) {
  GraphT<T> out(g.input_shape);
  out.nodes = g.nodes;
  out.param_names = g.param_names;
  out.params.reserve(g.params.size());
  for (const auto& p : g.params) {
    TensorT<T> t(p.shape);
    for (std::size_t i = 0; i < p.data.size(); ++i) t.data[i] = static_cast<T>(p.data[i]);
    out.params.push_back(std::move(t));
  }
  return out;
}

inline GraphT<double> widen(const Graph& g) { return convert_graph<double>(g); }

// ---------------------------------------------------------------------------
// Forward

/// Activation tape for one batched forward pass. Row r of acts[i] is node i's
/// value for sample r; dropout masks hold the per-element keep scale.
template <typename T>
struct TapeT {
  Mode mode = Mode::Infer;
  int batch = 0;
  std::vector<T> input;
  std::vector<std::vector<T>> acts;
  std::vector<std::vector<T>> masks;
  std::vector<std::vector<T>> patches;  // cached im2col of conv inputs
};

using Tape = TapeT<float>;

namespace detail {

template <typename T>
inline void batched_im2col(const T* x, int batch, int in_dim, const ConvGeom& g, std::vector<T>& out) {
  const std::size_t per = static_cast<std::size_t>(g.positions()) * g.patch();
  out.resize(per * batch);
  for (int b = 0; b < batch; ++b)
    im2col(x + static_cast<std::size_t>(b) * in_dim, g, out.data() + per * b);
}

template <typename T>
inline void add_bias(T* y, int rows, const T* bias, int c) {
  for (int r = 0; r < rows; ++r) {
    T* p = y + static_cast<std::size_t>(r) * c;
    for (int j = 0; j < c; ++j) p[j] += bias[j];
  }
}

}  // namespace detail

/// Evaluate the graph on `batch` stacked inputs (row-major, one sample per
/// row), writing into a caller-owned tape whose buffers are reused across
/// calls. Train mode draws dropout masks from (dropout_key, node, sample,
/// element), so masks are independent of how the batch is sharded;
/// sample_offset is the global index of row 0.
template <typename T>
void forward_into(const GraphT<T>& g, const T* x, int batch, Mode mode, std::uint64_t dropout_key,
                  int sample_offset, TapeT<T>& tape) {
  if (batch < 1) throw ValueError("forward: batch must be >= 1");
  const int in_dim = g.input_dim();
  if (!all_finite(x, static_cast<std::size_t>(batch) * in_dim))
    throw ValueError("forward: input contains non-finite values");

  tape.mode = mode;
  tape.batch = batch;
  tape.input.assign(x, x + static_cast<std::size_t>(batch) * in_dim);
  tape.acts.resize(g.nodes.size());
  tape.masks.resize(g.nodes.size());
  tape.patches.resize(g.nodes.size());

  for (std::size_t ni = 0; ni < g.nodes.size(); ++ni) {
    const Node& n = g.nodes[ni];
    const T* src = n.src < 0 ? tape.input.data() : tape.acts[n.src].data();
    const int src_dim = g.node_dim(n.src);
    const int dim = static_cast<int>(numel(n.out_shape));
    std::vector<T>& out = tape.acts[ni];
    out.resize(static_cast<std::size_t>(batch) * dim);

    switch (n.kind) {
      case LayerKind::Conv2d: {
        const ConvGeom& geom = n.geom;
        detail::batched_im2col(src, batch, src_dim, geom, tape.patches[ni]);
        matmul(tape.patches[ni].data(), g.params[n.kernel].data.data(), out.data(),
               batch * geom.positions(), geom.patch(), geom.out_c);
        detail::add_bias(out.data(), batch * geom.positions(), g.params[n.bias].data.data(),
                         geom.out_c);
        break;
      }
      case LayerKind::ConvTranspose2d: {
        const ConvGeom& geom = n.geom;  // conv orientation: out side is this node's input
        const int P = geom.positions();
        const int K = geom.patch();
        std::vector<T>& scratch = tape.patches[ni];
        scratch.resize(static_cast<std::size_t>(batch) * P * K);
        std::fill(out.begin(), out.end(), T(0));
        matmul_a_bt_wide(src, g.params[n.kernel].data.data(), scratch.data(), batch * P,
                         geom.out_c, K);
        for (int b = 0; b < batch; ++b)
          col2im_add(scratch.data() + static_cast<std::size_t>(b) * P * K, geom,
                     out.data() + static_cast<std::size_t>(b) * dim);
        scratch.clear();  // forward scratch only; backward rebuilds from upstream
        detail::add_bias(out.data(), batch * n.out_shape[0] * n.out_shape[1],
                         g.params[n.bias].data.data(), n.out_shape[2]);
        break;
      }
      case LayerKind::Dense: {
        matmul(src, g.params[n.kernel].data.data(), out.data(), batch, src_dim, dim);
        detail::add_bias(out.data(), batch, g.params[n.bias].data.data(), dim);
        break;
      }
      case LayerKind::Relu:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] > T(0) ? src[i] : T(0);
        break;
      case LayerKind::LeakyRelu: {
        const T s = static_cast<T>(n.param);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] > T(0) ? src[i] : s * src[i];
        break;
      }
      case LayerKind::Tanh:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(src[i]);
        break;
      case LayerKind::Sigmoid:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-src[i]));
        break;
      case LayerKind::Dropout: {
        if (mode == Mode::Infer || n.param == 0.f) {
          tape.masks[ni].clear();  // a reused tape may hold a stale train mask
          std::copy(src, src + out.size(), out.begin());
        } else {
          const T scale = T(1) / (T(1) - static_cast<T>(n.param));
          std::vector<T>& mask = tape.masks[ni];
          mask.resize(out.size());
          for (int b = 0; b < batch; ++b) {
            // one stream per (node, global sample): mask bits never depend on
            // how the batch is sharded across threads
            Rng row(hash_mix(dropout_key, (static_cast<std::uint64_t>(ni) << 32) ^
                                              static_cast<std::uint64_t>(sample_offset + b)));
            for (int j = 0; j < dim; ++j) {
              const std::size_t at = static_cast<std::size_t>(b) * dim + j;
              mask[at] = row.uniformf() < n.param ? T(0) : scale;
              out[at] = src[at] * mask[at];
            }
          }
        }
        break;
      }
      case LayerKind::GlobalAvgPool: {
        const Shape& in = g.node_shape(n.src);
        const int hw = in[0] * in[1];
        const int c = in[2];
        const T inv = T(1) / static_cast<T>(hw);
        for (int b = 0; b < batch; ++b) {
          const T* s = src + static_cast<std::size_t>(b) * src_dim;
          T* o = out.data() + static_cast<std::size_t>(b) * c;
          std::fill(o, o + c, T(0));
          for (int p = 0; p < hw; ++p)
            for (int j = 0; j < c; ++j) o[j] += s[static_cast<std::size_t>(p) * c + j];
          for (int j = 0; j < c; ++j) o[j] *= inv;
        }
        break;
      }
      case LayerKind::ResidualAdd: {
        const T* src2 = n.src2 < 0 ? tape.input.data() : tape.acts[n.src2].data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] + src2[i];
        break;
      }
    }
  }
}

template <typename T>
TapeT<T> forward(const GraphT<T>& g, const T* x, int batch, Mode mode,
                 std::uint64_t dropout_key = 0, int sample_offset = 0) {
  TapeT<T> tape;
  forward_into(g, x, batch, mode, dropout_key, sample_offset, tape);
  return tape;
}

// ---------------------------------------------------------------------------
// Backward

template <typename T>
inline std::vector<TensorT<T>> make_param_grads(const GraphT<T>& g) {
  std::vector<TensorT<T>> out;
  out.reserve(g.params.size());
  for (const auto& p : g.params) out.emplace_back(p.shape);
  return out;
}

/// Chain-rule vector-Jacobian products through the tape. Accumulates into
/// param_grads (pre-sized via make_param_grads) and input_grad (pre-zeroed,
/// batch x input_dim); either may be null to skip that half of the work.
template <typename T>
void backward(const GraphT<T>& g, const TapeT<T>& tape, const T* upstream,
              std::vector<TensorT<T>>* param_grads, T* input_grad) {
  const int batch = tape.batch;
  const int out_dim = g.output_dim();
  const bool want_params = param_grads != nullptr;
  if (!all_finite(upstream, static_cast<std::size_t>(batch) * out_dim))
    throw ValueError("backward: upstream contains non-finite values");

  // buffers persist across calls per thread; "touched" flags make stale
  // contents invisible
  thread_local std::vector<std::vector<T>> grads;
  thread_local std::vector<signed char> touched;
  thread_local std::vector<T> scratch;
  if (grads.size() < g.nodes.size()) grads.resize(g.nodes.size());
  touched.assign(g.nodes.size(), 0);
  auto grad_buf = [&](int node) -> std::vector<T>& {
    std::vector<T>& gb = grads[node];
    if (!touched[node]) {
      gb.assign(static_cast<std::size_t>(batch) * g.node_dim(node), T(0));
      touched[node] = 1;
    }
    return gb;
  };
  grad_buf(g.output()).assign(upstream, upstream + static_cast<std::size_t>(batch) * out_dim);
  for (int ni = g.output(); ni >= 0; --ni) {
    const Node& n = g.nodes[ni];
    if (!touched[ni]) continue;  // no path to the output
    const std::vector<T>& dy = grads[ni];
    if (!all_finite(dy.data(), dy.size()))
      throw ValueError(std::string("backward: non-finite gradient at node ") +
                       std::to_string(ni) + " (" + n.label + ")");
    const bool into_input = n.src < 0;
    const bool want_src = into_input ? input_grad != nullptr : true;
    T* dsrc = nullptr;
    if (want_src) dsrc = into_input ? input_grad : grad_buf(n.src).data();
    const int src_dim = g.node_dim(n.src);
    const T* src = n.src < 0 ? tape.input.data() : tape.acts[n.src].data();
    const T* act = tape.acts[ni].data();
    const int dim = static_cast<int>(numel(n.out_shape));

    switch (n.kind) {
      case LayerKind::Conv2d: {
        const ConvGeom& geom = n.geom;
        const int P = geom.positions();
        const int K = geom.patch();
        if (want_params) {
          matmul_at_b(tape.patches[ni].data(), dy.data(), (*param_grads)[n.kernel].data.data(),
                      batch * P, K, geom.out_c);
          T* db = (*param_grads)[n.bias].data.data();
          for (int r = 0; r < batch * P; ++r)
            for (int j = 0; j < geom.out_c; ++j) db[j] += dy[static_cast<std::size_t>(r) * geom.out_c + j];
        }
        if (want_src) {
          scratch.resize(static_cast<std::size_t>(batch) * P * K);
          matmul_a_bt_wide(dy.data(), g.params[n.kernel].data.data(), scratch.data(), batch * P,
                           geom.out_c, K);
          for (int b = 0; b < batch; ++b)
            col2im_add(scratch.data() + static_cast<std::size_t>(b) * P * K, geom,
                       dsrc + static_cast<std::size_t>(b) * src_dim);
        }
        break;
      }
      case LayerKind::ConvTranspose2d: {
        const ConvGeom& geom = n.geom;
        const int P = geom.positions();
        const int K = geom.patch();
        // dy lives on the conv-input side; its patches drive both grads
        thread_local std::vector<T> dyp;
        detail::batched_im2col(dy.data(), batch, dim, geom, dyp);
        if (want_params) {
          matmul_at_b(dyp.data(), src, (*param_grads)[n.kernel].data.data(), batch * P, K, geom.out_c);
          T* db = (*param_grads)[n.bias].data.data();
          const int hw = n.out_shape[0] * n.out_shape[1];
          const int c = n.out_shape[2];
          for (int r = 0; r < batch * hw; ++r)
            for (int j = 0; j < c; ++j) db[j] += dy[static_cast<std::size_t>(r) * c + j];
        }
        if (want_src) {
          matmul(dyp.data(), g.params[n.kernel].data.data(), dsrc, batch * P, K, geom.out_c, true);
        }
        break;
      }
      case LayerKind::Dense: {
        if (want_params) {
          matmul_at_b(src, dy.data(), (*param_grads)[n.kernel].data.data(), batch, src_dim, dim);
          T* db = (*param_grads)[n.bias].data.data();
          for (int b = 0; b < batch; ++b)
            for (int j = 0; j < dim; ++j) db[j] += dy[static_cast<std::size_t>(b) * dim + j];
        }
        if (want_src)
          matmul_a_bt_wide(dy.data(), g.params[n.kernel].data.data(), dsrc, batch, dim, src_dim,
                           true);
        break;
      }
      case LayerKind::Relu:
        if (want_src)
          for (std::size_t i = 0; i < dy.size(); ++i) dsrc[i] += act[i] > T(0) ? dy[i] : T(0);
        break;
      case LayerKind::LeakyRelu: {
        const T s = static_cast<T>(n.param);
        if (want_src)
          for (std::size_t i = 0; i < dy.size(); ++i) dsrc[i] += act[i] > T(0) ? dy[i] : s * dy[i];
        break;
      }
      case LayerKind::Tanh:
        if (want_src)
          for (std::size_t i = 0; i < dy.size(); ++i) dsrc[i] += dy[i] * (T(1) - act[i] * act[i]);
        break;
      case LayerKind::Sigmoid:
        if (want_src)
          for (std::size_t i = 0; i < dy.size(); ++i) dsrc[i] += dy[i] * act[i] * (T(1) - act[i]);
        break;
      case LayerKind::Dropout:
        if (want_src) {
          if (tape.masks[ni].empty()) {
            for (std::size_t i = 0; i < dy.size(); ++i) dsrc[i] += dy[i];
          } else {
            const std::vector<T>& mask = tape.masks[ni];
            for (std::size_t i = 0; i < dy.size(); ++i) dsrc[i] += dy[i] * mask[i];
          }
        }
        break;
      case LayerKind::GlobalAvgPool: {
        if (want_src) {
          const Shape& in = g.node_shape(n.src);
          const int hw = in[0] * in[1];
          const int c = in[2];
          const T inv = T(1) / static_cast<T>(hw);
          for (int b = 0; b < batch; ++b) {
            const T* d = dy.data() + static_cast<std::size_t>(b) * c;
            T* ds = dsrc + static_cast<std::size_t>(b) * src_dim;
            for (int p = 0; p < hw; ++p)
              for (int j = 0; j < c; ++j) ds[static_cast<std::size_t>(p) * c + j] += d[j] * inv;
          }
        }
        break;
      }
      case LayerKind::ResidualAdd: {
        if (want_src)
          for (std::size_t i = 0; i < dy.size(); ++i) dsrc[i] += dy[i];
        const bool into_input2 = n.src2 < 0;
        if (!into_input2 || input_grad != nullptr) {
          T* dsrc2 = into_input2 ? input_grad : grad_buf(n.src2).data();
          for (std::size_t i = 0; i < dy.size(); ++i) dsrc2[i] += dy[i];
        }
        break;
      }
    }
    if (want_params && n.kernel >= 0) {
      const auto& kg = (*param_grads)[n.kernel].data;
      const auto& bg = (*param_grads)[n.bias].data;
      if (!all_finite(kg.data(), kg.size()) || !all_finite(bg.data(), bg.size()))
        throw ValueError(std::string("backward: non-finite parameter gradient at node ") +
                         std::to_string(ni) + " (" + n.label + ")");
    }
  }
  if (input_grad != nullptr &&
      !all_finite(input_grad, static_cast<std::size_t>(batch) * g.input_dim()))
    throw ValueError("backward: non-finite input gradient");
}

// ---------------------------------------------------------------------------
// Forward-mode tangent sweep

/// Propagate m tangent rows through the linearization of the graph at the
/// tape's (single-sample) base point: row j of `out` is J * tangents[j].
template <typename T>
void jvp(const GraphT<T>& g, const TapeT<T>& tape, const T* tangents, int m, T* out) {
  if (tape.batch != 1) throw ValueError("jvp: tape must hold a single sample");
  thread_local std::vector<std::vector<T>> tg;
  thread_local std::vector<T> scratch;
  if (tg.size() < g.nodes.size()) tg.resize(g.nodes.size());
  for (std::size_t ni = 0; ni < g.nodes.size(); ++ni) {
    const Node& n = g.nodes[ni];
    const T* src = n.src < 0 ? tangents : tg[n.src].data();
    const int src_dim = g.node_dim(n.src);
    const int dim = static_cast<int>(numel(n.out_shape));
    std::vector<T>& o = tg[ni];
    o.resize(static_cast<std::size_t>(m) * dim);
    const T* act = tape.acts[ni].data();

    switch (n.kind) {
      case LayerKind::Conv2d: {
        const ConvGeom& geom = n.geom;
        detail::batched_im2col(src, m, src_dim, geom, scratch);
        matmul(scratch.data(), g.params[n.kernel].data.data(), o.data(), m * geom.positions(),
               geom.patch(), geom.out_c);
        break;
      }
      case LayerKind::ConvTranspose2d: {
        const ConvGeom& geom = n.geom;
        const int P = geom.positions();
        const int K = geom.patch();
        scratch.resize(static_cast<std::size_t>(m) * P * K);
        std::fill(o.begin(), o.end(), T(0));
        matmul_a_bt_wide(src, g.params[n.kernel].data.data(), scratch.data(), m * P, geom.out_c, K);
        for (int b = 0; b < m; ++b)
          col2im_add(scratch.data() + static_cast<std::size_t>(b) * P * K, geom,
                     o.data() + static_cast<std::size_t>(b) * dim);
        break;
      }
      case LayerKind::Dense:
        matmul(src, g.params[n.kernel].data.data(), o.data(), m, src_dim, dim);
        break;
      case LayerKind::Relu:
        for (int b = 0; b < m; ++b)
          for (int j = 0; j < dim; ++j) {
            const std::size_t at = static_cast<std::size_t>(b) * dim + j;
            o[at] = act[j] > T(0) ? src[at] : T(0);
          }
        break;
      case LayerKind::LeakyRelu: {
        const T s = static_cast<T>(n.param);
        for (int b = 0; b < m; ++b)
          for (int j = 0; j < dim; ++j) {
            const std::size_t at = static_cast<std::size_t>(b) * dim + j;
            o[at] = act[j] > T(0) ? src[at] : s * src[at];
          }
        break;
      }
      case LayerKind::Tanh:
        for (int b = 0; b < m; ++b)
          for (int j = 0; j < dim; ++j) {
            const std::size_t at = static_cast<std::size_t>(b) * dim + j;
            o[at] = src[at] * (T(1) - act[j] * act[j]);
          }
        break;
      case LayerKind::Sigmoid:
        for (int b = 0; b < m; ++b)
          for (int j = 0; j < dim; ++j) {
            const std::size_t at = static_cast<std::size_t>(b) * dim + j;
            o[at] = src[at] * act[j] * (T(1) - act[j]);
          }
        break;
      case LayerKind::Dropout:
        if (tape.masks[ni].empty()) {
          std::copy(src, src + o.size(), o.begin());
        } else {
          const std::vector<T>& mask = tape.masks[ni];
          for (int b = 0; b < m; ++b)
            for (int j = 0; j < dim; ++j) {
              const std::size_t at = static_cast<std::size_t>(b) * dim + j;
              o[at] = src[at] * mask[j];
            }
        }
        break;
      case LayerKind::GlobalAvgPool: {
        const Shape& in = g.node_shape(n.src);
        const int hw = in[0] * in[1];
        const int c = in[2];
        const T inv = T(1) / static_cast<T>(hw);
        for (int b = 0; b < m; ++b) {
          const T* s = src + static_cast<std::size_t>(b) * src_dim;
          T* ob = o.data() + static_cast<std::size_t>(b) * c;
          std::fill(ob, ob + c, T(0));
          for (int p = 0; p < hw; ++p)
            for (int j = 0; j < c; ++j) ob[j] += s[static_cast<std::size_t>(p) * c + j];
          for (int j = 0; j < c; ++j) ob[j] *= inv;
        }
        break;
      }
      case LayerKind::ResidualAdd: {
        const T* src2 = n.src2 < 0 ? tangents : tg[n.src2].data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = src[i] + src2[i];
        break;
      }
    }
  }
  const std::vector<T>& last = tg[g.output()];
  std::copy(last.begin(), last.end(), out);
}

// ---------------------------------------------------------------------------
// Spec-level wrappers

/// Standalone dropout. Train mode zeroes each element with probability rate
/// and scales survivors by 1/(1-rate); infer mode is the identity.
template <typename T>
TensorT<T> dropout(const TensorT<T>& x, float rate, Mode mode, std::uint64_t seed) {
  if (rate < 0.f || rate >= 1.f)
    throw ValueError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  if (mode == Mode::Infer || rate == 0.f) return x;
  TensorT<T> out(x.shape);
  const T scale = T(1) / (T(1) - static_cast<T>(rate));
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const float u = hash_uniformf(seed, static_cast<std::uint64_t>(i), 0x5eedull);
    out.data[i] = u < rate ? T(0) : x.data[i] * scale;
  }
  return out;
}

struct BackpropResult {
  Tensor input_grad;
  std::vector<Tensor> param_grads;
};

/// Gradients of <upstream, g(x)> for a single sample, dropout in infer mode.
inline BackpropResult backprop(const Graph& g, const Tensor& x, const Tensor& upstream) {
  if (numel(x.shape) != g.input_dim())
    throw ShapeError("backprop: input shape " + shape_str(x.shape) + " does not match graph input " +
                     shape_str(g.input_shape));
  if (numel(upstream.shape) != g.output_dim())
    throw ShapeError("backprop: upstream shape " + shape_str(upstream.shape) +
                     " does not match graph output " + shape_str(g.output_shape()));
  Tape tape = forward(g, x.data.data(), 1, Mode::Infer);
  std::vector<Tensor> pgrads = make_param_grads(g);
  std::vector<float> igrad(static_cast<std::size_t>(g.input_dim()), 0.f);
  backward(g, tape, upstream.data.data(), &pgrads, igrad.data());
  BackpropResult r;
  r.input_grad = Tensor(g.input_shape, std::move(igrad));
  r.param_grads = std::move(pgrads);
  return r;
}

struct JacobianMatrix {
  int rows = 0, cols = 0;
  std::vector<float> data;  // row-major, rows = output dim, cols = input dim
  float operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }
};

constexpr std::size_t kJacobianEntryCap = std::size_t(4096) * 4096;

/// Exact Jacobian at x via a forward tangent sweep over the identity basis.
/// Refuses to allocate more than max_entries, never truncates.
inline JacobianMatrix jacobian(const Graph& g, const Tensor& x,
                               std::size_t max_entries = kJacobianEntryCap) {
  const int in_dim = g.input_dim();
  const int out_dim = g.output_dim();
  const std::size_t entries = static_cast<std::size_t>(in_dim) * out_dim;
  if (entries > max_entries)
    throw ValueError("jacobian: " + std::to_string(out_dim) + "x" + std::to_string(in_dim) +
                     " exceeds the configured cap of " + std::to_string(max_entries) + " entries");
  if (numel(x.shape) != in_dim)
    throw ShapeError("jacobian: input shape " + shape_str(x.shape) + " does not match graph input");
  Tape tape = forward(g, x.data.data(), 1, Mode::Infer);
  std::vector<float> basis(static_cast<std::size_t>(in_dim) * in_dim, 0.f);
  for (int i = 0; i < in_dim; ++i) basis[static_cast<std::size_t>(i) * in_dim + i] = 1.f;
  std::vector<float> cols(static_cast<std::size_t>(in_dim) * out_dim);
  jvp(g, tape, basis.data(), in_dim, cols.data());
  JacobianMatrix J;
  J.rows = out_dim;
  J.cols = in_dim;
  J.data.resize(entries);
  for (int j = 0; j < in_dim; ++j)
    for (int i = 0; i < out_dim; ++i)
      J.data[static_cast<std::size_t>(i) * in_dim + j] = cols[static_cast<std::size_t>(j) * out_dim + i];
  return J;
}

/// J(x) applied to m tangent rows without materializing the full matrix.
inline void jacobian_apply(const Graph& g, const Tensor& x, const float* tangents, int m,
                           float* out) {
  Tape tape = forward(g, x.data.data(), 1, Mode::Infer);
  jvp(g, tape, tangents, m, out);
}

}  // namespace ccgn
