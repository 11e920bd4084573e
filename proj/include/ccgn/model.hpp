#pragma once
// The two generators and three discriminators of the cyclic translation
// model, plus the versioned CCGN checkpoint container.

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ccgn/graph.hpp"
#include "ccgn/tensor.hpp"

namespace ccgn {

struct ArchConfig {
  int base_channels = 16;
  int n_resblocks = 4;
  int n_downsamples = 2;
  float dropout_rate = 0.3f;
  float leaky_slope = 0.2f;
};

inline void validate(const ArchConfig& a) {
  if (a.base_channels <= 0 || a.n_resblocks <= 0 || a.n_downsamples <= 0)
    throw ValueError("arch: base_channels, n_resblocks and n_downsamples must be positive");
  if (a.dropout_rate < 0.f || a.dropout_rate >= 1.f)
    throw ValueError("arch: dropout_rate must lie in [0,1)");
  if (a.leaky_slope <= 0.f) throw ValueError("arch: leaky_slope must be positive");
}

/// Image-to-image map; tanh output keeps the range inside (-1,1)^N.
struct GeneratorNet {
  Graph graph;
  ArchConfig arch;
  Shape image_shape;
};

/// Image-to-probability map ending in sigmoid.
struct DiscriminatorNet {
  Graph graph;
  ArchConfig arch;
  Shape image_shape;
};

namespace detail {

inline void check_divisible(const ArchConfig& a, const Shape& image_shape) {
  if (image_shape.size() != 3)
    throw ShapeError("model: image shape must be rank 3 [H,W,C], got " + shape_str(image_shape));
  const int div = 1 << a.n_downsamples;
  if (image_shape[0] % div != 0 || image_shape[1] % div != 0)
    throw ShapeError("model: image extents " + shape_str(image_shape) + " must be divisible by 2^" +
                     std::to_string(a.n_downsamples));
}

}  // namespace detail

/// Encoder, residual trunk, decoder, 1x1 projection, tanh. Dropout follows
/// every relu.
inline GeneratorNet build_generator(const ArchConfig& arch, const Shape& image_shape) {
  validate(arch);
  detail::check_divisible(arch, image_shape);
  GeneratorNet net{Graph(image_shape), arch, image_shape};
  Graph& g = net.graph;
  int cur = -1;
  int ch = arch.base_channels;
  for (int i = 0; i < arch.n_downsamples; ++i) {
    cur = g.conv2d(cur, 3, 3, ch, 2, Padding::Same, "down" + std::to_string(i));
    cur = g.relu(cur);
    cur = g.dropout(cur, arch.dropout_rate);
    if (i + 1 < arch.n_downsamples) ch *= 2;
  }
  for (int i = 0; i < arch.n_resblocks; ++i) {
    const int block_in = cur;
    cur = g.conv2d(cur, 3, 3, ch, 1, Padding::Same, "res" + std::to_string(i) + "a");
    cur = g.relu(cur);
    cur = g.dropout(cur, arch.dropout_rate);
    cur = g.conv2d(cur, 3, 3, ch, 1, Padding::Same, "res" + std::to_string(i) + "b");
    cur = g.residual_add(cur, block_in);
  }
  for (int i = 0; i < arch.n_downsamples; ++i) {
    ch = std::max(arch.base_channels, ch / 2);
    cur = g.conv2d_transpose(cur, 3, 3, ch, 2, "up" + std::to_string(i));
    cur = g.relu(cur);
    cur = g.dropout(cur, arch.dropout_rate);
  }
  cur = g.conv2d(cur, 1, 1, image_shape[2], 1, Padding::Same, "out");
  g.tanh(cur);
  return net;
}

/// Strided conv stack with leaky relu and dropout, global average pool,
/// dense head, sigmoid.
inline DiscriminatorNet build_discriminator(const ArchConfig& arch, const Shape& image_shape) {
  validate(arch);
  detail::check_divisible(arch, image_shape);
  DiscriminatorNet net{Graph(image_shape), arch, image_shape};
  Graph& g = net.graph;
  int cur = -1;
  int ch = arch.base_channels;
  for (int i = 0; i < arch.n_downsamples; ++i) {
    cur = g.conv2d(cur, 3, 3, ch, 2, Padding::Same, "d" + std::to_string(i));
    cur = g.leaky_relu(cur, arch.leaky_slope);
    cur = g.dropout(cur, arch.dropout_rate);
    if (i + 1 < arch.n_downsamples) ch *= 2;
  }
  cur = g.global_avg_pool(cur);
  cur = g.dense(cur, 1, "head");
  g.sigmoid(cur);
  return net;
}

namespace detail {

template <typename NetT>
inline Tensor infer_net(const NetT& net, const Tensor& x) {
  if (x.shape != net.image_shape)
    throw ShapeError("infer: input shape " + shape_str(x.shape) + " does not match model shape " +
                     shape_str(net.image_shape));
  Tape tape = forward(net.graph, x.data.data(), 1, Mode::Infer);
  return Tensor(net.graph.output_shape(), tape.acts[net.graph.output()]);
}

}  // namespace detail

/// Deterministic forward pass with dropout disabled.
inline Tensor infer(const GeneratorNet& net, const Tensor& x) { return detail::infer_net(net, x); }
inline Tensor infer(const DiscriminatorNet& net, const Tensor& x) { return detail::infer_net(net, x); }

// ---------------------------------------------------------------------------
// Checkpoint container
//
// Layout (payload little-endian): magic "CCGN", u32 version, u32 tensor
// count, per tensor { u16 name length, name bytes, u8 rank, u32 dims...,
// f32 data... }, then the metadata block { u32 epochs, u64 seed, f32 lambda,
// u8 eq7 mode, u32 base_channels, u32 n_resblocks, u32 n_downsamples,
// f32 dropout_rate, f32 leaky_slope, u32 H, u32 W, u32 C }.

constexpr char kCheckpointMagic[4] = {'C', 'C', 'G', 'N'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ArchConfig arch;
  Shape image_shape;
  std::uint32_t epochs = 0;
  std::uint64_t seed = 0;
  float lambda = 10.f;
  std::uint8_t eq7_mode = 0;  // 0 = as printed, 1 = figure consistent
  GeneratorNet G, F;
  DiscriminatorNet DX, DY, DZ;
};

/// Fresh model with seeded parameter init. Draw order is fixed: G, F, DX,
/// DY, DZ.
inline Checkpoint make_checkpoint(const ArchConfig& arch, const Shape& image_shape,
                                  std::uint64_t seed) {
  Checkpoint c;
  c.arch = arch;
  c.image_shape = image_shape;
  c.seed = seed;
  c.G = build_generator(arch, image_shape);
  c.F = build_generator(arch, image_shape);
  c.DX = build_discriminator(arch, image_shape);
  c.DY = build_discriminator(arch, image_shape);
  c.DZ = build_discriminator(arch, image_shape);
  Rng rng(seed);
  c.G.graph.init_params(rng);
  c.F.graph.init_params(rng);
  c.DX.graph.init_params(rng);
  c.DY.graph.init_params(rng);
  c.DZ.graph.init_params(rng);
  return c;
}

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t at = 0;
  const std::string& path;
  void need(std::size_t n) const {
    if (at + n > buf.size()) throw LengthError(path + ": truncated checkpoint");
  }
  std::uint8_t u8() { need(1); return static_cast<std::uint8_t>(buf[at++]); }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint8_t>(buf[at]) |
                      (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[at + 1])) << 8);
    at += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[at + i])) << (8 * i);
    at += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[at + i])) << (8 * i);
    at += 8;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(at, n);
    at += n;
    return s;
  }
};

inline const Graph* net_graph(const Checkpoint& c, int i) {
  switch (i) {
    case 0: return &c.G.graph;
    case 1: return &c.F.graph;
    case 2: return &c.DX.graph;
    case 3: return &c.DY.graph;
    default: return &c.DZ.graph;
  }
}
inline Graph* net_graph(Checkpoint& c, int i) {
  return const_cast<Graph*>(net_graph(static_cast<const Checkpoint&>(c), i));
}
constexpr const char* kNetPrefix[5] = {"G", "F", "DX", "DY", "DZ"};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  std::uint32_t count = 0;
  for (int n = 0; n < 5; ++n) count += static_cast<std::uint32_t>(detail::net_graph(c, n)->params.size());
  detail::put_u32(out, count);
  for (int n = 0; n < 5; ++n) {
    const Graph* g = detail::net_graph(c, n);
    for (std::size_t p = 0; p < g->params.size(); ++p) {
      const std::string name = std::string(detail::kNetPrefix[n]) + "/" + g->param_names[p];
      detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
      out += name;
      const Tensor& t = g->params[p];
      out.push_back(static_cast<char>(t.rank()));
      for (int d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
      for (float v : t.data) detail::put_f32(out, v);
    }
  }
  detail::put_u32(out, c.epochs);
  detail::put_u64(out, c.seed);
  detail::put_f32(out, c.lambda);
  out.push_back(static_cast<char>(c.eq7_mode));
  detail::put_u32(out, static_cast<std::uint32_t>(c.arch.base_channels));
  detail::put_u32(out, static_cast<std::uint32_t>(c.arch.n_resblocks));
  detail::put_u32(out, static_cast<std::uint32_t>(c.arch.n_downsamples));
  detail::put_f32(out, c.arch.dropout_rate);
  detail::put_f32(out, c.arch.leaky_slope);
  for (int d : c.image_shape) detail::put_u32(out, static_cast<std::uint32_t>(d));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError(path + ": cannot open for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError(path + ": write failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(path + ": cannot open");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::Reader r{buf, 0, path};

  const std::string magic = r.bytes(4);
  if (magic != std::string(kCheckpointMagic, 4))
    throw FormatError(path + ": bad magic \"" + magic + "\"");
  const std::uint32_t version = r.u32();
  if (version > kCheckpointVersion)
    throw VersionError(path + ": checkpoint version " + std::to_string(version) +
                       " is newer than supported version " + std::to_string(kCheckpointVersion));
  const std::uint32_t count = r.u32();

  struct Entry { Shape shape; std::vector<float> data; };
  std::map<std::string, Entry> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16();
    const std::string name = r.bytes(len);
    const int rank = r.u8();
    Shape shape(rank);
    for (int d = 0; d < rank; ++d) shape[d] = static_cast<int>(r.u32());
    Entry e;
    e.shape = shape;
    const long long n = numel(shape);
    e.data.resize(static_cast<std::size_t>(n));
    for (long long j = 0; j < n; ++j) e.data[static_cast<std::size_t>(j)] = r.f32();
    if (!tensors.emplace(name, std::move(e)).second)
      throw ConsistencyError(path + ": duplicate tensor \"" + name + "\"");
  }

  Checkpoint c;
  c.epochs = r.u32();
  c.seed = r.u64();
  c.lambda = r.f32();
  c.eq7_mode = r.u8();
  c.arch.base_channels = static_cast<int>(r.u32());
  c.arch.n_resblocks = static_cast<int>(r.u32());
  c.arch.n_downsamples = static_cast<int>(r.u32());
  c.arch.dropout_rate = r.f32();
  c.arch.leaky_slope = r.f32();
  c.image_shape.resize(3);
  for (int d = 0; d < 3; ++d) c.image_shape[d] = static_cast<int>(r.u32());

  c.G = build_generator(c.arch, c.image_shape);
  c.F = build_generator(c.arch, c.image_shape);
  c.DX = build_discriminator(c.arch, c.image_shape);
  c.DY = build_discriminator(c.arch, c.image_shape);
  c.DZ = build_discriminator(c.arch, c.image_shape);

  std::uint32_t expected = 0;
  for (int n = 0; n < 5; ++n) expected += static_cast<std::uint32_t>(detail::net_graph(c, n)->params.size());
  if (expected != count)
    throw ConsistencyError(path + ": checkpoint holds " + std::to_string(count) +
                           " tensors but the architecture needs " + std::to_string(expected));
  for (int n = 0; n < 5; ++n) {
    Graph* g = detail::net_graph(c, n);
    for (std::size_t p = 0; p < g->params.size(); ++p) {
      const std::string name = std::string(detail::kNetPrefix[n]) + "/" + g->param_names[p];
      auto it = tensors.find(name);
      if (it == tensors.end())
        throw ConsistencyError(path + ": missing tensor \"" + name + "\"");
      if (it->second.shape != g->params[p].shape)
        throw ConsistencyError(path + ": tensor \"" + name + "\" has shape " +
                               shape_str(it->second.shape) + ", architecture expects " +
                               shape_str(g->params[p].shape));
      g->params[p].data = std::move(it->second.data);
    }
  }
  return c;
}

/// Bitwise parameter and metadata equality, for roundtrip and determinism checks.
inline bool checkpoints_identical(const Checkpoint& a, const Checkpoint& b) {
  if (a.epochs != b.epochs || a.seed != b.seed || a.eq7_mode != b.eq7_mode) return false;
  if (std::memcmp(&a.lambda, &b.lambda, 4) != 0) return false;
  if (a.image_shape != b.image_shape) return false;
  for (int n = 0; n < 5; ++n) {
    const Graph* ga = detail::net_graph(a, n);
    const Graph* gb = detail::net_graph(b, n);
    if (ga->params.size() != gb->params.size()) return false;
    for (std::size_t p = 0; p < ga->params.size(); ++p) {
      if (ga->params[p].shape != gb->params[p].shape) return false;
      if (std::memcmp(ga->params[p].data.data(), gb->params[p].data.data(),
                      ga->params[p].data.size() * sizeof(float)) != 0)
        return false;
    }
  }
  return true;
}

}  // namespace ccgn
