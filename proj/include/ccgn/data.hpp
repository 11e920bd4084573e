#pragma once
// Dataset ingestion and the desk-scale synthetic shape corpus.
//
// IDX files are read and written bit-exactly (big-endian headers, magic
// 0x00000803 for images and 0x00000801 for labels). Pixels map affinely onto
// [-1,1] via v = byte/127.5 - 1.

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ccgn/tensor.hpp"

namespace ccgn {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct LabeledImages {
  std::vector<Tensor> images;  // each [H,W,1]
  std::vector<int> labels;
  std::string split;  // "train" or "test"

  int count() const { return static_cast<int>(images.size()); }
  int height() const { return images.empty() ? 0 : images[0].shape[0]; }
  int width() const { return images.empty() ? 0 : images[0].shape[1]; }
};

/// One image category per domain; the state spaces X, Y, Z of the cycle.
struct TriDomain {
  LabeledImages X, Y, Z;
  int min_count() const { return std::min(X.count(), std::min(Y.count(), Z.count())); }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw LengthError(path + ": truncated header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace detail

inline float pixel_from_byte(unsigned char b) { return static_cast<float>(b) / 127.5f - 1.0f; }

inline unsigned char byte_from_pixel(float v) {
  const float scaled = (v + 1.0f) * 127.5f;
  const int q = static_cast<int>(scaled + 0.5f);
  return static_cast<unsigned char>(q < 0 ? 0 : (q > 255 ? 255 : q));
}

/// Read an IDX image/label file pair into normalized tensors.
inline LabeledImages load_idx(const std::string& image_path, const std::string& label_path) {
  std::ifstream img(image_path, std::ios::binary);
  if (!img) throw FormatError(image_path + ": cannot open");
  std::ifstream lab(label_path, std::ios::binary);
  if (!lab) throw FormatError(label_path + ": cannot open");

  const std::uint32_t img_magic = detail::read_be32(img, image_path);
  if (img_magic != kIdxImageMagic)
    throw FormatError(image_path + ": bad image magic " + std::to_string(img_magic) +
                      ", expected " + std::to_string(kIdxImageMagic));
  const std::uint32_t n_img = detail::read_be32(img, image_path);
  const std::uint32_t rows = detail::read_be32(img, image_path);
  const std::uint32_t cols = detail::read_be32(img, image_path);

  const std::uint32_t lab_magic = detail::read_be32(lab, label_path);
  if (lab_magic != kIdxLabelMagic)
    throw FormatError(label_path + ": bad label magic " + std::to_string(lab_magic) +
                      ", expected " + std::to_string(kIdxLabelMagic));
  const std::uint32_t n_lab = detail::read_be32(lab, label_path);

  if (n_img != n_lab)
    throw ConsistencyError(image_path + ": " + std::to_string(n_img) + " images but " +
                           std::to_string(n_lab) + " labels");

  LabeledImages out;
  out.images.reserve(n_img);
  out.labels.reserve(n_img);
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  std::vector<unsigned char> buf(pixels);
  for (std::uint32_t i = 0; i < n_img; ++i) {
    img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels));
    if (!img)
      throw LengthError(image_path + ": truncated at image " + std::to_string(i) + " of " +
                        std::to_string(n_img));
    Tensor t({static_cast<int>(rows), static_cast<int>(cols), 1});
    for (std::size_t p = 0; p < pixels; ++p) t.data[p] = pixel_from_byte(buf[p]);
    out.images.push_back(std::move(t));
    char lb;
    lab.read(&lb, 1);
    if (!lab) throw LengthError(label_path + ": truncated at label " + std::to_string(i));
    out.labels.push_back(static_cast<unsigned char>(lb));
  }
  return out;
}

/// Export to the same IDX pair format; pixels are re-quantized to bytes.
inline void write_idx(const LabeledImages& data, const std::string& image_path,
                      const std::string& label_path) {
  std::ofstream img(image_path, std::ios::binary);
  if (!img) throw FormatError(image_path + ": cannot open for writing");
  std::ofstream lab(label_path, std::ios::binary);
  if (!lab) throw FormatError(label_path + ": cannot open for writing");

  const int h = data.height(), w = data.width();
  detail::write_be32(img, kIdxImageMagic);
  detail::write_be32(img, static_cast<std::uint32_t>(data.count()));
  detail::write_be32(img, static_cast<std::uint32_t>(h));
  detail::write_be32(img, static_cast<std::uint32_t>(w));
  detail::write_be32(lab, kIdxLabelMagic);
  detail::write_be32(lab, static_cast<std::uint32_t>(data.count()));

  std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < data.count(); ++i) {
    const Tensor& t = data.images[i];
    for (std::size_t p = 0; p < buf.size(); ++p) buf[p] = byte_from_pixel(t.data[p]);
    img.write(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    const char lb = static_cast<char>(data.labels[i]);
    lab.write(&lb, 1);
  }
}

/// Partition a labeled set into the three cycle domains, order preserving.
inline TriDomain select_tridomain(const LabeledImages& data, std::array<int, 3> labels) {
  if (labels[0] == labels[1] || labels[0] == labels[2] || labels[1] == labels[2])
    throw ValueError("select_tridomain: the three labels must be distinct");
  TriDomain tri;
  LabeledImages* dst[3] = {&tri.X, &tri.Y, &tri.Z};
  for (int d = 0; d < 3; ++d) dst[d]->split = data.split;
  for (int i = 0; i < data.count(); ++i) {
    for (int d = 0; d < 3; ++d) {
      if (data.labels[i] == labels[d]) {
        dst[d]->images.push_back(data.images[i]);
        dst[d]->labels.push_back(data.labels[i]);
        break;
      }
    }
  }
  for (int d = 0; d < 3; ++d) {
    if (dst[d]->count() > 0) continue;
    std::vector<int> seen;
    for (int l : data.labels)
      if (std::find(seen.begin(), seen.end(), l) == seen.end()) seen.push_back(l);
    std::sort(seen.begin(), seen.end());
    std::string avail;
    for (int l : seen) avail += (avail.empty() ? "" : ",") + std::to_string(l);
    throw ValueError("select_tridomain: label " + std::to_string(labels[d]) +
                     " not present; available labels: " + avail);
  }
  return tri;
}

enum class ShapeKind { Disk, Cross, Stripes };

inline int shape_kind_label(ShapeKind k) { return static_cast<int>(k); }

namespace detail {

// Soft coverage of |d| against a half-width t, one-pixel antialiasing ramp.
inline float bar_coverage(float d, float t) {
  const float c = t + 0.5f - std::abs(d);
  return c < 0.f ? 0.f : (c > 1.f ? 1.f : c);
}

}  // namespace detail

/// Jittered grayscale shapes, one family per category: disk=0, cross=1,
/// stripes=2. Pixels are quantized to the byte grid so IDX export is lossless.
inline LabeledImages synth_shapes(ShapeKind kind, int n, int size, Rng& rng) {
  if (n < 0) throw ValueError("synth_shapes: n must be >= 0");
  if (size < 8) throw ValueError("synth_shapes: size must be >= 8, got " + std::to_string(size));
  LabeledImages out;
  out.split = "train";
  const float s = static_cast<float>(size);
  for (int i = 0; i < n; ++i) {
    Tensor img({size, size, 1});
    const float jx = rng.uniformf(-s / 10.f, s / 10.f);
    const float jy = rng.uniformf(-s / 10.f, s / 10.f);
    const float cx = s / 2.f - 0.5f + jx;
    const float cy = s / 2.f - 0.5f + jy;
    const float intensity = rng.uniformf(0.75f, 1.0f);
    switch (kind) {
      case ShapeKind::Disk: {
        const float r = rng.uniformf(s / 4.f - 1.f, s / 4.f + 1.5f);
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) {
            const float d = std::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy));
            float cov = r + 0.5f - d;
            cov = cov < 0.f ? 0.f : (cov > 1.f ? 1.f : cov);
            img(y, x, 0) = intensity * cov;
          }
        break;
      }
      case ShapeKind::Cross: {
        const float t = rng.uniformf(s / 16.f, s / 9.f);
        const float arm = rng.uniformf(0.32f * s, 0.46f * s);
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) {
            float cov = 0.f;
            if (std::abs(x - cx) <= arm) cov = std::max(cov, detail::bar_coverage(y - cy, t));
            if (std::abs(y - cy) <= arm) cov = std::max(cov, detail::bar_coverage(x - cx, t));
            img(y, x, 0) = intensity * cov;
          }
        break;
      }
      case ShapeKind::Stripes: {
        const float period = rng.uniformf(3.f, 6.f);
        const float phase = rng.uniformf(0.f, period);
        const float duty = rng.uniformf(0.35f, 0.6f);
        const float skew = rng.uniformf(-0.25f, 0.25f);
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) {
            float u = x + skew * y + phase;
            u -= period * std::floor(u / period);
            const float half = 0.5f * duty * period;
            const float d = std::abs(u - period * 0.5f);
            img(y, x, 0) = intensity * detail::bar_coverage(d, half);
          }
        break;
      }
    }
    // snap to the byte grid
    for (auto& v : img.data) v = pixel_from_byte(byte_from_pixel(v * 2.f - 1.f));
    out.images.push_back(std::move(img));
    out.labels.push_back(shape_kind_label(kind));
  }
  return out;
}

/// All three shape families with a common image size.
inline TriDomain synth_tridomain(int n_per_class, int size, std::uint64_t seed) {
  TriDomain tri;
  Rng ra(hash_mix(seed, 0));
  Rng rb(hash_mix(seed, 1));
  Rng rc(hash_mix(seed, 2));
  tri.X = synth_shapes(ShapeKind::Disk, n_per_class, size, ra);
  tri.Y = synth_shapes(ShapeKind::Cross, n_per_class, size, rb);
  tri.Z = synth_shapes(ShapeKind::Stripes, n_per_class, size, rc);
  return tri;
}

// ---------------------------------------------------------------------------
// Batching

/// Flattened image batch, one sample per row.
struct Batch {
  int count = 0;
  Shape image_shape;
  std::vector<float> flat;
  const float* row(int i) const { return flat.data() + static_cast<std::size_t>(i) * numel(image_shape); }
};

struct TripleBatch {
  Batch x, y, z;
};

inline Batch make_batch(const std::vector<Tensor>& images, const std::vector<int>& idx) {
  Batch b;
  b.count = static_cast<int>(idx.size());
  if (b.count == 0) return b;
  b.image_shape = images[idx[0]].shape;
  const std::size_t n = images[idx[0]].data.size();
  b.flat.resize(n * idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(images[idx[i]].data.begin(), images[idx[i]].data.end(), b.flat.begin() + n * i);
  return b;
}

/// Per-epoch triple batches: each domain is shuffled independently, batches
/// are zipped, and the shortest domain truncates the epoch.
class BatchStream {
 public:
  BatchStream(const TriDomain& tri, int batch, std::uint64_t seed)
      : tri_(&tri), batch_(batch), rng_(seed) {
    if (batch <= 0) throw ValueError("batch_triples: batch size must be positive");
    if (batch > tri.min_count())
      throw ValueError("batch_triples: batch " + std::to_string(batch) +
                       " exceeds smallest domain size " + std::to_string(tri.min_count()));
  }

  int batches_per_epoch() const { return tri_->min_count() / batch_; }

  std::vector<TripleBatch> next_epoch() {
    std::vector<int> ix = shuffled(tri_->X.count());
    std::vector<int> iy = shuffled(tri_->Y.count());
    std::vector<int> iz = shuffled(tri_->Z.count());
    std::vector<TripleBatch> out;
    const int nb = batches_per_epoch();
    out.reserve(nb);
    for (int b = 0; b < nb; ++b) {
      auto slice = [&](const std::vector<int>& v) {
        return std::vector<int>(v.begin() + static_cast<std::size_t>(b) * batch_,
                                v.begin() + static_cast<std::size_t>(b + 1) * batch_);
      };
      TripleBatch t;
      t.x = make_batch(tri_->X.images, slice(ix));
      t.y = make_batch(tri_->Y.images, slice(iy));
      t.z = make_batch(tri_->Z.images, slice(iz));
      out.push_back(std::move(t));
    }
    return out;
  }

 private:
  std::vector<int> shuffled(int n) {
    std::vector<int> v(n);
    for (int i = 0; i < n; ++i) v[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(v[i], v[rng_.uniform_int(i + 1)]);
    return v;
  }

  const TriDomain* tri_;
  int batch_;
  Rng rng_;
};

}  // namespace ccgn
