#pragma once
// Manifold precision/recall on k-NN hypersphere estimates, pluggable feature
// embedders, a category probe for cyclicity checks, and a PCA projection for
// distribution plots. Distances are Euclidean with 64-bit accumulation in
// index order, so results are reproducible and tie handling is stable.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ccgn/data.hpp"
#include "ccgn/graph.hpp"
#include "ccgn/model.hpp"
#include "ccgn/training.hpp"

namespace ccgn {

struct FeatureSet {
  int dim = 0;
  std::vector<float> flat;  // count x dim
  std::string source;       // "real" or "generated"
  std::string embedder;

  int count() const { return dim == 0 ? 0 : static_cast<int>(flat.size()) / dim; }
  const float* row(int i) const { return flat.data() + static_cast<std::size_t>(i) * dim; }
};

/// Row-major pixel flattening.
inline FeatureSet embed_pixels(const std::vector<Tensor>& images) {
  FeatureSet out;
  out.embedder = "pixels";
  if (images.empty()) return out;
  out.dim = static_cast<int>(numel(images[0].shape));
  out.flat.reserve(static_cast<std::size_t>(out.dim) * images.size());
  for (const Tensor& t : images) {
    if (static_cast<int>(numel(t.shape)) != out.dim)
      throw ShapeError("embed: images have inconsistent shapes");
    require_finite(t, "embed");
    out.flat.insert(out.flat.end(), t.data.begin(), t.data.end());
  }
  return out;
}

/// Post-pool activations of a discriminator.
inline FeatureSet embed_disc_feature(const DiscriminatorNet& D, const std::vector<Tensor>& images) {
  FeatureSet out;
  out.embedder = "disc_feature";
  int gap = -1;
  for (std::size_t i = 0; i < D.graph.nodes.size(); ++i)
    if (D.graph.nodes[i].kind == LayerKind::GlobalAvgPool) gap = static_cast<int>(i);
  if (gap < 0) throw ValueError("embed: discriminator has no global average pool node");
  out.dim = D.graph.node_dim(gap);
  for (const Tensor& t : images) {
    if (t.shape != D.image_shape)
      throw ShapeError("embed: image shape " + shape_str(t.shape) + " does not match model shape " +
                       shape_str(D.image_shape));
    Tape tape = forward(D.graph, t.data.data(), 1, Mode::Infer);
    const std::vector<float>& f = tape.acts[gap];
    out.flat.insert(out.flat.end(), f.begin(), f.end());
  }
  return out;
}

/// One feature vector per CSV row; every row must have the same width.
inline FeatureSet load_features_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path + ": cannot open");
  FeatureSet out;
  out.embedder = "external:" + path;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<float> row;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stof(cell));
      } catch (...) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": bad number \"" + cell + "\"");
      }
    }
    if (out.dim == 0) out.dim = static_cast<int>(row.size());
    if (static_cast<int>(row.size()) != out.dim)
      throw FormatError(path + ":" + std::to_string(lineno) + ": row has " +
                        std::to_string(row.size()) + " values, expected " + std::to_string(out.dim));
    if (!all_finite(row.data(), row.size()))
      throw ValueError(path + ":" + std::to_string(lineno) + ": non-finite feature value");
    out.flat.insert(out.flat.end(), row.begin(), row.end());
  }
  return out;
}

inline void save_features_csv(const std::string& path, const FeatureSet& fs) {
  std::ofstream out(path);
  if (!out) throw FormatError(path + ": cannot open for writing");
  char buf[48];
  for (int i = 0; i < fs.count(); ++i) {
    const float* r = fs.row(i);
    for (int j = 0; j < fs.dim; ++j) {
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(r[j]));
      out << (j ? "," : "") << buf;
    }
    out << "\n";
  }
}

namespace detail {

inline double sqdist(const float* a, const float* b, int dim) {
  double acc = 0;
  for (int k = 0; k < dim; ++k) {
    const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
    acc += d * d;
  }
  return acc;
}

}  // namespace detail

/// Union-of-hyperspheres manifold estimate: per point, the distance to its
/// k-th nearest neighbor with the point itself excluded.
struct ManifoldEstimate {
  FeatureSet base;
  int k = 0;
  std::vector<double> radii;
};

inline ManifoldEstimate knn_radii(const FeatureSet& phi, int k) {
  const int n = phi.count();
  if (k < 1 || k > n - 1)
    throw ValueError("knn_radii: k = " + std::to_string(k) + " must lie in [1, " +
                     std::to_string(n - 1) + "] for " + std::to_string(n) + " points");
  ManifoldEstimate out;
  out.base = phi;
  out.k = k;
  out.radii.resize(n);

#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    std::vector<std::pair<double, int>> d;
    d.reserve(n - 1);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      d.emplace_back(detail::sqdist(phi.row(i), phi.row(j), phi.dim), j);
    }
    std::nth_element(d.begin(), d.begin() + (k - 1), d.end());
    out.radii[i] = std::sqrt(d[k - 1].first);
  }
  return out;
}

/// 1 iff the query lies inside at least one base hypersphere.
inline int in_manifold(const float* phi, int dim, const ManifoldEstimate& m) {
  if (dim != m.base.dim) throw ShapeError("in_manifold: feature dimension mismatch");
  for (int j = 0; j < m.base.count(); ++j) {
    const double d = std::sqrt(detail::sqdist(phi, m.base.row(j), dim));
    if (d <= m.radii[j]) return 1;
  }
  return 0;
}

struct PRResult {
  double precision = 0, recall = 0;
  int k = 0;
  int count = 0;  // per-set sample count
};

/// Precision: share of generated features inside the real manifold.
/// Recall: share of real features inside the generated manifold.
inline PRResult compute_pr(const FeatureSet& real, const FeatureSet& gen, int k) {
  if (real.count() != gen.count())
    throw ValueError("precision/recall: set sizes differ, " + std::to_string(real.count()) +
                     " vs " + std::to_string(gen.count()));
  if (real.dim != gen.dim) throw ShapeError("precision/recall: feature dimension mismatch");
  const ManifoldEstimate mr = knn_radii(real, k);
  const ManifoldEstimate mg = knn_radii(gen, k);
  const int n = real.count();
  long long np = 0, nr = 0;

#pragma omp parallel for schedule(static) reduction(+ : np, nr)
  for (int i = 0; i < n; ++i) {
    np += in_manifold(gen.row(i), gen.dim, mr);
    nr += in_manifold(real.row(i), real.dim, mg);
  }
  PRResult out;
  out.k = k;
  out.count = n;
  out.precision = static_cast<double>(np) / n;
  out.recall = static_cast<double>(nr) / n;
  return out;
}

inline PRResult precision(const FeatureSet& real, const FeatureSet& gen, int k) {
  return compute_pr(real, gen, k);
}
inline PRResult recall(const FeatureSet& real, const FeatureSet& gen, int k) {
  return compute_pr(real, gen, k);
}

/// P/R for every k in [k_min, k_max]; both columns are non-decreasing in k.
inline std::vector<PRResult> pr_vs_k(const FeatureSet& real, const FeatureSet& gen, int k_min,
                                     int k_max) {
  if (k_min < 1 || k_min > k_max) throw ValueError("pr_vs_k: bad k range");
  std::vector<PRResult> out;
  for (int k = k_min; k <= k_max; ++k) out.push_back(compute_pr(real, gen, k));
  return out;
}

/// Row n compares the n-fold image of the whole test set against the test
/// set itself; row 0 is the test set against itself.
inline std::vector<PRResult> pr_vs_step(const std::vector<Tensor>& test_images,
                                        const GeneratorNet& G, int n_steps, int k) {
  if (test_images.empty()) throw ValueError("pr_vs_step: test set is empty");
  const FeatureSet real = embed_pixels(test_images);
  std::vector<Tensor> cur = test_images;
  std::vector<PRResult> out;
  for (int step = 0; step <= n_steps; ++step) {
    if (step > 0)
      for (Tensor& t : cur) t = infer(G, t);
    PRResult r = compute_pr(real, embed_pixels(cur), k);
    r.k = k;
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Category probe

/// Small softmax convnet that names the domain an image belongs to.
struct CategoryProbe {
  Graph graph;
  Shape image_shape;
  double train_accuracy = 0;
  double holdout_accuracy = 0;
};

inline int classify(const CategoryProbe& probe, const Tensor& image) {
  if (image.shape != probe.image_shape)
    throw ShapeError("classify: image shape mismatch");
  Tape tape = forward(probe.graph, image.data.data(), 1, Mode::Infer);
  const std::vector<float>& logits = tape.acts[probe.graph.output()];
  int best = 0;
  for (int c = 1; c < 3; ++c)
    if (logits[c] > logits[best]) best = c;
  return best;
}

/// Train the probe on the three domains with a 10% holdout per domain;
/// throws with the measured accuracy when training is degenerate.
inline CategoryProbe train_probe(const TriDomain& tri, std::uint64_t seed) {
  if (tri.min_count() < 10) throw ValueError("train_probe: need at least 10 images per domain");
  const Shape shape = tri.X.images[0].shape;

  CategoryProbe probe;
  probe.image_shape = shape;
  Graph& g = probe.graph;
  g = Graph(shape);
  int cur = g.conv2d(-1, 3, 3, 8, 2, Padding::Same, "p0");
  cur = g.relu(cur);
  cur = g.conv2d(cur, 3, 3, 16, 2, Padding::Same, "p1");
  cur = g.relu(cur);
  cur = g.global_avg_pool(cur);
  g.dense(cur, 3, "head");
  Rng rng(hash_mix(seed, 0x960beull));
  g.init_params(rng);

  // holdout split per domain
  const LabeledImages* domains[3] = {&tri.X, &tri.Y, &tri.Z};
  std::vector<const Tensor*> train_x, hold_x;
  std::vector<int> train_y, hold_y;
  for (int d = 0; d < 3; ++d) {
    const int n = domains[d]->count();
    const int n_hold = std::max(1, n / 10);
    for (int i = 0; i < n; ++i) {
      if (i < n - n_hold) {
        train_x.push_back(&domains[d]->images[i]);
        train_y.push_back(d);
      } else {
        hold_x.push_back(&domains[d]->images[i]);
        hold_y.push_back(d);
      }
    }
  }

  AdamState opt;
  opt.lr = 1e-3f;
  opt.beta1 = 0.9f;
  opt.beta2 = 0.999f;
  opt.init(g.params);

  const int dim = g.input_dim();
  const int n_train = static_cast<int>(train_x.size());
  const int batch = std::min(32, n_train);
  const int epochs = 12;
  std::vector<int> order(n_train);
  for (int i = 0; i < n_train; ++i) order[i] = i;
  std::vector<float> xbuf(static_cast<std::size_t>(batch) * dim);
  std::vector<float> up(static_cast<std::size_t>(batch) * 3);

  for (int e = 0; e < epochs; ++e) {
    for (int i = n_train - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);
    for (int b0 = 0; b0 + batch <= n_train; b0 += batch) {
      for (int i = 0; i < batch; ++i)
        std::copy(train_x[order[b0 + i]]->data.begin(), train_x[order[b0 + i]]->data.end(),
                  xbuf.begin() + static_cast<std::size_t>(i) * dim);
      Tape tape = forward(g, xbuf.data(), batch, Mode::Infer);
      const std::vector<float>& logits = tape.acts[g.output()];
      // softmax cross-entropy gradient
      for (int i = 0; i < batch; ++i) {
        const float* l = logits.data() + static_cast<std::size_t>(i) * 3;
        const float mx = std::max(l[0], std::max(l[1], l[2]));
        float z = 0;
        float p[3];
        for (int c = 0; c < 3; ++c) { p[c] = std::exp(l[c] - mx); z += p[c]; }
        for (int c = 0; c < 3; ++c)
          up[static_cast<std::size_t>(i) * 3 + c] =
              (p[c] / z - (train_y[order[b0 + i]] == c ? 1.f : 0.f)) / batch;
      }
      std::vector<Tensor> grads = make_param_grads(g);
      backward(g, tape, up.data(), &grads, static_cast<float*>(nullptr));
      opt.step(g.params, grads);
    }
  }

  auto accuracy = [&](const std::vector<const Tensor*>& xs, const std::vector<int>& ys) {
    int hit = 0;
    for (std::size_t i = 0; i < xs.size(); ++i)
      if (classify(probe, *xs[i]) == ys[i]) ++hit;
    return xs.empty() ? 0.0 : static_cast<double>(hit) / xs.size();
  };
  probe.train_accuracy = accuracy(train_x, train_y);
  probe.holdout_accuracy = accuracy(hold_x, hold_y);
  if (probe.holdout_accuracy < 0.8)
    throw ValueError("train_probe: degenerate training, holdout accuracy " +
                     std::to_string(probe.holdout_accuracy) + ", train accuracy " +
                     std::to_string(probe.train_accuracy));
  return probe;
}

// ---------------------------------------------------------------------------
// PCA projection

struct PcaResult {
  int in_dim = 0, out_dim = 0;
  std::vector<double> mean;          // in_dim
  std::vector<double> components;    // out_dim x in_dim rows
  std::vector<double> explained_ratio;  // out_dim, of total variance
  std::vector<double> projected;     // n x out_dim
  int effective_rank = 0;
  bool rank_warning = false;
};

namespace detail {

// Cyclic Jacobi eigensolver for a symmetric matrix, eigenvalues descending.
inline void jacobi_eigh(std::vector<double>& A, int n, std::vector<double>& eigvals,
                        std::vector<double>& eigvecs) {
  eigvecs.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) eigvecs[static_cast<std::size_t>(i) * n + i] = 1.0;
  auto at = [&](int i, int j) -> double& { return A[static_cast<std::size_t>(i) * n + j]; };
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = eigvecs[static_cast<std::size_t>(k) * n + p];
          const double vkq = eigvecs[static_cast<std::size_t>(k) * n + q];
          eigvecs[static_cast<std::size_t>(k) * n + p] = c * vkp - s * vkq;
          eigvecs[static_cast<std::size_t>(k) * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  eigvals.resize(n);
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) { eigvals[i] = at(i, i); idx[i] = i; }
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return eigvals[a] > eigvals[b]; });
  std::vector<double> ev(n);
  std::vector<double> vec(eigvecs.size());
  for (int r = 0; r < n; ++r) {
    ev[r] = eigvals[idx[r]];
    for (int k = 0; k < n; ++k)
      vec[static_cast<std::size_t>(r) * n + k] = eigvecs[static_cast<std::size_t>(k) * n + idx[r]];
  }
  eigvals = std::move(ev);
  eigvecs = std::move(vec);  // row r = eigenvector r
}

}  // namespace detail

/// Mean-centered projection onto the top principal directions. Sign is fixed
/// by making each component's largest-magnitude entry positive. When the data
/// rank falls below out_dim the remaining coordinates are zero and
/// rank_warning is set.
inline PcaResult pca_project(const FeatureSet& fs, int out_dim = 2) {
  const int n = fs.count();
  const int d = fs.dim;
  if (n < out_dim) throw ValueError("pca_project: need at least out_dim samples");
  PcaResult out;
  out.in_dim = d;
  out.out_dim = out_dim;
  out.mean.assign(d, 0.0);
  for (int i = 0; i < n; ++i) {
    const float* r = fs.row(i);
    for (int j = 0; j < d; ++j) out.mean[j] += r[j];
  }
  for (int j = 0; j < d; ++j) out.mean[j] /= n;

  std::vector<double> cov(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < n; ++i) {
    const float* r = fs.row(i);
    for (int a = 0; a < d; ++a) {
      const double va = r[a] - out.mean[a];
      for (int b = a; b < d; ++b)
        cov[static_cast<std::size_t>(a) * d + b] += va * (r[b] - out.mean[b]);
    }
  }
  const double denom = n > 1 ? n - 1.0 : 1.0;
  double trace = 0;
  for (int a = 0; a < d; ++a) {
    for (int b = a; b < d; ++b) {
      cov[static_cast<std::size_t>(a) * d + b] /= denom;
      cov[static_cast<std::size_t>(b) * d + a] = cov[static_cast<std::size_t>(a) * d + b];
    }
    trace += cov[static_cast<std::size_t>(a) * d + a];
  }

  std::vector<double> eigvals, eigvecs;
  detail::jacobi_eigh(cov, d, eigvals, eigvecs);

  const double tol = std::max(eigvals.empty() ? 0.0 : eigvals[0], 0.0) * 1e-10;
  out.effective_rank = 0;
  for (double v : eigvals)
    if (v > tol && v > 0) ++out.effective_rank;
  out.effective_rank = std::min(out.effective_rank, std::min(n - 1, d));
  out.rank_warning = out.effective_rank < out_dim;

  out.components.assign(static_cast<std::size_t>(out_dim) * d, 0.0);
  out.explained_ratio.assign(out_dim, 0.0);
  for (int r = 0; r < out_dim && r < out.effective_rank; ++r) {
    double* comp = out.components.data() + static_cast<std::size_t>(r) * d;
    std::copy(eigvecs.begin() + static_cast<std::size_t>(r) * d,
              eigvecs.begin() + static_cast<std::size_t>(r + 1) * d, comp);
    int big = 0;
    for (int j = 1; j < d; ++j)
      if (std::abs(comp[j]) > std::abs(comp[big])) big = j;
    if (comp[big] < 0)
      for (int j = 0; j < d; ++j) comp[j] = -comp[j];
    out.explained_ratio[r] = trace > 0 ? eigvals[r] / trace : 0.0;
  }

  out.projected.assign(static_cast<std::size_t>(n) * out_dim, 0.0);
  for (int i = 0; i < n; ++i) {
    const float* row = fs.row(i);
    for (int r = 0; r < out_dim; ++r) {
      const double* comp = out.components.data() + static_cast<std::size_t>(r) * d;
      double acc = 0;
      for (int j = 0; j < d; ++j) acc += (row[j] - out.mean[j]) * comp[j];
      out.projected[static_cast<std::size_t>(i) * out_dim + r] = acc;
    }
  }
  return out;
}

/// Project another feature set with an already fitted basis.
inline std::vector<double> pca_apply(const PcaResult& pca, const FeatureSet& fs) {
  if (fs.dim != pca.in_dim) throw ShapeError("pca_apply: feature dimension mismatch");
  std::vector<double> out(static_cast<std::size_t>(fs.count()) * pca.out_dim, 0.0);
  for (int i = 0; i < fs.count(); ++i) {
    const float* row = fs.row(i);
    for (int r = 0; r < pca.out_dim; ++r) {
      const double* comp = pca.components.data() + static_cast<std::size_t>(r) * pca.in_dim;
      double acc = 0;
      for (int j = 0; j < pca.in_dim; ++j) acc += (row[j] - pca.mean[j]) * comp[j];
      out[static_cast<std::size_t>(i) * pca.out_dim + r] = acc;
    }
  }
  return out;
}

}  // namespace ccgn
