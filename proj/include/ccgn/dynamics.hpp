#pragma once
// Discrete-time dynamical systems machinery: orbit iteration, Lyapunov
// spectrum estimation from Jacobian products with per-step modified
// Gram-Schmidt reorthonormalization, the Kaplan-Yorke dimension, and an
// independent largest-exponent estimate from direct trajectory divergence.
//
// Tangent vectors and accumulators are 64-bit even when the underlying map
// runs in 32-bit.

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "ccgn/graph.hpp"
#include "ccgn/model.hpp"

namespace ccgn {

/// A differentiable self-map of R^N.
class DynMap {
 public:
  virtual ~DynMap() = default;
  virtual int dimension() const = 0;
  virtual void evaluate(const double* x, double* out) const = 0;
  /// Full N x N Jacobian at x, row-major.
  virtual void jacobian_at(const double* x, double* J) const = 0;
  /// J(x) applied to m tangent rows; the default builds the full matrix.
  virtual void jacobian_apply_rows(const double* x, const double* tangents, int m,
                                   double* out) const {
    const int N = dimension();
    std::vector<double> J(static_cast<std::size_t>(N) * N);
    jacobian_at(x, J.data());
    for (int r = 0; r < m; ++r) {
      const double* t = tangents + static_cast<std::size_t>(r) * N;
      double* o = out + static_cast<std::size_t>(r) * N;
      for (int i = 0; i < N; ++i) {
        const double* row = J.data() + static_cast<std::size_t>(i) * N;
        double acc = 0;
        for (int j = 0; j < N; ++j) acc += row[j] * t[j];
        o[i] = acc;
      }
    }
  }
};

struct Trajectory {
  std::vector<std::vector<double>> states;  // x_{T+1} .. x_{T+n}
  int transient_skipped = 0;
};

/// Apply the map n_transient times discarding outputs, then record n_steps
/// further states.
inline Trajectory iterate(const DynMap& map, const std::vector<double>& x0, int n_steps,
                          int n_transient) {
  const int N = map.dimension();
  if (static_cast<int>(x0.size()) != N)
    throw ShapeError("iterate: initial state has dimension " + std::to_string(x0.size()) +
                     ", map expects " + std::to_string(N));
  Trajectory out;
  out.transient_skipped = n_transient;
  std::vector<double> x = x0, next(N);
  auto step = [&](int k) {
    map.evaluate(x.data(), next.data());
    if (!all_finite(next.data(), next.size()))
      throw ValueError("iterate: non-finite state at step " + std::to_string(k));
    x.swap(next);
  };
  for (int k = 0; k < n_transient; ++k) step(k - n_transient);
  out.states.reserve(n_steps);
  for (int k = 0; k < n_steps; ++k) {
    step(k);
    out.states.push_back(x);
  }
  return out;
}

struct LyapunovSpectrum {
  std::vector<double> exponents;  // descending
  int n_steps = 0;
};

namespace detail {

// Modified Gram-Schmidt on m rows with a second orthogonalization pass;
// returns the diagonal normalization factors.
inline void mgs_orthonormalize(double* Q, int m, int N, double* r_out, int step_for_error) {
  for (int i = 0; i < m; ++i) {
    double* qi = Q + static_cast<std::size_t>(i) * N;
    for (int pass = 0; pass < 2; ++pass) {
      for (int j = 0; j < i; ++j) {
        const double* qj = Q + static_cast<std::size_t>(j) * N;
        double dot = 0;
        for (int k = 0; k < N; ++k) dot += qi[k] * qj[k];
        for (int k = 0; k < N; ++k) qi[k] -= dot * qj[k];
      }
    }
    double norm = 0;
    for (int k = 0; k < N; ++k) norm += qi[k] * qi[k];
    norm = std::sqrt(norm);
    if (!(norm > 1e-200))
      throw ValueError("lyapunov: tangent basis rank collapse at step " +
                       std::to_string(step_for_error) + ", vector " + std::to_string(i));
    const double inv = 1.0 / norm;
    for (int k = 0; k < N; ++k) qi[k] *= inv;
    r_out[i] = norm;
  }
}

}  // namespace detail

/// QR/Gram-Schmidt estimate of the m leading exponents along one orbit.
/// Q0, when given, supplies the initial orthonormal tangent rows.
inline LyapunovSpectrum lyapunov_spectrum(const DynMap& map, const std::vector<double>& x0,
                                          int n_transient, int n_steps, int m,
                                          const std::vector<double>* Q0 = nullptr) {
  const int N = map.dimension();
  if (m < 1 || m > N)
    throw ValueError("lyapunov_spectrum: exponent count " + std::to_string(m) +
                     " must lie in [1, " + std::to_string(N) + "]");
  if (n_steps < 1) throw ValueError("lyapunov_spectrum: n_steps must be >= 1");
  if (static_cast<int>(x0.size()) != N)
    throw ShapeError("lyapunov_spectrum: initial state dimension mismatch");

  std::vector<double> x = x0, next(N);
  for (int k = 0; k < n_transient; ++k) {
    map.evaluate(x.data(), next.data());
    if (!all_finite(next.data(), next.size()))
      throw ValueError("lyapunov_spectrum: non-finite state in transient step " + std::to_string(k));
    x.swap(next);
  }

  std::vector<double> Q(static_cast<std::size_t>(m) * N, 0.0);
  if (Q0) {
    if (Q0->size() != Q.size()) throw ShapeError("lyapunov_spectrum: Q0 must be m x N");
    Q = *Q0;
  } else if (m == N) {
    for (int i = 0; i < m; ++i) Q[static_cast<std::size_t>(i) * N + i] = 1.0;
  } else {
    // dense seeded basis: a sparse unit vector can sit in the null space of a
    // partially saturated 32-bit map, a dense one essentially cannot
    Rng rng(0x7a46e57ull);
    for (auto& v : Q) v = rng.uniform() - 0.5;
    std::vector<double> r(m);
    detail::mgs_orthonormalize(Q.data(), m, N, r.data(), -1);
  }

  std::vector<double> Z(Q.size()), r(m), sums(m, 0.0);
  for (int k = 0; k < n_steps; ++k) {
    map.jacobian_apply_rows(x.data(), Q.data(), m, Z.data());
    Q.swap(Z);
    detail::mgs_orthonormalize(Q.data(), m, N, r.data(), k);
    for (int i = 0; i < m; ++i) sums[i] += std::log(r[i]);
    map.evaluate(x.data(), next.data());
    if (!all_finite(next.data(), next.size()))
      throw ValueError("lyapunov_spectrum: non-finite state at step " + std::to_string(k));
    x.swap(next);
  }

  LyapunovSpectrum out;
  out.n_steps = n_steps;
  out.exponents.resize(m);
  for (int i = 0; i < m; ++i) out.exponents[i] = sums[i] / n_steps;
  std::sort(out.exponents.begin(), out.exponents.end(), std::greater<double>());
  return out;
}

struct SpectrumEnsemble {
  std::vector<double> mean, stddev;            // per exponent index
  std::vector<std::vector<double>> per_trajectory;  // successes only, input order
  std::vector<int> failed_indices;
  std::vector<std::string> failures;
  int n_steps = 0;
};

/// Independent spectra from every initial point, merged in input order.
inline SpectrumEnsemble spectrum_ensemble(const DynMap& map,
                                          const std::vector<std::vector<double>>& initial_set,
                                          int n_transient, int n_steps, int m) {
  if (initial_set.empty()) throw ValueError("spectrum_ensemble: initial set is empty");
  const int n = static_cast<int>(initial_set.size());
  std::vector<std::vector<double>> results(n);
  std::vector<std::string> errors(n);

#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    try {
      results[i] = lyapunov_spectrum(map, initial_set[i], n_transient, n_steps, m).exponents;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }

  SpectrumEnsemble out;
  out.n_steps = n_steps;
  for (int i = 0; i < n; ++i) {
    if (results[i].empty()) {
      out.failed_indices.push_back(i);
      out.failures.push_back(errors[i]);
    } else {
      out.per_trajectory.push_back(std::move(results[i]));
    }
  }
  if (out.per_trajectory.empty())
    throw ValueError("spectrum_ensemble: every trajectory failed; first error: " +
                     (out.failures.empty() ? std::string("?") : out.failures.front()));
  const int ok = static_cast<int>(out.per_trajectory.size());
  out.mean.assign(m, 0.0);
  out.stddev.assign(m, 0.0);
  for (const auto& ex : out.per_trajectory)
    for (int i = 0; i < m; ++i) out.mean[i] += ex[i];
  for (int i = 0; i < m; ++i) out.mean[i] /= ok;
  for (const auto& ex : out.per_trajectory)
    for (int i = 0; i < m; ++i) {
      const double d = ex[i] - out.mean[i];
      out.stddev[i] += d * d;
    }
  for (int i = 0; i < m; ++i) out.stddev[i] = ok > 1 ? std::sqrt(out.stddev[i] / (ok - 1)) : 0.0;
  return out;
}

struct LyapunovDimension {
  double value = 0;
  bool saturated = false;  // every partial sum stayed non-negative
};

/// Kaplan-Yorke dimension from a descending spectrum: the largest j with
/// non-negative partial sum plus the fractional remainder.
inline LyapunovDimension lyapunov_dimension(const std::vector<double>& exponents) {
  if (exponents.empty()) throw ValueError("lyapunov_dimension: empty spectrum");
  for (std::size_t i = 1; i < exponents.size(); ++i)
    if (exponents[i] > exponents[i - 1])
      throw ValueError("lyapunov_dimension: spectrum must be sorted descending");
  LyapunovDimension out;
  if (exponents[0] < 0) return out;  // contracting in every direction
  double partial = 0;
  for (std::size_t j = 0; j < exponents.size(); ++j) {
    const double next = partial + exponents[j];
    if (next < 0) {
      out.value = static_cast<double>(j) + partial / std::abs(exponents[j]);
      return out;
    }
    partial = next;
  }
  out.value = static_cast<double>(exponents.size());
  out.saturated = true;
  return out;
}

struct DivergenceCurve {
  std::vector<double> mean_log;                 // per step, mean over pairs of log d_n
  std::vector<std::vector<double>> per_pair;    // per surviving pair
  std::vector<int> pair_base_index;             // base point behind each curve
  std::vector<int> skipped;                     // zero-distance base points
  double slope = 0;
  int fit_begin = 0, fit_end = 0;               // [begin, end) window of the fit
  double attractor_diameter = 0;
};

/// Perturb every base point by epsilon toward its nearest peer, iterate
/// both trajectories, and average the log separation per step. The slope
/// over the pre-saturation window estimates the largest exponent.
inline DivergenceCurve direct_divergence(const DynMap& map,
                                         const std::vector<std::vector<double>>& base_points,
                                         double epsilon, int n_steps) {
  if (base_points.size() < 2)
    throw ValueError("direct_divergence: need at least two base points for the nearest peer");
  if (!(epsilon > 0)) throw ValueError("direct_divergence: epsilon must be positive");
  const int N = map.dimension();
  const int J = static_cast<int>(base_points.size());

  // nearest peer per base point, plus the attractor diameter estimate
  std::vector<int> peer(J, -1);
  double diam = 0;
  std::vector<double> nearest(J, std::numeric_limits<double>::infinity());
  for (int a = 0; a < J; ++a) {
    for (int b = a + 1; b < J; ++b) {
      double d2 = 0;
      for (int k = 0; k < N; ++k) {
        const double d = base_points[a][k] - base_points[b][k];
        d2 += d * d;
      }
      const double d = std::sqrt(d2);
      diam = std::max(diam, d);
      if (d < nearest[a]) { nearest[a] = d; peer[a] = b; }
      if (d < nearest[b]) { nearest[b] = d; peer[b] = a; }
    }
  }

  DivergenceCurve out;
  out.attractor_diameter = diam;
  std::vector<int> alive;
  for (int a = 0; a < J; ++a) {
    if (nearest[a] > 0) alive.push_back(a);
    else out.skipped.push_back(a);
  }
  if (alive.empty()) throw ValueError("direct_divergence: all base points coincide");

  const int P = static_cast<int>(alive.size());
  out.per_pair.assign(P, std::vector<double>(n_steps + 1));
  out.pair_base_index.assign(alive.begin(), alive.end());
  std::exception_ptr err = nullptr;

#pragma omp parallel for schedule(dynamic)
  for (int pi = 0; pi < P; ++pi) {
    try {
      const int a = alive[pi];
      std::vector<double> x = base_points[a];
      std::vector<double> y = base_points[a];
      const std::vector<double>& nb = base_points[peer[a]];
      const double inv = epsilon / nearest[a];
      for (int k = 0; k < N; ++k) y[k] += inv * (nb[k] - x[k]);
      std::vector<double> xn(N), yn(N);
      for (int step = 0; step <= n_steps; ++step) {
        double d2 = 0;
        for (int k = 0; k < N; ++k) {
          const double d = y[k] - x[k];
          d2 += d * d;
        }
        const double d = std::sqrt(d2);
        out.per_pair[pi][step] = std::log(std::max(d, 1e-300));
        if (step == n_steps) break;
        map.evaluate(x.data(), xn.data());
        map.evaluate(y.data(), yn.data());
        if (!all_finite(xn.data(), N) || !all_finite(yn.data(), N))
          throw ValueError("direct_divergence: non-finite state at step " + std::to_string(step));
        x.swap(xn);
        y.swap(yn);
      }
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);

  out.mean_log.assign(n_steps + 1, 0.0);
  for (int step = 0; step <= n_steps; ++step) {
    double s = 0;
    for (int pi = 0; pi < P; ++pi) s += out.per_pair[pi][step];
    out.mean_log[step] = s / P;
  }

  // least-squares slope over the window where the mean separation is still
  // below a tenth of the attractor diameter
  const double cutoff = std::log(0.1 * diam);
  int end = 0;
  while (end <= n_steps && out.mean_log[end] < cutoff) ++end;
  if (end < 2) throw ValueError("direct_divergence: separation saturates immediately; reduce epsilon");
  out.fit_begin = 0;
  out.fit_end = end;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < end; ++i) {
    sx += i;
    sy += out.mean_log[i];
    sxx += static_cast<double>(i) * i;
    sxy += i * out.mean_log[i];
  }
  const double denom = end * sxx - sx * sx;
  out.slope = (end * sxy - sx * sy) / denom;
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark maps and the generator map

/// x -> r x (1 - x) on the unit interval.
class LogisticMap : public DynMap {
 public:
  explicit LogisticMap(double r) : r_(r) {
    if (!std::isfinite(r)) throw ValueError("logistic: r must be finite");
  }
  int dimension() const override { return 1; }
  void evaluate(const double* x, double* out) const override { out[0] = r_ * x[0] * (1.0 - x[0]); }
  void jacobian_at(const double* x, double* J) const override { J[0] = r_ * (1.0 - 2.0 * x[0]); }

 private:
  double r_;
};

/// (x, y) -> (1 - a x^2 + y, b x).
class HenonMap : public DynMap {
 public:
  HenonMap(double a, double b) : a_(a), b_(b) {
    if (!std::isfinite(a) || !std::isfinite(b)) throw ValueError("henon: parameters must be finite");
  }
  int dimension() const override { return 2; }
  void evaluate(const double* x, double* out) const override {
    out[0] = 1.0 - a_ * x[0] * x[0] + x[1];
    out[1] = b_ * x[0];
  }
  void jacobian_at(const double* x, double* J) const override {
    J[0] = -2.0 * a_ * x[0];
    J[1] = 1.0;
    J[2] = b_;
    J[3] = 0.0;
  }

 private:
  double a_, b_;
};

/// The trained generator as a self-map of flattened image space. The map
/// itself runs in 32-bit; states and tangents cross the boundary in 64-bit.
class GeneratorMap : public DynMap {
 public:
  explicit GeneratorMap(GeneratorNet net) : net_(std::move(net)) {
    dim_ = net_.graph.input_dim();
    if (net_.graph.output_dim() != dim_)
      throw ShapeError("generator_map: the generator must be a self-map");
  }

  int dimension() const override { return dim_; }

  const GeneratorNet& net() const { return net_; }

  void evaluate(const double* x, double* out) const override {
    std::vector<float> xf(dim_);
    for (int i = 0; i < dim_; ++i) xf[i] = static_cast<float>(x[i]);
    Tape tape = forward(net_.graph, xf.data(), 1, Mode::Infer);
    const std::vector<float>& y = tape.acts[net_.graph.output()];
    for (int i = 0; i < dim_; ++i) out[i] = y[i];
  }

  void jacobian_at(const double* x, double* J) const override {
    Tensor xt(net_.image_shape);
    for (int i = 0; i < dim_; ++i) xt.data[i] = static_cast<float>(x[i]);
    const JacobianMatrix jm = jacobian(net_.graph, xt);
    for (std::size_t i = 0; i < jm.data.size(); ++i) J[i] = jm.data[i];
  }

  void jacobian_apply_rows(const double* x, const double* tangents, int m,
                           double* out) const override {
    std::vector<float> xf(dim_);
    for (int i = 0; i < dim_; ++i) xf[i] = static_cast<float>(x[i]);
    std::vector<float> tf(static_cast<std::size_t>(m) * dim_);
    for (std::size_t i = 0; i < tf.size(); ++i) tf[i] = static_cast<float>(tangents[i]);
    std::vector<float> of(tf.size());
    Tape tape = forward(net_.graph, xf.data(), 1, Mode::Infer);
    jvp(net_.graph, tape, tf.data(), m, of.data());
    for (std::size_t i = 0; i < of.size(); ++i) out[i] = of[i];
  }

  /// Row-major flatten of an image to a state vector.
  std::vector<double> flatten(const Tensor& img) const {
    if (img.shape != net_.image_shape)
      throw ShapeError("generator_map: image shape " + shape_str(img.shape) +
                       " does not match model shape " + shape_str(net_.image_shape));
    return std::vector<double>(img.data.begin(), img.data.end());
  }

  Tensor unflatten(const std::vector<double>& x) const {
    if (static_cast<int>(x.size()) != dim_)
      throw ShapeError("generator_map: state dimension mismatch");
    Tensor t(net_.image_shape);
    for (int i = 0; i < dim_; ++i) t.data[i] = static_cast<float>(x[i]);
    return t;
  }

 private:
  GeneratorNet net_;
  int dim_ = 0;
};

}  // namespace ccgn
