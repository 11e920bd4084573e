#pragma once
// Six-term adversarial loss, six-term cycle-consistency loss, their weighted
// sum, and the alternating minimax training loop.
//
// Term order is fixed everywhere. Adversarial terms h = 0..5:
//   (G,DY,X->Y) (F,DX,Y->X) (G,DZ,Y->Z) (F,DY,Z->Y) (G,DX,Z->X) (F,?,X->Z)
// The discriminator of the last term is configurable: the printed objective
// pairs it with DX, the model diagram suggests DZ.
// Cycle terms h = 0..5: F(G(x))-x, G(F(y))-y, F(G(y))-y, G(F(z))-z,
// F(G(z))-z, G(F(x))-x, each the batch mean of the per-pixel mean |.|.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ccgn/data.hpp"
#include "ccgn/graph.hpp"
#include "ccgn/model.hpp"

namespace ccgn {

enum class Eq7LastTerm { AsPrinted, FigureConsistent };

struct TrainConfig {
  float lambda = 10.f;
  int epochs = 1;
  int batch = 16;
  float lr = 2e-4f;
  float beta1 = 0.5f;
  float beta2 = 0.999f;
  std::uint64_t seed = 1;
  float eps_log = 1e-7f;
  Eq7LastTerm eq7_last_term = Eq7LastTerm::AsPrinted;
  int checkpoint_interval = 50;  // epochs between partial checkpoints
};

inline void validate(const TrainConfig& c) {
  if (c.lambda <= 0.f) throw ValueError("train: lambda must be positive");
  if (c.epochs < 1) throw ValueError("train: epochs must be >= 1");
  if (c.batch < 1) throw ValueError("train: batch must be >= 1");
  if (!(c.eps_log > 0.f && c.eps_log <= 1e-3f))
    throw ValueError("train: eps_log must lie in (0, 1e-3]");
}

namespace detail {

struct GanTerm {
  int gen;   // 0=G 1=F
  int disc;  // 0=DX 1=DY 2=DZ
  int src;   // source domain 0=X 1=Y 2=Z
  int real;  // real-sample domain
};

inline std::array<GanTerm, 6> gan_terms(Eq7LastTerm mode) {
  return {GanTerm{0, 1, 0, 1}, GanTerm{1, 0, 1, 0}, GanTerm{0, 2, 1, 2},
          GanTerm{1, 1, 2, 1}, GanTerm{0, 0, 2, 0},
          GanTerm{1, mode == Eq7LastTerm::AsPrinted ? 0 : 2, 0, 2}};
}

// cycle term h: first map applied to domain src, then the other generator
inline std::array<int, 6> cycle_first_gen() { return {0, 1, 0, 1, 0, 1}; }
inline std::array<int, 6> cycle_src() { return {0, 1, 1, 2, 2, 0}; }

inline double clamped_log(double p, double eps) {
  if (p < eps) p = eps;
  if (p > 1.0 - eps) p = 1.0 - eps;
  return std::log(p);
}

}  // namespace detail

/// One batched deterministic pass (dropout off) through a net.
inline Batch batch_apply(const Graph& g, const Batch& in) {
  Batch out;
  out.count = in.count;
  out.image_shape = g.output_shape();
  if (in.count == 0) return out;
  Tape tape = forward(g, in.flat.data(), in.count, Mode::Infer);
  out.flat = tape.acts[g.output()];
  return out;
}

inline Batch batch_apply(const GeneratorNet& net, const Batch& in) { return batch_apply(net.graph, in); }

/// Mean over the batch of log D(real) + log(1 - D(fake)), with the
/// discriminator outputs clamped to [eps_log, 1-eps_log].
inline double gan_loss(const DiscriminatorNet& D, const Batch& real, const Batch& fake,
                       float eps_log) {
  if (real.count == 0 || fake.count == 0) throw ValueError("gan_loss: empty batch");
  const Batch pr = batch_apply(D.graph, real);
  const Batch pf = batch_apply(D.graph, fake);
  double sum_real = 0, sum_fake = 0;
  for (int i = 0; i < pr.count; ++i) sum_real += detail::clamped_log(pr.flat[i], eps_log);
  for (int i = 0; i < pf.count; ++i) sum_fake += detail::clamped_log(1.0 - pf.flat[i], eps_log);
  return sum_real / pr.count + sum_fake / pf.count;
}

struct AdvBreakdown {
  double total = 0;
  std::array<double, 6> terms{};
};

/// The six-term adversarial objective; fakes are produced in infer mode.
inline AdvBreakdown adversarial_loss_total(const GeneratorNet& G, const GeneratorNet& F,
                                           const DiscriminatorNet& DX, const DiscriminatorNet& DY,
                                           const DiscriminatorNet& DZ, const TripleBatch& tb,
                                           float eps_log,
                                           Eq7LastTerm mode = Eq7LastTerm::AsPrinted) {
  const GeneratorNet* gens[2] = {&G, &F};
  const DiscriminatorNet* discs[3] = {&DX, &DY, &DZ};
  const Batch* domains[3] = {&tb.x, &tb.y, &tb.z};
  AdvBreakdown out;
  for (int h = 0; h < 6; ++h) {
    const detail::GanTerm t = detail::gan_terms(mode)[h];
    const Batch fake = batch_apply(*gens[t.gen], *domains[t.src]);
    out.terms[h] = gan_loss(*discs[t.disc], *domains[t.real], fake, eps_log);
    out.total += out.terms[h];
  }
  return out;
}

struct CycleBreakdown {
  double total = 0;
  std::array<double, 6> terms{};
};

using BatchMap = std::function<Batch(const Batch&)>;

/// Cycle terms for arbitrary self-maps of image space; each term is the
/// batch mean of the per-pixel mean absolute difference.
inline CycleBreakdown cycle_loss_maps(const BatchMap& apply_g, const BatchMap& apply_f,
                                      const TripleBatch& tb) {
  const Batch* domains[3] = {&tb.x, &tb.y, &tb.z};
  CycleBreakdown out;
  for (int h = 0; h < 6; ++h) {
    const int first = detail::cycle_first_gen()[h];
    const Batch& src = *domains[detail::cycle_src()[h]];
    if (src.count == 0) throw ValueError("cycle_loss: empty batch");
    const Batch mid = first == 0 ? apply_g(src) : apply_f(src);
    const Batch back = first == 0 ? apply_f(mid) : apply_g(mid);
    const long long n = numel(src.image_shape);
    double sum = 0;
    for (std::size_t i = 0; i < src.flat.size(); ++i)
      sum += std::abs(static_cast<double>(back.flat[i]) - src.flat[i]);
    out.terms[h] = sum / (static_cast<double>(src.count) * n);
    out.total += out.terms[h];
  }
  return out;
}

inline CycleBreakdown cycle_loss(const GeneratorNet& G, const GeneratorNet& F,
                                 const TripleBatch& tb) {
  return cycle_loss_maps([&](const Batch& b) { return batch_apply(G, b); },
                         [&](const Batch& b) { return batch_apply(F, b); }, tb);
}

/// Adversarial total plus lambda times the cycle total.
inline double total_loss(const GeneratorNet& G, const GeneratorNet& F, const DiscriminatorNet& DX,
                         const DiscriminatorNet& DY, const DiscriminatorNet& DZ,
                         const TripleBatch& tb, float lambda, float eps_log,
                         Eq7LastTerm mode = Eq7LastTerm::AsPrinted) {
  if (lambda <= 0.f) throw ValueError("total_loss: lambda must be positive");
  return adversarial_loss_total(G, F, DX, DY, DZ, tb, eps_log, mode).total +
         static_cast<double>(lambda) * cycle_loss(G, F, tb).total;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  float lr = 2e-4f, beta1 = 0.5f, beta2 = 0.999f, eps = 1e-8f;
  int t = 0;
  std::vector<Tensor> m, v;

  void init(const std::vector<Tensor>& params) {
    t = 0;
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.shape);
      v.emplace_back(p.shape);
    }
  }

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    ++t;
    const float c1 = 1.f - std::pow(beta1, static_cast<float>(t));
    const float c2 = 1.f - std::pow(beta2, static_cast<float>(t));
    for (std::size_t p = 0; p < params.size(); ++p) {
      float* th = params[p].data.data();
      float* mp = m[p].data.data();
      float* vp = v[p].data.data();
      const float* gp = grads[p].data.data();
      const std::size_t n = params[p].data.size();
      for (std::size_t i = 0; i < n; ++i) {
        mp[i] = beta1 * mp[i] + (1.f - beta1) * gp[i];
        vp[i] = beta2 * vp[i] + (1.f - beta2) * gp[i] * gp[i];
        th[i] -= lr * (mp[i] / c1) / (std::sqrt(vp[i] / c2) + eps);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Training loop

struct EpochLoss {
  double adv_total = 0, cyc_total = 0;
  std::array<double, 6> adv{}, cyc{};
};

namespace detail {

// Per-shard scratch reused across steps so the hot loop never allocates.
struct ShardScratch {
  TapeT<float> gen, d_real, d_fake;  // discriminator phase
  TapeT<float> g1, gd, g2;           // generator phase
  std::vector<Tensor> dgrads[3], ggrads, fgrads;
  std::vector<float> up, upq, d_mid, up_out;
  std::array<double, 6> adv_sum{}, cyc_sum{};
};

struct StepWorkspace {
  std::vector<ShardScratch> shards;
  std::vector<Tensor> merged_g, merged_f, merged_d[3];
};

inline void zero_grads(std::vector<Tensor>& grads) {
  for (Tensor& t : grads) std::fill(t.data.begin(), t.data.end(), 0.f);
}

}  // namespace detail

struct TrainState {
  GeneratorNet G, F;
  DiscriminatorNet DX, DY, DZ;
  AdamState optG, optF, optDX, optDY, optDZ;
  int epoch = 0;
  long long step = 0;
  std::vector<EpochLoss> history;
  detail::StepWorkspace ws;  // scratch only, never serialized
};

inline TrainState make_train_state(const TrainConfig& cfg, const ArchConfig& arch,
                                   const Shape& image_shape) {
  validate(cfg);
  TrainState s;
  Checkpoint fresh = make_checkpoint(arch, image_shape, cfg.seed);
  s.G = std::move(fresh.G);
  s.F = std::move(fresh.F);
  s.DX = std::move(fresh.DX);
  s.DY = std::move(fresh.DY);
  s.DZ = std::move(fresh.DZ);
  for (AdamState* o : {&s.optG, &s.optF, &s.optDX, &s.optDY, &s.optDZ}) {
    o->lr = cfg.lr;
    o->beta1 = cfg.beta1;
    o->beta2 = cfg.beta2;
  }
  s.optG.init(s.G.graph.params);
  s.optF.init(s.F.graph.params);
  s.optDX.init(s.DX.graph.params);
  s.optDY.init(s.DY.graph.params);
  s.optDZ.init(s.DZ.graph.params);
  return s;
}

struct StepLosses {
  std::array<double, 6> adv{}, cyc{};
  double adv_total = 0, cyc_total = 0;
};

namespace detail {

// Work is split over a fixed shard count so gradient reduction order, and
// with it every trained bit, is independent of the number of threads.
constexpr int kGradShards = 8;

inline std::uint64_t mask_key(std::uint64_t seed, long long step, int slot) {
  return hash_mix(hash_mix(seed, 0xd407u), (static_cast<std::uint64_t>(step) << 12) ^
                                               static_cast<std::uint64_t>(slot));
}

inline void add_into(std::vector<Tensor>& dst, const std::vector<Tensor>& src) {
  for (std::size_t p = 0; p < dst.size(); ++p) {
    float* d = dst[p].data.data();
    const float* s = src[p].data.data();
    for (std::size_t i = 0; i < dst[p].data.size(); ++i) d[i] += s[i];
  }
}

}  // namespace detail

/// One discriminator ascent step on the adversarial terms with generators
/// frozen, then one generator descent step on the full objective with
/// discriminators frozen; generators use the non-saturating surrogate.
/// Parameters are untouched if any loss turns non-finite.
inline StepLosses train_step(TrainState& s, const TripleBatch& tb, const TrainConfig& cfg) {
  const int B = tb.x.count;
  if (B == 0 || tb.y.count != B || tb.z.count != B)
    throw ValueError("train_step: triple batch domains must be equally sized and non-empty");
  const long long step = s.step++;
  const double eps = cfg.eps_log;
  const auto terms = detail::gan_terms(cfg.eq7_last_term);
  const Batch* domains[3] = {&tb.x, &tb.y, &tb.z};
  GeneratorNet* gens[2] = {&s.G, &s.F};
  DiscriminatorNet* discs[3] = {&s.DX, &s.DY, &s.DZ};
  const int in_dim = s.G.graph.input_dim();

  const int shards = std::min(detail::kGradShards, B);
  auto shard_range = [&](int sh) {
    const int lo = static_cast<int>(static_cast<long long>(sh) * B / shards);
    const int hi = static_cast<int>(static_cast<long long>(sh + 1) * B / shards);
    return std::pair<int, int>(lo, hi);
  };

  detail::StepWorkspace& ws = s.ws;
  if (static_cast<int>(ws.shards.size()) != shards) {
    ws.shards.assign(shards, detail::ShardScratch{});
    for (auto& sc : ws.shards) {
      for (int d = 0; d < 3; ++d) sc.dgrads[d] = make_param_grads(discs[d]->graph);
      sc.ggrads = make_param_grads(s.G.graph);
      sc.fgrads = make_param_grads(s.F.graph);
    }
    ws.merged_g = make_param_grads(s.G.graph);
    ws.merged_f = make_param_grads(s.F.graph);
    for (int d = 0; d < 3; ++d) ws.merged_d[d] = make_param_grads(discs[d]->graph);
  }
  std::exception_ptr shard_error = nullptr;

  // ---- discriminator phase ----
#pragma omp parallel for schedule(static)
  for (int sh = 0; sh < shards; ++sh) {
    try {
    detail::ShardScratch& sc = ws.shards[sh];
    for (int d = 0; d < 3; ++d) detail::zero_grads(sc.dgrads[d]);
    sc.adv_sum.fill(0.0);
    const auto [lo, hi] = shard_range(sh);
    const int n = hi - lo;
    if (n == 0) continue;
    sc.up.resize(static_cast<std::size_t>(n));
    for (int h = 0; h < 6; ++h) {
      const detail::GanTerm& t = terms[h];
      const Graph& gen = gens[t.gen]->graph;
      const Graph& dg = discs[t.disc]->graph;
      forward_into(gen, domains[t.src]->row(lo), n, Mode::Train,
                   detail::mask_key(cfg.seed, step, h * 8 + 0), lo, sc.gen);
      const std::vector<float>& fake = sc.gen.acts[gen.output()];
      forward_into(dg, domains[t.real]->row(lo), n, Mode::Train,
                   detail::mask_key(cfg.seed, step, h * 8 + 1), lo, sc.d_real);
      forward_into(dg, fake.data(), n, Mode::Train,
                   detail::mask_key(cfg.seed, step, h * 8 + 2), lo, sc.d_fake);
      const std::vector<float>& pr = sc.d_real.acts[dg.output()];
      const std::vector<float>& pf = sc.d_fake.acts[dg.output()];
      // ascend on mean log p + mean log(1-q): minimize the negation
      for (int i = 0; i < n; ++i) {
        const double p = pr[i];
        sc.adv_sum[h] += detail::clamped_log(p, eps);
        sc.up[i] = (p > eps && p < 1.0 - eps) ? static_cast<float>(-1.0 / (B * p)) : 0.f;
      }
      backward(dg, sc.d_real, sc.up.data(), &sc.dgrads[t.disc], static_cast<float*>(nullptr));
      for (int i = 0; i < n; ++i) {
        const double q = pf[i];
        sc.adv_sum[h] += detail::clamped_log(1.0 - q, eps);
        sc.up[i] = (q > eps && q < 1.0 - eps) ? static_cast<float>(1.0 / (B * (1.0 - q))) : 0.f;
      }
      backward(dg, sc.d_fake, sc.up.data(), &sc.dgrads[t.disc], static_cast<float*>(nullptr));
    }
    } catch (...) {
#pragma omp critical
      if (!shard_error) shard_error = std::current_exception();
    }
  }
  if (shard_error) std::rethrow_exception(shard_error);

  StepLosses losses;
  for (int d = 0; d < 3; ++d) {
    detail::zero_grads(ws.merged_d[d]);
    for (int sh = 0; sh < shards; ++sh) detail::add_into(ws.merged_d[d], ws.shards[sh].dgrads[d]);
    AdamState* opt = d == 0 ? &s.optDX : (d == 1 ? &s.optDY : &s.optDZ);
    opt->step(discs[d]->graph.params, ws.merged_d[d]);
  }
  for (int h = 0; h < 6; ++h) {
    for (int sh = 0; sh < shards; ++sh) losses.adv[h] += ws.shards[sh].adv_sum[h];
    losses.adv[h] /= B;
    losses.adv_total += losses.adv[h];
  }

  // ---- generator phase ----
#pragma omp parallel for schedule(static)
  for (int sh = 0; sh < shards; ++sh) {
    try {
    detail::ShardScratch& sc = ws.shards[sh];
    detail::zero_grads(sc.ggrads);
    detail::zero_grads(sc.fgrads);
    sc.cyc_sum.fill(0.0);
    const auto [lo, hi] = shard_range(sh);
    const int n = hi - lo;
    if (n == 0) continue;
    sc.upq.resize(static_cast<std::size_t>(n));
    sc.d_mid.resize(static_cast<std::size_t>(n) * in_dim);
    sc.up_out.resize(static_cast<std::size_t>(n) * in_dim);
    for (int h = 0; h < 6; ++h) {
      const detail::GanTerm& t = terms[h];
      Graph& g1 = gens[t.gen]->graph;
      Graph& g2 = gens[1 - t.gen]->graph;
      const Graph& dg = discs[t.disc]->graph;
      std::vector<Tensor>& g1_grads = t.gen == 0 ? sc.ggrads : sc.fgrads;
      std::vector<Tensor>& g2_grads = t.gen == 0 ? sc.fgrads : sc.ggrads;
      const Batch& src = *domains[t.src];

      forward_into(g1, src.row(lo), n, Mode::Train,
                   detail::mask_key(cfg.seed, step, 512 + h * 8 + 0), lo, sc.g1);
      const std::vector<float>& mid = sc.g1.acts[g1.output()];
      std::fill(sc.d_mid.begin(), sc.d_mid.end(), 0.f);

      // non-saturating adversarial pull: maximize log D(fake)
      forward_into(dg, mid.data(), n, Mode::Train,
                   detail::mask_key(cfg.seed, step, 512 + h * 8 + 1), lo, sc.gd);
      const std::vector<float>& q = sc.gd.acts[dg.output()];
      for (int i = 0; i < n; ++i)
        sc.upq[i] =
            (q[i] > eps && q[i] < 1.0 - eps) ? static_cast<float>(-1.0 / (B * double(q[i]))) : 0.f;
      backward(dg, sc.gd, sc.upq.data(), static_cast<std::vector<Tensor>*>(nullptr),
               sc.d_mid.data());

      // cycle consistency through the second hop
      forward_into(g2, mid.data(), n, Mode::Train,
                   detail::mask_key(cfg.seed, step, 512 + h * 8 + 2), lo, sc.g2);
      const std::vector<float>& back = sc.g2.acts[g2.output()];
      const float w = cfg.lambda / (static_cast<float>(B) * in_dim);
      for (std::size_t i = 0; i < back.size(); ++i) {
        const float diff = back[i] - src.row(lo)[i];
        sc.cyc_sum[h] += std::abs(static_cast<double>(diff));
        sc.up_out[i] = diff > 0.f ? w : (diff < 0.f ? -w : 0.f);
      }
      backward(g2, sc.g2, sc.up_out.data(), &g2_grads, sc.d_mid.data());
      backward(g1, sc.g1, sc.d_mid.data(), &g1_grads, static_cast<float*>(nullptr));
    }
    } catch (...) {
#pragma omp critical
      if (!shard_error) shard_error = std::current_exception();
    }
  }
  if (shard_error) std::rethrow_exception(shard_error);

  detail::zero_grads(ws.merged_g);
  detail::zero_grads(ws.merged_f);
  for (int sh = 0; sh < shards; ++sh) {
    detail::add_into(ws.merged_g, ws.shards[sh].ggrads);
    detail::add_into(ws.merged_f, ws.shards[sh].fgrads);
  }
  for (int h = 0; h < 6; ++h) {
    for (int sh = 0; sh < shards; ++sh) losses.cyc[h] += ws.shards[sh].cyc_sum[h];
    losses.cyc[h] /= static_cast<double>(B) * in_dim;
    losses.cyc_total += losses.cyc[h];
  }
  if (!std::isfinite(losses.adv_total) || !std::isfinite(losses.cyc_total))
    throw ValueError("train_step: non-finite loss at step " + std::to_string(step) +
                     "; parameters left at the last good state");

  s.optG.step(s.G.graph.params, ws.merged_g);
  s.optF.step(s.F.graph.params, ws.merged_f);
  return losses;
}

inline Checkpoint checkpoint_from_state(const TrainState& s, const TrainConfig& cfg) {
  Checkpoint c;
  c.arch = s.G.arch;
  c.image_shape = s.G.image_shape;
  c.epochs = static_cast<std::uint32_t>(s.epoch);
  c.seed = cfg.seed;
  c.lambda = cfg.lambda;
  c.eq7_mode = cfg.eq7_last_term == Eq7LastTerm::AsPrinted ? 0 : 1;
  c.G = s.G;
  c.F = s.F;
  c.DX = s.DX;
  c.DY = s.DY;
  c.DZ = s.DZ;
  return c;
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLoss> history;
};

/// Full training run: epochs x batches alternating steps, per-epoch loss
/// means, optional progress callback (used for partial checkpoints).
inline TrainResult train(const TrainConfig& cfg, const ArchConfig& arch, const TriDomain& tri,
                         const std::function<void(int, const TrainState&, const EpochLoss&)>&
                             on_epoch = nullptr) {
  validate(cfg);
  if (tri.min_count() == 0) throw ValueError("train: every domain needs at least one image");
  TrainState s = make_train_state(cfg, arch, tri.X.images[0].shape);
  BatchStream stream(tri, cfg.batch, hash_mix(cfg.seed, 0xba7c5ull));
  for (int e = 0; e < cfg.epochs; ++e) {
    EpochLoss el;
    const std::vector<TripleBatch> batches = stream.next_epoch();
    for (const TripleBatch& tb : batches) {
      const StepLosses sl = train_step(s, tb, cfg);
      el.adv_total += sl.adv_total;
      el.cyc_total += sl.cyc_total;
      for (int h = 0; h < 6; ++h) {
        el.adv[h] += sl.adv[h];
        el.cyc[h] += sl.cyc[h];
      }
    }
    const double nb = static_cast<double>(batches.size());
    el.adv_total /= nb;
    el.cyc_total /= nb;
    for (int h = 0; h < 6; ++h) {
      el.adv[h] /= nb;
      el.cyc[h] /= nb;
    }
    s.epoch = e + 1;
    s.history.push_back(el);
    for (const Graph* g : {&s.G.graph, &s.F.graph, &s.DX.graph, &s.DY.graph, &s.DZ.graph})
      for (const Tensor& p : g->params)
        if (!all_finite(p.data.data(), p.data.size()))
          throw ValueError("train: non-finite parameters after epoch " + std::to_string(s.epoch));
    if (on_epoch) on_epoch(s.epoch, s, el);
  }
  return TrainResult{checkpoint_from_state(s, cfg), s.history};
}

}  // namespace ccgn
