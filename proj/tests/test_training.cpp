#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "ccgn/training.hpp"

using namespace ccgn;

namespace {

constexpr double kLog2 = 0.6931471805599453;

ArchConfig tiny_arch() {
  ArchConfig a;
  a.base_channels = 4;
  a.n_resblocks = 1;
  a.n_downsamples = 2;
  return a;
}

// D that always answers 0.5: zero the dense head.
DiscriminatorNet constant_half_disc(const Shape& shape) {
  DiscriminatorNet d = build_discriminator(tiny_arch(), shape);
  Rng rng(11);
  d.graph.init_params(rng);
  for (std::size_t p = 0; p < d.graph.params.size(); ++p)
    if (d.graph.param_names[p].rfind("head/", 0) == 0)
      std::fill(d.graph.params[p].data.begin(), d.graph.params[p].data.end(), 0.f);
  return d;
}

Batch constant_batch(int n, const Shape& shape, float v) {
  Batch b;
  b.count = n;
  b.image_shape = shape;
  b.flat.assign(static_cast<std::size_t>(n) * numel(shape), v);
  return b;
}

Batch random_batch(int n, const Shape& shape, Rng& rng) {
  Batch b;
  b.count = n;
  b.image_shape = shape;
  b.flat.resize(static_cast<std::size_t>(n) * numel(shape));
  for (auto& v : b.flat) v = rng.uniformf(-1, 1);
  return b;
}

TripleBatch random_triple(int n, const Shape& shape, Rng& rng) {
  return TripleBatch{random_batch(n, shape, rng), random_batch(n, shape, rng),
                     random_batch(n, shape, rng)};
}

bool params_identical(const Graph& a, const Graph& b) {
  for (std::size_t p = 0; p < a.params.size(); ++p)
    if (std::memcmp(a.params[p].data.data(), b.params[p].data.data(),
                    a.params[p].data.size() * 4) != 0)
      return false;
  return true;
}

}  // namespace

TEST_CASE("gan_loss on a constant-half discriminator is 2 log(1/2)") {
  const Shape shape{8, 8, 1};
  DiscriminatorNet d = constant_half_disc(shape);
  Rng rng(1);
  const double got = gan_loss(d, random_batch(3, shape, rng), random_batch(3, shape, rng), 1e-7f);
  CHECK(got == Catch::Approx(-2 * kLog2).margin(1e-5));
}

TEST_CASE("gan_loss at the perfect-discriminator limit") {
  // GAP of a constant image is +-1; a huge dense weight saturates the sigmoid
  const Shape shape{8, 8, 1};
  DiscriminatorNet d = build_discriminator(tiny_arch(), shape);
  // route the pixel sign straight to the head: identity convs, no bias
  for (std::size_t p = 0; p < d.graph.params.size(); ++p)
    std::fill(d.graph.params[p].data.begin(), d.graph.params[p].data.end(), 0.f);
  // first conv: pass through channel 0
  d.graph.params[0](1, 1, 0, 0) = 1.f;
  // second conv: pass through channel 0
  d.graph.params[2](1, 1, 0, 0) = 1.f;
  // head weight on channel 0, large enough to saturate the sigmoid even
  // after two leaky-relu shrinks of the negative side (0.2^2)
  d.graph.params[4](0, 0) = 2500.f;
  const Batch real = constant_batch(2, shape, 1.f);   // leaky relu keeps +1, D -> 1
  const Batch fake = constant_batch(2, shape, -1.f);  // D -> 0.04 * -2500 -> 0
  const double got = gan_loss(d, real, fake, 1e-7f);
  CHECK(got == Catch::Approx(2 * std::log(1.0 - 1e-7)).margin(1e-9));
  CHECK(std::abs(got + 2e-7) < 1e-8);
}

TEST_CASE("gan_loss matches a per-sample loop oracle") {
  const Shape shape{8, 8, 1};
  DiscriminatorNet d = build_discriminator(tiny_arch(), shape);
  Rng rng(21);
  d.graph.init_params(rng);
  const Batch real = random_batch(5, shape, rng);
  const Batch fake = random_batch(5, shape, rng);
  const float eps = 1e-7f;
  const double got = gan_loss(d, real, fake, eps);

  double want = 0;
  for (int i = 0; i < 5; ++i) {
    Tensor img(shape);
    std::copy(real.row(i), real.row(i) + img.size(), img.data.begin());
    const double p = std::min(1.0 - double(eps), std::max(double(eps), double(infer(d, img)(0))));
    want += std::log(p) / 5;
  }
  for (int i = 0; i < 5; ++i) {
    Tensor img(shape);
    std::copy(fake.row(i), fake.row(i) + img.size(), img.data.begin());
    const double q = std::min(1.0 - double(eps), std::max(double(eps), double(infer(d, img)(0))));
    want += std::log(1.0 - q) / 5;
  }
  CHECK(got == Catch::Approx(want).margin(1e-5));
  CHECK_THROWS_AS(gan_loss(d, Batch{}, fake, eps), ValueError);
}

TEST_CASE("adversarial total is six constant terms for constant-half discriminators") {
  const Shape shape{8, 8, 1};
  Rng rng(31);
  GeneratorNet G = build_generator(tiny_arch(), shape);
  GeneratorNet F = build_generator(tiny_arch(), shape);
  G.graph.init_params(rng);
  F.graph.init_params(rng);
  DiscriminatorNet d = constant_half_disc(shape);
  TripleBatch tb = random_triple(4, shape, rng);
  AdvBreakdown adv = adversarial_loss_total(G, F, d, d, d, tb, 1e-7f);
  CHECK(adv.total == Catch::Approx(-12 * kLog2).margin(1e-4));
  double sum = 0;
  for (double t : adv.terms) sum += t;
  CHECK(adv.total == sum);  // breakdown sums exactly by construction
}

TEST_CASE("adversarial total equals six independent gan_loss calls") {
  const Shape shape{8, 8, 1};
  Rng rng(41);
  GeneratorNet G = build_generator(tiny_arch(), shape);
  GeneratorNet F = build_generator(tiny_arch(), shape);
  G.graph.init_params(rng);
  F.graph.init_params(rng);
  DiscriminatorNet DX = build_discriminator(tiny_arch(), shape);
  DiscriminatorNet DY = build_discriminator(tiny_arch(), shape);
  DiscriminatorNet DZ = build_discriminator(tiny_arch(), shape);
  DX.graph.init_params(rng);
  DY.graph.init_params(rng);
  DZ.graph.init_params(rng);
  TripleBatch tb = random_triple(3, shape, rng);

  for (Eq7LastTerm mode : {Eq7LastTerm::AsPrinted, Eq7LastTerm::FigureConsistent}) {
    AdvBreakdown adv = adversarial_loss_total(G, F, DX, DY, DZ, tb, 1e-7f, mode);
    const double t0 = gan_loss(DY, tb.y, batch_apply(G, tb.x), 1e-7f);
    const double t1 = gan_loss(DX, tb.x, batch_apply(F, tb.y), 1e-7f);
    const double t2 = gan_loss(DZ, tb.z, batch_apply(G, tb.y), 1e-7f);
    const double t3 = gan_loss(DY, tb.y, batch_apply(F, tb.z), 1e-7f);
    const double t4 = gan_loss(DX, tb.x, batch_apply(G, tb.z), 1e-7f);
    const DiscriminatorNet& dlast = mode == Eq7LastTerm::AsPrinted ? DX : DZ;
    const double t5 = gan_loss(dlast, tb.z, batch_apply(F, tb.x), 1e-7f);
    CHECK(adv.terms[0] == Catch::Approx(t0).margin(1e-6));
    CHECK(adv.terms[1] == Catch::Approx(t1).margin(1e-6));
    CHECK(adv.terms[2] == Catch::Approx(t2).margin(1e-6));
    CHECK(adv.terms[3] == Catch::Approx(t3).margin(1e-6));
    CHECK(adv.terms[4] == Catch::Approx(t4).margin(1e-6));
    CHECK(adv.terms[5] == Catch::Approx(t5).margin(1e-6));
  }
}

TEST_CASE("cycle loss vanishes for exact inverse pairs") {
  const Shape shape{4, 4, 1};
  Rng rng(51);
  TripleBatch tb = random_triple(3, shape, rng);

  SECTION("identity maps") {
    auto id = [](const Batch& b) { return b; };
    CycleBreakdown c = cycle_loss_maps(id, id, tb);
    CHECK(c.total == 0.0);
    for (double t : c.terms) CHECK(t == 0.0);
  }
  SECTION("shift and unshift") {
    const float off = 0.25f;
    auto plus = [&](const Batch& b) {
      Batch o = b;
      for (auto& v : o.flat) v += off;
      return o;
    };
    auto minus = [&](const Batch& b) {
      Batch o = b;
      for (auto& v : o.flat) v -= off;
      return o;
    };
    CycleBreakdown c = cycle_loss_maps(plus, minus, tb);
    CHECK(c.total < 1e-6);
  }
}

TEST_CASE("cycle loss matches an elementwise loop oracle") {
  const Shape shape{8, 8, 1};
  Rng rng(61);
  GeneratorNet G = build_generator(tiny_arch(), shape);
  GeneratorNet F = build_generator(tiny_arch(), shape);
  G.graph.init_params(rng);
  F.graph.init_params(rng);
  TripleBatch tb = random_triple(3, shape, rng);
  CycleBreakdown got = cycle_loss(G, F, tb);

  auto apply_one = [&](const GeneratorNet& net, const Batch& b, int i) {
    Tensor img(shape);
    std::copy(b.row(i), b.row(i) + img.size(), img.data.begin());
    return infer(net, img);
  };
  const Batch* domains[3] = {&tb.x, &tb.y, &tb.z};
  const int first_gen[6] = {0, 1, 0, 1, 0, 1};
  const int src_dom[6] = {0, 1, 1, 2, 2, 0};
  double total = 0;
  for (int h = 0; h < 6; ++h) {
    const Batch& src = *domains[src_dom[h]];
    double term = 0;
    for (int i = 0; i < src.count; ++i) {
      Tensor mid = apply_one(first_gen[h] == 0 ? G : F, src, i);
      const GeneratorNet& second = first_gen[h] == 0 ? F : G;
      Tensor back = infer(second, mid);
      double l1 = 0;
      for (long long p = 0; p < back.size(); ++p)
        l1 += std::abs(static_cast<double>(back.data[p]) - src.row(i)[p]);
      term += l1 / back.size();
    }
    term /= src.count;
    CHECK(got.terms[h] == Catch::Approx(term).margin(1e-5));
    total += term;
  }
  CHECK(got.total == Catch::Approx(total).margin(1e-5));
}

TEST_CASE("total loss is the lambda-weighted combination") {
  const Shape shape{8, 8, 1};
  Rng rng(71);
  GeneratorNet G = build_generator(tiny_arch(), shape);
  GeneratorNet F = build_generator(tiny_arch(), shape);
  G.graph.init_params(rng);
  F.graph.init_params(rng);
  DiscriminatorNet d = constant_half_disc(shape);
  TripleBatch tb = random_triple(4, shape, rng);

  const double adv = adversarial_loss_total(G, F, d, d, d, tb, 1e-7f).total;
  const double cyc = cycle_loss(G, F, tb).total;
  const double t10 = total_loss(G, F, d, d, d, tb, 10.f, 1e-7f);
  const double t20 = total_loss(G, F, d, d, d, tb, 20.f, 1e-7f);
  CHECK(t10 == Catch::Approx(adv + 10 * cyc).margin(1e-9));
  // doubling lambda moves the total by exactly lambda * cyc
  CHECK(t20 - t10 == Catch::Approx(10 * cyc).margin(1e-9));
  CHECK_THROWS_AS(total_loss(G, F, d, d, d, tb, 0.f, 1e-7f), ValueError);
}

TEST_CASE("all loss values stay finite under extreme weights") {
  const Shape shape{8, 8, 1};
  Rng rng(81);
  for (int rep = 0; rep < 10; ++rep) {
    GeneratorNet G = build_generator(tiny_arch(), shape);
    GeneratorNet F = build_generator(tiny_arch(), shape);
    DiscriminatorNet DX = build_discriminator(tiny_arch(), shape);
    DiscriminatorNet DY = build_discriminator(tiny_arch(), shape);
    DiscriminatorNet DZ = build_discriminator(tiny_arch(), shape);
    for (Graph* g : {&G.graph, &F.graph, &DX.graph, &DY.graph, &DZ.graph}) {
      g->init_params(rng);
      const float scale = std::pow(10.f, rng.uniformf(0.f, 3.f));
      for (auto& p : g->params)
        for (auto& v : p.data) v *= scale;
    }
    TripleBatch tb = random_triple(2, shape, rng);
    const double t = total_loss(G, F, DX, DY, DZ, tb, 10.f, 1e-7f);
    CHECK(std::isfinite(t));
  }
}

TEST_CASE("train_step with zero learning rate leaves parameters untouched") {
  const Shape shape{16, 16, 1};
  TrainConfig cfg;
  cfg.lr = 0.f;
  cfg.batch = 4;
  TrainState s = make_train_state(cfg, tiny_arch(), shape);
  Rng rng(91);
  TripleBatch tb = random_triple(4, shape, rng);
  TrainState before = s;
  train_step(s, tb, cfg);
  CHECK(params_identical(before.G.graph, s.G.graph));
  CHECK(params_identical(before.F.graph, s.F.graph));
  CHECK(params_identical(before.DX.graph, s.DX.graph));
  CHECK(params_identical(before.DY.graph, s.DY.graph));
  CHECK(params_identical(before.DZ.graph, s.DZ.graph));
}

TEST_CASE("train_step is bitwise deterministic") {
  const Shape shape{16, 16, 1};
  TrainConfig cfg;
  cfg.batch = 4;
  Rng rng(92);
  TripleBatch tb = random_triple(4, shape, rng);
  TrainState a = make_train_state(cfg, tiny_arch(), shape);
  TrainState b = make_train_state(cfg, tiny_arch(), shape);
  for (int step = 0; step < 3; ++step) {
    train_step(a, tb, cfg);
    train_step(b, tb, cfg);
  }
  CHECK(params_identical(a.G.graph, b.G.graph));
  CHECK(params_identical(a.DZ.graph, b.DZ.graph));
}

TEST_CASE("two hundred steps reduce cycle loss on held-out data") {
  TriDomain tri = synth_tridomain(60, 16, 7);
  TriDomain held = synth_tridomain(8, 16, 1234);
  TripleBatch held_tb;
  {
    std::vector<int> idx;
    for (int i = 0; i < 8; ++i) idx.push_back(i);
    held_tb.x = make_batch(held.X.images, idx);
    held_tb.y = make_batch(held.Y.images, idx);
    held_tb.z = make_batch(held.Z.images, idx);
  }
  TrainConfig cfg;
  cfg.batch = 6;
  cfg.seed = 3;
  TrainState s = make_train_state(cfg, tiny_arch(), {16, 16, 1});
  const double before = cycle_loss(s.G, s.F, held_tb).total;
  BatchStream stream(tri, cfg.batch, 5);
  int steps = 0;
  while (steps < 200) {
    for (const TripleBatch& tb : stream.next_epoch()) {
      train_step(s, tb, cfg);
      if (++steps >= 200) break;
    }
  }
  const double after = cycle_loss(s.G, s.F, held_tb).total;
  CHECK(after < before);
}

TEST_CASE("train runs an epoch and produces a loadable checkpoint") {
  TriDomain tri = synth_tridomain(10, 16, 17);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 5;
  cfg.seed = 9;
  TrainResult r = train(cfg, tiny_arch(), tri);
  CHECK(r.history.size() == 1);
  CHECK(r.checkpoint.epochs == 1);
  CHECK(std::isfinite(r.history[0].adv_total));
  CHECK(std::isfinite(r.history[0].cyc_total));
  double sum = 0;
  for (double t : r.history[0].cyc) sum += t;
  CHECK(r.history[0].cyc_total == Catch::Approx(sum).margin(1e-12));
}

TEST_CASE("training twice with one seed gives identical checkpoints") {
  TriDomain tri = synth_tridomain(10, 16, 18);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 5;
  cfg.seed = 4;
  TrainResult a = train(cfg, tiny_arch(), tri);
  TrainResult b = train(cfg, tiny_arch(), tri);
  CHECK(checkpoints_identical(a.checkpoint, b.checkpoint));
}
