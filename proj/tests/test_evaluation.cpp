#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "ccgn/dynamics.hpp"
#include "ccgn/evaluation.hpp"

using namespace ccgn;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("ccgn_eval_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { std::error_code ec; fs::remove_all(path, ec); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

FeatureSet make_set(const std::vector<std::vector<float>>& rows) {
  FeatureSet fs;
  fs.dim = static_cast<int>(rows[0].size());
  for (const auto& r : rows) fs.flat.insert(fs.flat.end(), r.begin(), r.end());
  return fs;
}

// Straightforward O(n^2 d + n^2) reimplementation of the manifold metric:
// full distance matrix with double accumulation in index order, full sorts,
// no early exits. precision/recall counts must match the library exactly.
struct BrutePr {
  double precision, recall;
};

double brute_dist(const float* a, const float* b, int d) {
  double acc = 0;
  for (int k = 0; k < d; ++k) {
    const double t = static_cast<double>(a[k]) - static_cast<double>(b[k]);
    acc += t * t;
  }
  return std::sqrt(acc);
}

std::vector<double> brute_radii(const FeatureSet& fs, int k) {
  const int n = fs.count();
  std::vector<double> radii(n);
  for (int i = 0; i < n; ++i) {
    std::vector<double> d;
    for (int j = 0; j < n; ++j)
      if (j != i) d.push_back(brute_dist(fs.row(i), fs.row(j), fs.dim));
    std::sort(d.begin(), d.end());
    radii[i] = d[k - 1];
  }
  return radii;
}

int brute_member(const float* q, const FeatureSet& base, const std::vector<double>& radii) {
  int hit = 0;
  for (int j = 0; j < base.count(); ++j)
    if (brute_dist(q, base.row(j), base.dim) <= radii[j]) hit = 1;
  return hit;
}

BrutePr brute_pr(const FeatureSet& real, const FeatureSet& gen, int k) {
  const std::vector<double> rr = brute_radii(real, k);
  const std::vector<double> rg = brute_radii(gen, k);
  double p = 0, r = 0;
  for (int i = 0; i < gen.count(); ++i) p += brute_member(gen.row(i), real, rr);
  for (int i = 0; i < real.count(); ++i) r += brute_member(real.row(i), gen, rg);
  return {p / gen.count(), r / real.count()};
}

FeatureSet random_set(int n, int d, Rng& rng) {
  FeatureSet fs;
  fs.dim = d;
  fs.flat.resize(static_cast<std::size_t>(n) * d);
  for (auto& v : fs.flat) v = rng.uniformf(-2.f, 2.f);
  return fs;
}

}  // namespace

TEST_CASE("pixel embedding is a row-major flatten") {
  Tensor img({2, 3, 1});
  for (int i = 0; i < 6; ++i) img.data[i] = static_cast<float>(i) / 6.f;
  FeatureSet fs = embed_pixels({img, img});
  REQUIRE(fs.dim == 6);
  REQUIRE(fs.count() == 2);
  for (int i = 0; i < 6; ++i) {
    CHECK(fs.row(0)[i] == img.data[i]);
    CHECK(fs.row(1)[i] == img.data[i]);  // identical images, identical features
  }
}

TEST_CASE("discriminator embedding returns post-pool features") {
  ArchConfig arch;
  arch.base_channels = 4;
  arch.n_resblocks = 1;
  arch.n_downsamples = 2;
  DiscriminatorNet d = build_discriminator(arch, {8, 8, 1});
  Rng rng(3);
  d.graph.init_params(rng);
  Tensor img({8, 8, 1});
  for (auto& v : img.data) v = rng.uniformf(-1, 1);
  FeatureSet fs = embed_disc_feature(d, {img, img});
  CHECK(fs.dim == 8);  // channels after the last downsample
  for (int i = 0; i < fs.dim; ++i) CHECK(fs.row(0)[i] == fs.row(1)[i]);
}

TEST_CASE("feature csv io") {
  TempDir tmp;
  SECTION("roundtrip") {
    FeatureSet fs = make_set({{1.f, 2.f}, {3.f, 4.5f}});
    save_features_csv(tmp.file("f.csv"), fs);
    FeatureSet back = load_features_csv(tmp.file("f.csv"));
    REQUIRE(back.dim == 2);
    REQUIRE(back.count() == 2);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) CHECK(back.row(i)[j] == fs.row(i)[j]);
  }
  SECTION("ragged rows are rejected") {
    std::ofstream out(tmp.file("bad.csv"));
    out << "1,2,3\n4,5\n";
    out.close();
    CHECK_THROWS_AS(load_features_csv(tmp.file("bad.csv")), FormatError);
  }
}

TEST_CASE("knn radii on a line") {
  FeatureSet fs = make_set({{0.f}, {1.f}, {3.f}});
  ManifoldEstimate m1 = knn_radii(fs, 1);
  CHECK(m1.radii[0] == Catch::Approx(1.0));
  CHECK(m1.radii[1] == Catch::Approx(1.0));
  CHECK(m1.radii[2] == Catch::Approx(2.0));
  ManifoldEstimate m2 = knn_radii(fs, 2);  // k = n-1: farthest other point
  CHECK(m2.radii[0] == Catch::Approx(3.0));
  CHECK(m2.radii[1] == Catch::Approx(2.0));
  CHECK(m2.radii[2] == Catch::Approx(3.0));
  CHECK_THROWS_AS(knn_radii(fs, 0), ValueError);
  CHECK_THROWS_AS(knn_radii(fs, 3), ValueError);

  FeatureSet dup = make_set({{1.f}, {1.f}, {5.f}});
  ManifoldEstimate md = knn_radii(dup, 1);
  CHECK(md.radii[0] == 0.0);
  CHECK(md.radii[1] == 0.0);
}

TEST_CASE("in_manifold membership") {
  FeatureSet base = make_set({{0.f}, {1.f}});
  ManifoldEstimate m = knn_radii(base, 1);  // radii 1,1
  const float phi_member = 0.f;
  const float phi_in = 0.4f;
  const float phi_out = 3.f;
  CHECK(in_manifold(&phi_member, 1, m) == 1);
  CHECK(in_manifold(&phi_in, 1, m) == 1);
  CHECK(in_manifold(&phi_out, 1, m) == 0);
}

TEST_CASE("precision and recall basics") {
  SECTION("a set against itself is perfect") {
    Rng rng(5);
    FeatureSet fs = random_set(12, 3, rng);
    for (int k = 1; k <= 4; ++k) {
      PRResult pr = compute_pr(fs, fs, k);
      CHECK(pr.precision == 1.0);
      CHECK(pr.recall == 1.0);
    }
  }
  SECTION("worked 1-d example") {
    FeatureSet real = make_set({{0.f}, {1.f}});
    FeatureSet gen = make_set({{0.4f}, {3.f}});
    PRResult pr = compute_pr(real, gen, 1);
    CHECK(pr.precision == 0.5);
    CHECK(pr.recall == 1.0);
  }
  SECTION("far clusters see nothing of each other") {
    Rng rng(6);
    FeatureSet a = random_set(8, 2, rng);
    FeatureSet b = random_set(8, 2, rng);
    for (auto& v : b.flat) v += 1000.f;
    PRResult pr = compute_pr(a, b, 1);
    CHECK(pr.precision == 0.0);
    CHECK(pr.recall == 0.0);
  }
  SECTION("count mismatch is rejected") {
    Rng rng(7);
    FeatureSet a = random_set(8, 2, rng);
    FeatureSet b = random_set(9, 2, rng);
    CHECK_THROWS_AS(compute_pr(a, b, 1), ValueError);
  }
}

TEST_CASE("library matches the brute-force oracle exactly") {
  Rng rng(42);
  for (int rep = 0; rep < 50; ++rep) {
    const int n = 4 + rng.uniform_int(61);   // up to 64
    const int d = 1 + rng.uniform_int(8);    // up to 8
    const int k = 1 + rng.uniform_int(std::min(10, n - 1));
    FeatureSet real = random_set(n, d, rng);
    FeatureSet gen = random_set(n, d, rng);
    // shift some generated sets toward the real cloud for variety
    if (rep % 3 == 0)
      for (auto& v : gen.flat) v *= 0.4f;

    PRResult got = compute_pr(real, gen, k);
    BrutePr want = brute_pr(real, gen, k);
    CHECK(got.precision == want.precision);
    CHECK(got.recall == want.recall);

    // swap duality
    PRResult swapped = compute_pr(gen, real, k);
    CHECK(swapped.precision == got.recall);
    CHECK(swapped.recall == got.precision);

    // identity
    PRResult self = compute_pr(real, real, k);
    CHECK(self.precision == 1.0);
    CHECK(self.recall == 1.0);
  }
}

TEST_CASE("both metrics are non-decreasing in k") {
  Rng rng(11);
  for (int rep = 0; rep < 6; ++rep) {
    const int n = 16 + rng.uniform_int(17);
    FeatureSet real = random_set(n, 4, rng);
    FeatureSet gen = random_set(n, 4, rng);
    std::vector<PRResult> table = pr_vs_k(real, gen, 1, std::min(10, n - 1));
    for (std::size_t i = 1; i < table.size(); ++i) {
      CHECK(table[i].precision >= table[i - 1].precision);
      CHECK(table[i].recall >= table[i - 1].recall);
    }
  }
}

TEST_CASE("metrics are invariant under a common isometry") {
  Rng rng(13);
  const int n = 24, d = 4;
  FeatureSet real = random_set(n, d, rng);
  FeatureSet gen = random_set(n, d, rng);
  PRResult base = compute_pr(real, gen, 3);

  // random rotation from QR of a random matrix, plus a translation
  std::vector<double> R(d * d);
  for (auto& v : R) v = rng.uniform() - 0.5;
  std::vector<double> r(d);
  detail::mgs_orthonormalize(R.data(), d, d, r.data(), 0);
  const float shift[4] = {3.f, -1.f, 0.5f, 2.f};
  auto apply = [&](FeatureSet fs) {
    FeatureSet out = fs;
    for (int i = 0; i < fs.count(); ++i)
      for (int a = 0; a < d; ++a) {
        double acc = 0;
        for (int b = 0; b < d; ++b) acc += R[a * d + b] * fs.row(i)[b];
        out.flat[static_cast<std::size_t>(i) * d + a] = static_cast<float>(acc) + shift[a];
      }
    return out;
  };
  PRResult moved = compute_pr(apply(real), apply(gen), 3);
  CHECK(moved.precision == base.precision);
  CHECK(moved.recall == base.recall);
}

TEST_CASE("pr_vs_step starts at exactly one and respects the identity map") {
  TriDomain tri = synth_tridomain(12, 16, 3);
  std::vector<Tensor> test_set = tri.X.images;
  test_set.insert(test_set.end(), tri.Y.images.begin(), tri.Y.images.end());

  ArchConfig arch;
  arch.base_channels = 4;
  arch.n_resblocks = 1;
  arch.n_downsamples = 2;
  GeneratorNet gen = build_generator(arch, {16, 16, 1});
  Rng rng(9);
  gen.graph.init_params(rng);

  std::vector<PRResult> rows = pr_vs_step(test_set, gen, 3, 2);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].precision == 1.0);
  CHECK(rows[0].recall == 1.0);
}

TEST_CASE("category probe separates the shape families") {
  TriDomain tri = synth_tridomain(200, 16, 21);
  CategoryProbe probe = train_probe(tri, 77);
  CHECK(probe.holdout_accuracy >= 0.9);
  CHECK(probe.train_accuracy >= 0.95);

  // classifying a training image recovers its own domain almost always
  int hit = 0, total = 0;
  const LabeledImages* domains[3] = {&tri.X, &tri.Y, &tri.Z};
  for (int d = 0; d < 3; ++d)
    for (int i = 0; i < 40; ++i) {
      hit += classify(probe, domains[d]->images[i]) == d;
      ++total;
    }
  CHECK(static_cast<double>(hit) / total >= 0.95);

  // a noise image gets some label without error
  Rng rng(5);
  Tensor noise({16, 16, 1});
  for (auto& v : noise.data) v = rng.uniformf(-1, 1);
  const int label = classify(probe, noise);
  CHECK(label >= 0);
  CHECK(label <= 2);
}

TEST_CASE("pca projection") {
  SECTION("points on a plane embedded in ten dimensions") {
    Rng rng(31);
    const int n = 40, d = 10;
    // span two fixed directions
    std::vector<float> u(d), v(d);
    for (int j = 0; j < d; ++j) { u[j] = rng.uniformf(-1, 1); v[j] = rng.uniformf(-1, 1); }
    FeatureSet fs;
    fs.dim = d;
    for (int i = 0; i < n; ++i) {
      const float a = rng.uniformf(-2, 2), b = rng.uniformf(-2, 2);
      for (int j = 0; j < d; ++j) fs.flat.push_back(a * u[j] + b * v[j] + 0.5f);
    }
    PcaResult pca = pca_project(fs, 2);
    CHECK(pca.explained_ratio[0] + pca.explained_ratio[1] == Catch::Approx(1.0).margin(1e-5));
    CHECK_FALSE(pca.rank_warning);
  }
  SECTION("duplicated single point has zero variance and warns") {
    FeatureSet fs = make_set({{1.f, 2.f, 3.f}, {1.f, 2.f, 3.f}, {1.f, 2.f, 3.f}});
    PcaResult pca = pca_project(fs, 2);
    CHECK(pca.rank_warning);
    CHECK(pca.effective_rank == 0);
    for (double v : pca.projected) CHECK(v == 0.0);
  }
  SECTION("sign convention pins the largest component positive") {
    Rng rng(33);
    FeatureSet fs = random_set(30, 5, rng);
    PcaResult pca = pca_project(fs, 2);
    for (int r = 0; r < 2; ++r) {
      const double* comp = pca.components.data() + r * 5;
      int big = 0;
      for (int j = 1; j < 5; ++j)
        if (std::abs(comp[j]) > std::abs(comp[big])) big = j;
      CHECK(comp[big] > 0);
    }
  }
}

namespace {

// Test-side SVD oracle: eigen-decomposition of the n x n Gram matrix of the
// centered data (the dual route to the library's d x d covariance).
std::vector<double> gram_rank2_projection(const FeatureSet& fs) {
  const int n = fs.count(), d = fs.dim;
  std::vector<double> mean(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) mean[j] += fs.row(i)[j];
  for (double& m : mean) m /= n;
  std::vector<double> Xc(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) Xc[static_cast<std::size_t>(i) * d + j] = fs.row(i)[j] - mean[j];
  std::vector<double> G(static_cast<std::size_t>(n) * n, 0.0);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      double acc = 0;
      for (int j = 0; j < d; ++j)
        acc += Xc[static_cast<std::size_t>(a) * d + j] * Xc[static_cast<std::size_t>(b) * d + j];
      G[static_cast<std::size_t>(a) * n + b] = acc;
    }
  std::vector<double> eigvals, eigvecs;
  ccgn::detail::jacobi_eigh(G, n, eigvals, eigvecs);
  // scores = sqrt(lambda_r) * v_r per point
  std::vector<double> proj(static_cast<std::size_t>(n) * 2);
  for (int r = 0; r < 2; ++r) {
    const double s = std::sqrt(std::max(eigvals[r], 0.0));
    for (int i = 0; i < n; ++i)
      proj[static_cast<std::size_t>(i) * 2 + r] = s * eigvecs[static_cast<std::size_t>(r) * n + i];
  }
  return proj;
}

}  // namespace

TEST_CASE("pca agrees with a gram-matrix svd oracle on pairwise distances") {
  Rng rng(37);
  const int n = 30, d = 7;
  FeatureSet fs = random_set(n, d, rng);
  PcaResult pca = pca_project(fs, 2);
  std::vector<double> oracle = gram_rank2_projection(fs);
  // coordinates differ by an orthogonal transform; pairwise distances match
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      auto dist = [](const std::vector<double>& p, int i, int j) {
        const double dx = p[i * 2] - p[j * 2];
        const double dy = p[i * 2 + 1] - p[j * 2 + 1];
        return std::sqrt(dx * dx + dy * dy);
      };
      CHECK(dist(pca.projected, a, b) == Catch::Approx(dist(oracle, a, b)).margin(1e-4));
    }
}
