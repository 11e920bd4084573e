#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "ccgn/data.hpp"

using namespace ccgn;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("ccgn_data_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { std::error_code ec; fs::remove_all(path, ec); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void put_be32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<char*>(b), 4);
}

// Test fixture writer, independent of write_idx.
void write_fixture(const std::string& img_path, const std::string& lab_path,
                   const std::vector<std::vector<unsigned char>>& images,
                   const std::vector<unsigned char>& labels, int rows, int cols,
                   std::uint32_t img_magic = kIdxImageMagic,
                   std::uint32_t lab_magic = kIdxLabelMagic, bool truncate_last = false) {
  std::ofstream img(img_path, std::ios::binary);
  put_be32(img, img_magic);
  put_be32(img, static_cast<std::uint32_t>(images.size()));
  put_be32(img, rows);
  put_be32(img, cols);
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::size_t n = images[i].size();
    if (truncate_last && i + 1 == images.size()) n /= 2;
    img.write(reinterpret_cast<const char*>(images[i].data()), static_cast<std::streamsize>(n));
  }
  std::ofstream lab(lab_path, std::ios::binary);
  put_be32(lab, lab_magic);
  put_be32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

}  // namespace

TEST_CASE("load_idx reads a hand-built two-image pair") {
  TempDir tmp;
  // pixel placement: image 0 row-major 0..3, image 1 reversed
  write_fixture(tmp.file("i"), tmp.file("l"), {{0, 85, 170, 255}, {255, 170, 85, 0}}, {3, 7}, 2, 2);
  LabeledImages got = load_idx(tmp.file("i"), tmp.file("l"));
  REQUIRE(got.count() == 2);
  REQUIRE(got.images[0].shape == Shape{2, 2, 1});
  CHECK(got.labels[0] == 3);
  CHECK(got.labels[1] == 7);
  CHECK(got.images[0](0, 0, 0) == -1.0f);
  CHECK(got.images[0](0, 1, 0) == Catch::Approx(85 / 127.5 - 1).margin(1e-6));
  CHECK(got.images[0](1, 0, 0) == Catch::Approx(170 / 127.5 - 1).margin(1e-6));
  CHECK(got.images[0](1, 1, 0) == 1.0f);
  CHECK(got.images[1](0, 0, 0) == 1.0f);
  CHECK(got.images[1](1, 1, 0) == -1.0f);
}

TEST_CASE("load_idx rejects malformed files") {
  TempDir tmp;
  SECTION("images file with the label magic") {
    write_fixture(tmp.file("i"), tmp.file("l"), {{0, 0, 0, 0}}, {1}, 2, 2,
                  /*img_magic=*/kIdxLabelMagic);
    CHECK_THROWS_AS(load_idx(tmp.file("i"), tmp.file("l")), FormatError);
  }
  SECTION("count mismatch between images and labels") {
    write_fixture(tmp.file("i"), tmp.file("l"), {{0, 0, 0, 0}, {0, 0, 0, 0}}, {1}, 2, 2);
    CHECK_THROWS_AS(load_idx(tmp.file("i"), tmp.file("l")), ConsistencyError);
  }
  SECTION("truncated image data") {
    write_fixture(tmp.file("i"), tmp.file("l"), {{0, 0, 0, 0}, {0, 0, 0, 0}}, {1, 2}, 2, 2,
                  kIdxImageMagic, kIdxLabelMagic, /*truncate_last=*/true);
    CHECK_THROWS_AS(load_idx(tmp.file("i"), tmp.file("l")), LengthError);
  }
  SECTION("missing file") { CHECK_THROWS_AS(load_idx(tmp.file("nope"), tmp.file("l")), FormatError); }
}

TEST_CASE("idx roundtrip is the identity on byte values") {
  TempDir tmp;
  Rng rng(5);
  LabeledImages data;
  data.split = "train";
  for (int i = 0; i < 7; ++i) {
    Tensor t({9, 9, 1});
    for (auto& v : t.data) v = pixel_from_byte(static_cast<unsigned char>(rng.uniform_int(256)));
    data.images.push_back(std::move(t));
    data.labels.push_back(rng.uniform_int(3));
  }
  write_idx(data, tmp.file("i"), tmp.file("l"));
  LabeledImages back = load_idx(tmp.file("i"), tmp.file("l"));
  REQUIRE(back.count() == data.count());
  for (int i = 0; i < data.count(); ++i) {
    CHECK(back.labels[i] == data.labels[i]);
    for (std::size_t p = 0; p < data.images[i].data.size(); ++p)
      CHECK(back.images[i].data[p] == data.images[i].data[p]);
  }
}

TEST_CASE("select_tridomain partitions by label") {
  LabeledImages data;
  data.split = "train";
  for (int i = 0; i < 12; ++i) {
    data.images.push_back(Tensor::full({2, 2, 1}, static_cast<float>(i) / 12.f));
    data.labels.push_back(i % 4);
  }
  TriDomain tri = select_tridomain(data, {0, 1, 2});
  CHECK(tri.X.count() == 3);
  CHECK(tri.Y.count() == 3);
  CHECK(tri.Z.count() == 3);
  // order preserving and disjoint: X holds exactly the label-0 images
  CHECK(tri.X.images[0](0, 0, 0) == 0.f);
  CHECK(tri.X.images[1](0, 0, 0) == Catch::Approx(4 / 12.f));
  CHECK(tri.X.count() + tri.Y.count() + tri.Z.count() == 9);

  CHECK_THROWS_AS(select_tridomain(data, {0, 0, 1}), ValueError);
  try {
    select_tridomain(data, {0, 1, 9});
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("available labels: 0,1,2,3") != std::string::npos);
  }
}

TEST_CASE("synth_shapes determinism and pixel range") {
  Rng a(7), b(7);
  LabeledImages x = synth_shapes(ShapeKind::Disk, 1, 16, a);
  LabeledImages y = synth_shapes(ShapeKind::Disk, 1, 16, b);
  REQUIRE(x.count() == 1);
  for (std::size_t i = 0; i < x.images[0].data.size(); ++i)
    CHECK(x.images[0].data[i] == y.images[0].data[i]);

  Rng r(3);
  for (ShapeKind k : {ShapeKind::Disk, ShapeKind::Cross, ShapeKind::Stripes}) {
    LabeledImages s = synth_shapes(k, 20, 16, r);
    for (const Tensor& t : s.images)
      for (float v : t.data) {
        CHECK(v >= -1.f);
        CHECK(v <= 1.f);
      }
  }
}

TEST_CASE("synth disks light the central pixel") {
  Rng rng(1);
  LabeledImages disks = synth_shapes(ShapeKind::Disk, 1000, 16, rng);
  int lit = 0;
  for (const Tensor& t : disks.images)
    if (t(8, 8, 0) > 0.f) ++lit;
  CHECK(lit >= 950);
}

TEST_CASE("synth_shapes edge cases") {
  Rng rng(2);
  LabeledImages empty = synth_shapes(ShapeKind::Cross, 0, 16, rng);
  CHECK(empty.count() == 0);
  CHECK_THROWS_AS(synth_shapes(ShapeKind::Disk, 1, 7, rng), ValueError);
}

TEST_CASE("batch stream truncates to the shortest domain") {
  auto make = [](int n) {
    LabeledImages li;
    for (int i = 0; i < n; ++i) {
      li.images.push_back(Tensor::full({2, 2, 1}, static_cast<float>(i) / 16.f));
      li.labels.push_back(0);
    }
    return li;
  };
  TriDomain tri{make(10), make(10), make(10)};
  BatchStream s(tri, 5, 1);
  CHECK(s.next_epoch().size() == 2);

  TriDomain uneven{make(10), make(7), make(10)};
  BatchStream s2(uneven, 5, 1);
  CHECK(s2.next_epoch().size() == 1);

  CHECK_THROWS_AS(BatchStream(tri, 0, 1), ValueError);
  CHECK_THROWS_AS(BatchStream(uneven, 8, 1), ValueError);
}

TEST_CASE("batch stream is deterministic under the seed") {
  TriDomain tri = synth_tridomain(12, 16, 99);
  BatchStream a(tri, 4, 1234), b(tri, 4, 1234);
  for (int e = 0; e < 2; ++e) {
    auto ea = a.next_epoch(), eb = b.next_epoch();
    REQUIRE(ea.size() == eb.size());
    for (std::size_t i = 0; i < ea.size(); ++i) CHECK(ea[i].x.flat == eb[i].x.flat);
  }
}
