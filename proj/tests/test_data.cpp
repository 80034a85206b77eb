#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>

#include "esf/data.hpp"
#include "esf/error.hpp"
#include "helpers.hpp"

using namespace esf;
namespace fs = std::filesystem;

namespace {

// Direct DFT magnitude of one bin.
double dft_mag(const GrayImage& img, long u, long v) {
  std::complex<double> acc{};
  const double w = double(img.width), h = double(img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double a = -2 * std::numbers::pi * (double(u) * double(y) / h + double(v) * double(x) / w);
      acc += double(img.at(x, y)) * std::polar(1.0, a);
    }
  return std::abs(acc);
}

double ring_median(const GrayImage& img, long u, long v) {
  std::vector<double> ring;
  for (long du = -1; du <= 1; ++du)
    for (long dv = -1; dv <= 1; ++dv)
      if (du || dv) ring.push_back(dft_mag(img, u + du, v + dv));
  std::sort(ring.begin(), ring.end());
  return 0.5 * (ring[3] + ring[4]);
}

// Grid bins for period 4: quarter of the sampling rate on each axis.
std::vector<std::pair<long, long>> grid(std::size_t size) {
  const long f = long(size / 4);
  return {{0, f}, {f, 0}, {f, f}};
}

double grid_energy(const GrayImage& img) {
  double e = 0;
  for (auto [u, v] : grid(img.width)) e += std::pow(dft_mag(img, u, v), 2);
  return e;
}

double pixel_std(const GrayImage& a, const GrayImage& b) {
  double s = 0, s2 = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = double(a.pixels[i]) - double(b.pixels[i]);
    s += d;
    s2 += d * d;
  }
  const double n = double(a.pixels.size());
  return std::sqrt(s2 / n - (s / n) * (s / n));
}

}  // namespace

TEST(ToyData, FakeHasGridPeaks) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 5; ++i) {
    const auto img = toy_fake_image(64, rng);
    for (auto [u, v] : grid(64)) EXPECT_GE(dft_mag(img, u, v), 5 * ring_median(img, u, v));
  }
}

TEST(ToyData, RealHasNoGridPeaks) {
  std::mt19937_64 rng(4);
  const std::size_t n = 40;
  for (auto [u, v] : grid(64)) {
    std::mt19937_64 local = rng;
    std::size_t clean = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto img = toy_real_image(64, local);
      clean += dft_mag(img, u, v) <= 3 * ring_median(img, u, v);
    }
    EXPECT_GE(double(clean) / double(n), 0.95) << "bin " << u << "," << v;
  }
}

TEST(ToyData, GridEnergySeparatesClasses) {
  std::mt19937_64 rng(5);
  std::vector<double> real, fake;
  for (int i = 0; i < 20; ++i) {
    real.push_back(grid_energy(toy_real_image(32, rng)));
    fake.push_back(grid_energy(toy_fake_image(32, rng)));
  }
  // threshold halfway between class medians in log space
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const double t = std::sqrt(median(real) * median(fake));
  std::size_t correct = 0;
  for (double e : real) correct += e < t;
  for (double e : fake) correct += e >= t;
  EXPECT_GE(double(correct) / 40.0, 0.9);
}

TEST(ToyData, RealImagesAreSmoothAndMidGray) {
  std::mt19937_64 rng(6);
  const auto img = toy_real_image(64, rng);
  double mean = 0;
  for (auto p : img.pixels) mean += p;
  mean /= double(img.pixels.size());
  EXPECT_NEAR(mean, 127.5, 30.0);
  EXPECT_GT(*std::max_element(img.pixels.begin(), img.pixels.end()), 140);
}

TEST(ToyData, GenerationIsDeterministic) {
  const auto a = fixtures::scratch_dir("toy_a");
  const auto b = fixtures::scratch_dir("toy_b");
  const auto ma = gen_toy_dataset(3, 32, 11, a);
  gen_toy_dataset(3, 32, 11, b);
  ASSERT_EQ(ma.subsets.size(), 1u);
  EXPECT_EQ(ma.subsets[0].n_real, 3u);
  EXPECT_EQ(ma.subsets[0].n_fake, 3u);
  const auto files = list_images(a / "toy" / "fake");
  ASSERT_EQ(files.size(), 3u);
  for (const auto& f : files) EXPECT_EQ(load_image(f), load_image(b / "toy" / "fake" / f.filename()));
  EXPECT_TRUE(fs::exists(a / "manifest.json"));
}

TEST(ToyData, RejectsBadSize) {
  const auto dir = fixtures::scratch_dir("toy_bad");
  EXPECT_THROW(gen_toy_dataset(2, 48, 1, dir), std::invalid_argument);
  EXPECT_THROW(gen_toy_dataset(2, 16, 1, dir), std::invalid_argument);
  EXPECT_THROW(gen_toy_dataset(0, 32, 1, dir), std::invalid_argument);
}

TEST(Dataset, ScanAndLoadLabels) {
  const auto root = fixtures::scratch_dir("scan");
  gen_toy_dataset(2, 32, 1, root);
  const auto m = scan_dataset(root);
  ASSERT_EQ(m.subsets.size(), 1u);
  EXPECT_EQ(m.subsets[0].name, "toy");
  const auto items = load_all(m);
  ASSERT_EQ(items.size(), 4u);
  EXPECT_EQ(items[0].label, 0);
  EXPECT_EQ(items[3].label, 1);
  EXPECT_EQ(DatasetManifest::from_json(m.to_json(), root), m);
}

TEST(Dataset, CorruptImageIsFormatError) {
  const auto root = fixtures::scratch_dir("corrupt");
  gen_toy_dataset(1, 32, 1, root);
  std::ofstream(root / "toy" / "real" / "zzz.pgm") << "P5\n9 9\n255\nab";
  EXPECT_THROW(load_all(scan_dataset(root)), FormatError);
}

TEST(Dataset, MissingRootIsIoError) {
  EXPECT_THROW(scan_dataset(fixtures::scratch_dir("empty") / "nope"), IoError);
}

TEST(Perturb, KindNames) {
  for (auto k : {PerturbKind::blur, PerturbKind::crop, PerturbKind::jpeg, PerturbKind::noise,
                 PerturbKind::all})
    EXPECT_EQ(parse_perturb_kind(perturb_kind_name(k)), k);
  EXPECT_THROW(parse_perturb_kind("sharpen"), ContractError);
}

TEST(Perturb, BlurSigmaRule) {
  EXPECT_DOUBLE_EQ(blur_sigma_for_kernel(3), 0.8);
  EXPECT_DOUBLE_EQ(blur_sigma_for_kernel(9), 0.3 * 3 + 0.8);
}

TEST(Perturb, BlurOfConstantIsConstant) {
  const GrayImage img(20, 12, 93);
  for (std::size_t k : {3, 5, 7, 9})
    EXPECT_EQ(gaussian_blur(img, blur_sigma_for_kernel(k), k), img);
}

TEST(Perturb, BlurKeepsMean) {
  const auto img = fixtures::random_image(32, 32, 60);
  const auto out = gaussian_blur(img, 1.4, 7);
  double a = 0, b = 0;
  for (std::size_t i = 0; i < img.pixels.size(); ++i) a += img.pixels[i], b += out.pixels[i];
  EXPECT_NEAR(a / 1024, b / 1024, 1.0);
}

TEST(Perturb, ZeroCropIsIdentity) {
  const auto img = fixtures::random_image(24, 16, 61);
  const auto out = crop_resize(img, 0.0, 0.3, 0.7);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    EXPECT_LE(std::abs(int(img.pixels[i]) - int(out.pixels[i])), 1);
}

TEST(Perturb, NoiseStatistics) {
  const GrayImage img(256, 256, 128);
  std::mt19937_64 rng(62);
  const auto out = add_gaussian_noise(img, 20.0, rng);
  const double s = pixel_std(img, out);
  EXPECT_GE(s, 3.5);
  EXPECT_LE(s, 5.5);
}

TEST(Perturb, PreservesDimensionsAndIsDeterministic) {
  const auto img = fixtures::random_image(40, 24, 63);
  for (auto k : {PerturbKind::blur, PerturbKind::crop, PerturbKind::jpeg, PerturbKind::noise,
                 PerturbKind::all}) {
    std::mt19937_64 r1(5), r2(5);
    const auto a = perturb(img, k, r1);
    EXPECT_EQ(a.width, 40u);
    EXPECT_EQ(a.height, 24u);
    EXPECT_EQ(a, perturb(img, k, r2));
  }
}

TEST(Perturb, DatasetMirrorsLayout) {
  const auto src = fixtures::scratch_dir("perturb_src");
  const auto dst = fixtures::scratch_dir("perturb_dst");
  const auto m = gen_toy_dataset(2, 32, 9, src);
  const auto out = perturb_dataset(m, PerturbKind::noise, 4, dst);
  ASSERT_EQ(out.subsets.size(), 1u);
  EXPECT_EQ(out.subsets[0].n_real, 2u);
  const auto again = fixtures::scratch_dir("perturb_dst2");
  perturb_dataset(m, PerturbKind::noise, 4, again);
  for (const auto& f : list_images(dst / "toy" / "fake"))
    EXPECT_EQ(load_image(f), load_image(again / "toy" / "fake" / f.filename()));
}

TEST(Perturb, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(7, 0), derive_seed(7, 1));
  EXPECT_NE(derive_seed(7, 0), derive_seed(8, 0));
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
}
