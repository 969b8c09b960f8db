#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "loda/data.hpp"

using namespace loda;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / "loda_test_data" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

data::Source csv_source(const fs::path& p) {
  data::Source s;
  s.format = data::Format::Csv;
  s.path = p.string();
  s.image_shape = {1, 2, 2};
  s.num_classes = 3;
  return s;
}

}  // namespace

TEST(DataCsv, ManifestEchoAndByteNormalization) {
  auto d = scratch("csv");
  write_text(d / "x.csv", "0,0,255,10,20\n1,1,2,3,4\n2,5,6,7,8\n0,9,9,9,9\n");
  data::Manifest m;
  m.seed = 1;
  m.splits = {{"private-train", {0, 1}}, {"private-eval", {2}}, {"public-pool", {3}}, {"test", {}}};
  auto split = data::load_dataset(csv_source(d / "x.csv"), m);
  EXPECT_EQ(split.private_train.size(), 2u);
  EXPECT_EQ(split.private_eval.size(), 1u);
  EXPECT_EQ(split.public_pool.size(), 1u);
  EXPECT_EQ(split.test.size(), 0u);
  EXPECT_EQ(split.private_train[0].image.pixels()[1], 1.0);
  EXPECT_EQ(split.private_train[0].image.pixels()[0], 0.0);
  EXPECT_EQ(split.private_eval[0].label.argmax(), 2u);
}

TEST(DataCsv, RealModeAndRejection) {
  auto d = scratch("csv_real");
  write_text(d / "ok.csv", "0,0.5,1,0,0.25\n");
  auto s = data::load_samples(csv_source(d / "ok.csv"));
  EXPECT_EQ(s[0].image.pixels().values(), (std::vector<double>{0.5, 1.0, 0.0, 0.25}));
  write_text(d / "out.csv", "0,0.5,1.5,0,0.25\n");
  EXPECT_THROW(data::load_samples(csv_source(d / "out.csv")), ParseError);
  write_text(d / "byte.csv", "0,0,256,0,0\n");
  EXPECT_THROW(data::load_samples(csv_source(d / "byte.csv")), ParseError);
  write_text(d / "label.csv", "3,0,0,0,0\n");
  EXPECT_THROW(data::load_samples(csv_source(d / "label.csv")), ParseError);
  write_text(d / "short.csv", "0,0,0\n");
  EXPECT_THROW(data::load_samples(csv_source(d / "short.csv")), ParseError);
}

TEST(DataManifest, OverlapIsRejected) {
  data::Manifest m;
  m.splits = {{"private-train", {0, 1}}, {"public-pool", {1}}};
  EXPECT_THROW(data::validate_manifest(m, 4), ParseError);
  m.splits = {{"private-train", {7}}};
  EXPECT_THROW(data::validate_manifest(m, 4), ParseError);
}

TEST(DataManifest, PureFunctionOfLabelsAndSeed) {
  const auto samples = data::synthetic_shapes({.count = 200, .seed = 3});
  const auto labels = data::hard_labels(samples);
  data::SplitSizes sizes{50, 20, 60, 30};
  const auto a = data::make_manifest(labels, sizes, 42, 0.7);
  const auto b = data::make_manifest(labels, sizes, 42, 0.7);
  EXPECT_EQ(data::manifest_to_json(a), data::manifest_to_json(b));
  EXPECT_NE(data::manifest_to_json(a), data::manifest_to_json(data::make_manifest(labels, sizes, 43, 0.7)));
  EXPECT_NO_THROW(data::validate_manifest(a, samples.size()));
  EXPECT_EQ(a.splits.at("private-train").size(), 50u);
  EXPECT_EQ(a.splits.at("public-pool").size(), 60u);
  auto back = data::manifest_from_json(data::manifest_to_json(a));
  EXPECT_EQ(back.splits, a.splits);
}

TEST(DataManifest, PublicPoolIsClassSkewed) {
  const auto samples = data::synthetic_shapes({.count = 1000, .seed = 3});
  const auto labels = data::hard_labels(samples);
  const auto m = data::make_manifest(labels, {100, 0, 300, 0}, 5, 0.7);
  std::vector<int> count(10, 0);
  for (auto id : m.splits.at("public-pool")) ++count[labels[id]];
  EXPECT_GT(count[0], count[9]);
}

TEST(DataIdx, RoundTripAndBadMagic) {
  auto d = scratch("idx");
  auto samples = data::synthetic_shapes({.count = 5, .height = 8, .width = 8, .seed = 1});
  data::write_idx((d / "img.idx").string(), (d / "lbl.idx").string(), samples);
  data::Source src{data::Format::Idx, (d / "img.idx").string(), (d / "lbl.idx").string(), {1, 8, 8}, 10};
  auto back = data::load_samples(src);
  ASSERT_EQ(back.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(back[i].image, samples[i].image);
    EXPECT_EQ(back[i].label, samples[i].label);
  }
  auto bytes = read_file(src.path);
  bytes[2] = 0x0d;  // float type code, unsupported
  write_file(src.path, bytes);
  try {
    data::load_samples(src);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos) << e.what();
  }
}

TEST(DataIdx, TruncatedPayloadNamesOffset) {
  auto d = scratch("idx_trunc");
  auto samples = data::synthetic_shapes({.count = 2, .height = 4, .width = 4, .seed = 1});
  data::write_idx((d / "img.idx").string(), (d / "lbl.idx").string(), samples);
  auto bytes = read_file((d / "img.idx").string());
  write_file((d / "img.idx").string(), bytes.substr(0, bytes.size() - 3));
  data::Source src{data::Format::Idx, (d / "img.idx").string(), (d / "lbl.idx").string(), {}, 10};
  try {
    data::load_samples(src);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 16"), std::string::npos) << e.what();
  }
}

TEST(DataPng, ConstantHalfQuantizesTo128) {
  auto d = scratch("png");
  const auto path = (d / "half.png").string();
  data::save_image_grid({Image::filled(1, 3, 3, 0.5)}, path);
  auto back = data::load_png(path);
  for (double v : back.pixels().data()) EXPECT_EQ(v, 128.0 / 255.0);
}

TEST(DataPng, ReloadWithinOneQuantum) {
  auto d = scratch("png_rt");
  Rng rng(9);
  Tensor t({3, 5, 7});
  for (auto& v : t.data()) v = rng.uniform();
  const Image img(t);
  data::save_image_grid({img}, (d / "rgb.png").string());
  auto back = data::load_png((d / "rgb.png").string());
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_LE(std::fabs(back.pixels()[i] - t[i]), 0.5 / 255.0 + 1e-12);
}

TEST(DataPng, GridLayoutAndErrors) {
  for (std::size_t n : {1u, 2u, 4u, 5u, 9u, 10u, 17u}) {
    const auto l = data::grid_layout(n);
    EXPECT_EQ(l.cols, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))))) << n;
    EXPECT_GE(l.cols * l.rows, n);
  }
  auto d = scratch("grid");
  std::vector<Image> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(Image::filled(1, 4, 6, i / 4.0));
  data::save_image_grid(imgs, (d / "g.png").string());
  auto g = data::load_png((d / "g.png").string());
  EXPECT_EQ(g.width(), 3u * 6);
  EXPECT_EQ(g.height(), 2u * 4);
  EXPECT_EQ(g.pixels()[4 * 18 + 6], 1.0);  // tile 4: row 1, col 1
  EXPECT_THROW(data::save_image_grid({}, (d / "e.png").string()), DomainError);
  EXPECT_THROW(data::save_image_grid(imgs, (d / "missing" / "g.png").string()), IoError);
  Tensor neg({1, 1, 2}, std::vector<double>{-0.5, 0.5});
  EXPECT_THROW(data::save_image_grid({Image(neg, PixelRange::Signed)}, (d / "s.png").string()), DomainError);
}

TEST(DataPngDir, LoadsListing) {
  auto d = scratch("pngdir");
  data::save_png((d / "a.png").string(), Tensor({1, 2, 2}, 1.0));
  data::save_png((d / "b.png").string(), Tensor({1, 2, 2}, 0.0));
  write_text(d / "labels.csv", "a.png,1\nb.png,0\n");
  data::Source src{data::Format::PngDir, d.string(), "", {1, 2, 2}, 2};
  auto s = data::load_samples(src);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].label.argmax(), 1u);
  EXPECT_EQ(s[0].image.pixels()[0], 1.0);
  write_text(d / "labels.csv", "a.png,5\n");
  EXPECT_THROW(data::load_samples(src), ParseError);
}

TEST(DataSynthetic, DeterministicQuantizedAndBalanced) {
  const auto a = data::synthetic_shapes({.count = 40, .seed = 11});
  const auto b = data::synthetic_shapes({.count = 40, .seed = 11});
  std::vector<int> count(10, 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    ++count[a[i].label.argmax()];
    for (double v : a[i].image.pixels().data()) EXPECT_EQ(std::round(v * 255.0), v * 255.0);
  }
  for (int c : count) EXPECT_EQ(c, 4);
}
