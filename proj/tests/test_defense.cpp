#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "loda/data.hpp"
#include "loda/defense.hpp"

using namespace loda;
using defense::Kind;

namespace {

ad::GradientVector flat_grad(std::vector<double> v) {
  const std::size_t n = v.size();
  return ad::GradientVector({Tensor({n}, std::move(v))});
}

std::vector<LabeledExample> constant_batch(std::vector<double> levels, std::size_t side = 4) {
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < levels.size(); ++i)
    out.push_back({i, Image::filled(1, side, side, levels[i]), Label::hard(i % 3, 3)});
  return out;
}

std::vector<LabeledExample> shapes(std::size_t n, std::uint64_t seed, std::uint64_t id_offset = 0) {
  auto s = data::synthetic_shapes({.count = n, .seed = seed});
  for (auto& e : s) e.id += id_offset;
  return s;
}

nn::FeatureExtractor small_extractor() {
  return {nn::init_model(nn::architecture("cnn-small", {1, 16, 16}, 10), 17), {"conv1", "conv2"}};
}

}  // namespace

TEST(GradPrune, HalfOfFour) {
  auto out = defense::grad_prune(flat_grad({1.0, -2.0, 3.0, 0.5}), 0.5);
  EXPECT_EQ(out.flatten(), (std::vector<double>{0.0, -2.0, 3.0, 0.0}));
}

TEST(GradPrune, Extremes) {
  const auto g = flat_grad({1.0, -2.0, 3.0, 0.5});
  EXPECT_EQ(defense::grad_prune(g, 0.0), g);
  for (double v : defense::grad_prune(g, 1.0).flatten()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(defense::grad_prune(g, 1.5), DomainError);
  EXPECT_THROW(defense::grad_prune(g, -0.1), DomainError);
}

TEST(GradPrune, TiesByAscendingIndexAndSurvivorsUntouched) {
  auto out = defense::grad_prune(flat_grad({1.0, -1.0, 1.0, 2.0}), 0.5).flatten();
  EXPECT_EQ(out, (std::vector<double>{0.0, 0.0, 1.0, 2.0}));

  Rng rng(4);
  std::vector<double> v(101);
  for (auto& x : v) x = rng.normal();
  for (double p : {0.1, 0.37, 0.9, 0.99}) {
    const auto pruned = defense::grad_prune(flat_grad(v), p).flatten();
    const auto zeros = std::count(pruned.begin(), pruned.end(), 0.0);
    EXPECT_GE(zeros, static_cast<long>(std::floor(p * 101)));
    for (std::size_t i = 0; i < v.size(); ++i)
      if (pruned[i] != 0.0) EXPECT_EQ(pruned[i], v[i]);
    // brute force: every survivor's magnitude dominates every pruned one
    double max_pruned = 0.0, min_kept = 1e300;
    for (std::size_t i = 0; i < v.size(); ++i)
      (pruned[i] == 0.0 ? max_pruned : min_kept) =
          pruned[i] == 0.0 ? std::max(max_pruned, std::fabs(v[i])) : std::min(min_kept, std::fabs(v[i]));
    EXPECT_LE(max_pruned, min_kept);
  }
}

TEST(Mixing, KOneIsIdentity) {
  auto batch = constant_batch({0.1, 0.5, 0.9});
  auto out = defense::mix_encrypt(batch, {.k = 1, .seed = 3});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    EXPECT_EQ(out.records[i].image, batch[i].image);
    EXPECT_EQ(out.records[i].label, batch[i].label);
  }
  out.mixing.validate(1);
}

TEST(Mixing, ConstantImagesHandArithmetic) {
  std::vector<Image> imgs = {Image::filled(1, 2, 2, 0.2), Image::filled(1, 2, 2, 0.6)};
  defense::MixingMatrix m{2, {0, 1}, {0.5, 0.5, 0.5, 0.5}};
  for (const auto& t : defense::apply_mixing(imgs, m))
    for (double v : t.data()) EXPECT_NEAR(v, 0.4, 1e-12);
}

TEST(Mixing, RowsOnSparseSimplexAndLabelsMixed) {
  auto batch = shapes(12, 2);
  auto out = defense::mix_encrypt(batch, {.k = 4, .seed = 9});
  EXPECT_NO_THROW(out.mixing.validate(4));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& r = out.records[i];
    EXPECT_EQ(r.provenance.members.front(), batch[i].id);
    EXPECT_EQ(std::set<std::uint64_t>(r.provenance.members.begin(), r.provenance.members.end()).size(), 4u);
    for (std::size_t c = 0; c < 10; ++c) {
      double expect = 0.0;
      for (std::size_t m = 0; m < 4; ++m)
        expect += r.provenance.coeffs[m] * batch[r.provenance.members[m]].label.probs()[c];
      EXPECT_NEAR(r.label.probs()[c], expect, 1e-12);
    }
  }
  EXPECT_THROW(defense::mix_encrypt(batch, {.k = 13, .seed = 9}), ConfigError);
}

TEST(SignMask, ReproducibleAndBalanced) {
  auto a = defense::SignMask::from_seed(77, {1, 16, 16});
  auto b = defense::SignMask::from_seed(77, {1, 16, 16});
  EXPECT_EQ(a.signs, b.signs);
  EXPECT_GE(a.flip_fraction(), 0.4);
  EXPECT_LE(a.flip_fraction(), 0.6);
  for (double v : a.signs.data()) EXPECT_TRUE(v == 1.0 || v == -1.0);
}

TEST(InstaHide, AbsEqualsMixupMagnitude) {
  auto batch = shapes(8, 4);
  defense::MixConfig cfg{.k = 4, .seed = 5};
  auto mix = defense::mix_encrypt(batch, cfg);
  auto ih = defense::instahide_encrypt(batch, cfg);
  EXPECT_EQ(mix.mixing.a, ih.mixing.a);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    EXPECT_EQ(ih.records[i].image.range(), PixelRange::Signed);
    EXPECT_EQ(ih.records[i].image.magnitude(), mix.records[i].image);
    EXPECT_EQ(ih.records[i].label, mix.records[i].label);
  }
}

TEST(InstaHide, FixedMaskDefinition) {
  Tensor px({1, 1, 2}, std::vector<double>{0.2, 0.3});
  Tensor mask({1, 1, 2}, std::vector<double>{-1.0, 1.0});
  for (std::size_t i = 0; i < px.size(); ++i) px[i] *= mask[i];
  EXPECT_EQ(px.values(), (std::vector<double>{-0.2, 0.3}));
  // an all-positive mask leaves the Mixup image untouched
  auto batch = shapes(4, 1);
  auto mix = defense::mix_encrypt(batch, {.k = 2, .seed = 1});
  defense::SignMask ones{0, Tensor({1, 16, 16}, 1.0)};
  Tensor t = mix.records[0].image.pixels();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] *= ones.signs[i];
  EXPECT_EQ(t, mix.records[0].image.pixels());
}

TEST(InstaHide, PublicCompanionsCarryNoLabel) {
  auto batch = shapes(4, 1);
  auto pool = shapes(10, 2, 1000);
  auto out = defense::instahide_encrypt(batch, {.k = 3, .seed = 2, .public_companions = true}, &pool);
  EXPECT_EQ(out.mixing.n, 0u);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    EXPECT_EQ(out.records[i].label, batch[i].label);
    EXPECT_EQ(out.records[i].provenance.member_public, (std::vector<bool>{false, true, true}));
  }
}

TEST(Replay, MixupAndInstaHideAreBitExact) {
  auto batch = shapes(10, 6);
  defense::ReplayContext ctx;
  ctx.add_private(batch);
  for (auto rec : {defense::mix_encrypt(batch, {.k = 4, .seed = 1}).records,
                   defense::instahide_encrypt(batch, {.k = 4, .seed = 1}).records})
    for (const auto& r : rec) EXPECT_EQ(defense::replay(r, ctx), r.image);
}

TEST(Loda, ZeroStepsReturnsInit) {
  auto priv = shapes(2, 1);
  auto pool = shapes(5, 2, 100);
  auto fx = small_extractor();
  auto r = defense::loda_encrypt(priv[0], fx, {.c = 20, .steps = 0, .tau = 0.1, .seed = 3}, pool);
  const auto it = std::find_if(pool.begin(), pool.end(), [&](auto& e) { return e.id == *r.provenance.init_id; });
  ASSERT_NE(it, pool.end());
  EXPECT_EQ(r.image, it->image);
  EXPECT_EQ(r.label, priv[0].label);
}

TEST(Loda, FixedPointAtOriginalWhenCIsZero) {
  auto priv = shapes(1, 1);
  auto r = defense::loda_encrypt(priv[0], small_extractor(), {.c = 0, .steps = 20, .tau = 0.1}, {}, &priv[0].image);
  EXPECT_EQ(r.image, priv[0].image);
  EXPECT_EQ(r.provenance.zero_grad_events, 20u);
}

TEST(Loda, ObjectiveDecreasesAndOutputIsValid) {
  auto priv = shapes(3, 1);
  auto pool = shapes(20, 2, 100);
  auto fx = small_extractor();
  for (const auto& x : priv) {
    auto r = defense::loda_encrypt(x, fx, {.c = 20, .steps = 500, .tau = 0.1, .seed = 8}, pool);
    EXPECT_LE(r.provenance.objective_final, r.provenance.objective_init);
    for (double v : r.image.pixels().data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(r.label, x.label);
  }
}

TEST(Loda, ReplayIsBitExact) {
  auto priv = shapes(2, 1);
  auto pool = shapes(6, 2, 100);
  auto fx = small_extractor();
  defense::ReplayContext ctx;
  ctx.add_private(priv);
  ctx.add_public(pool);
  ctx.extractor = &fx;
  for (const auto& x : priv) {
    auto r = defense::loda_encrypt(x, fx, {.c = 10, .steps = 40, .tau = 0.1, .seed = 4}, pool);
    EXPECT_EQ(defense::replay(r, ctx), r.image);
  }
}

TEST(LodaResidual, ZeroAtOriginal) {
  auto x = shapes(1, 3)[0].image;
  EXPECT_EQ(defense::loda_stationarity_residual(x, x, small_extractor(), 20.0), 0.0);
}

TEST(LodaResidual, IdentityExtractorIsPixelDistance) {
  auto s = shapes(2, 3);
  auto fx = nn::identity_extractor({1, 16, 16});
  const double r = defense::loda_stationarity_residual(s[0].image, s[1].image, fx, 0.0);
  double d = 0.0;
  for (std::size_t i = 0; i < s[0].image.size(); ++i)
    d += std::pow(s[0].image.pixels()[i] - s[1].image.pixels()[i], 2);
  EXPECT_NEAR(r, std::sqrt(d), 1e-12);
}

TEST(EncryptedDataset, RoundTripIsBitExact) {
  namespace fs = std::filesystem;
  const auto dir = (fs::temp_directory_path() / "loda_test_defense" / "enc").string();
  fs::remove_all(dir);
  auto batch = shapes(6, 2);
  auto ih = defense::instahide_encrypt(batch, {.k = 3, .seed = 1});
  defense::EncryptedDataset ds{Kind::InstaHide, {{"k", 3}}, ih.records, ih.mixing};
  defense::save_encrypted(dir, ds);
  auto back = defense::load_encrypted(dir);
  ASSERT_EQ(back.records.size(), ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    EXPECT_EQ(back.records[i].image, ds.records[i].image);
    EXPECT_EQ(back.records[i].label, ds.records[i].label);
    EXPECT_EQ(back.records[i].provenance.coeffs, ds.records[i].provenance.coeffs);
    EXPECT_EQ(back.records[i].provenance.sign_seed, ds.records[i].provenance.sign_seed);
  }
  EXPECT_EQ(back.mixing->a, ds.mixing->a);
  EXPECT_THROW(defense::load_encrypted(dir + "_missing"), ArtifactError);
}
