#include <gtest/gtest.h>

#include <cmath>

#include "loda/attack.hpp"
#include "loda/data.hpp"
#include "loda/defense.hpp"
#include "loda/metrics.hpp"
#include "support/gradcheck.hpp"

using namespace loda;
using json = nlohmann::json;

namespace {

ad::GradientVector true_gradient(const nn::Model& m, const Image& x, const Label& y) {
  ad::Tape tape;
  auto params = nn::variable_params(tape, m);
  auto loss = ad::softmax_cross_entropy(nn::forward(m.spec, params, tape.constant(x.batched())), Tensor({1, y.num_classes()}, y.probs()));
  std::vector<Tensor> parts;
  for (auto& g : tape.grad(loss, params)) parts.push_back(g.value());
  return ad::GradientVector(std::move(parts));
}

attack::AttackConfig quick(std::size_t steps, double alpha = 0.0) {
  attack::AttackConfig c;
  c.steps = steps;
  c.alpha_tv = alpha;
  c.seed = 4;
  return c;
}

LabeledExample shape_sample(std::size_t i = 3) { return data::synthetic_shapes({.count = 10, .seed = 5})[i]; }

}  // namespace

TEST(TotalVariation, TwoByTwo) {
  EXPECT_DOUBLE_EQ(attack::total_variation(Tensor({1, 2, 2}, {0, 1, 0, 1})), 2.0);
  EXPECT_DOUBLE_EQ(attack::total_variation(Image::filled(2, 3, 3, 0.7)), 0.0);
}

TEST(TotalVariation, TapeMatchesDirect) {
  Rng rng(2);
  Tensor t({1, 2, 3, 4});
  for (auto& v : t.data()) v = rng.uniform();
  ad::Tape tape;
  auto tv = attack::total_variation(tape.constant(t), attack::tv_pairs(t.shape()));
  EXPECT_NEAR(tv.value().item(), attack::total_variation(t.reshaped({2, 3, 4})), 1e-12);
}

TEST(GradMatch, CosineExamples) {
  std::vector<double> a{1, 0}, b{0, 1}, c{-2, 0}, d{3, 0};
  EXPECT_NEAR(attack::grad_match_distance(a, d), 0.0, 1e-15);
  EXPECT_NEAR(attack::grad_match_distance(a, b), 1.0, 1e-15);
  EXPECT_NEAR(attack::grad_match_distance(a, c), 2.0, 1e-15);
}

TEST(GradMatch, ZeroNormThrows) {
  std::vector<double> a{1, 0}, z{0, 0};
  EXPECT_THROW(attack::grad_match_distance(a, z), DomainError);
}

TEST(GradMatch, MaskRestrictsCoordinates) {
  std::vector<double> a{1, 5, 0}, b{1, -7, 0};
  std::vector<std::size_t> mask{0, 2};
  EXPECT_NEAR(attack::grad_match_distance(a, b, &mask), 0.0, 1e-15);
}

TEST(Gla, StartingAtTruthStaysThere) {
  auto m = nn::init_model(nn::architecture("cnn-small", {1, 16, 16}, 10), 1);
  auto ex = shape_sample();
  auto cfg = quick(20);
  cfg.init = attack::Init::Given;
  auto r = attack::gradient_leakage_attack(true_gradient(m, ex.image, ex.label), ex.label, m, cfg, nullptr, &ex.image);
  EXPECT_NEAR(r.trace[0], 0.0, 1e-12);
  EXPECT_EQ(r.best_step, 0u);
  EXPECT_EQ(r.images[0], ex.image);
  EXPECT_EQ(r.trace.size(), 21u);
}

TEST(Gla, LinearModelRecoversImage) {
  auto m = nn::init_model(nn::architecture("linear", {1, 8, 8}, 10), 3);
  Rng rng(8);
  Tensor px({1, 8, 8});
  for (auto& v : px.data()) v = rng.uniform();
  Image x(px);
  Label y = Label::hard(2, 10);
  auto r = attack::gradient_leakage_attack(true_gradient(m, x, y), y, m, quick(1000));
  EXPECT_GT(metrics::psnr(r.images[0], x), 35.0);
}

TEST(Gla, Deterministic) {
  auto m = nn::init_model(nn::architecture("cnn-small", {1, 16, 16}, 10), 1);
  auto ex = shape_sample();
  auto g = true_gradient(m, ex.image, ex.label);
  auto a = attack::gradient_leakage_attack(g, ex.label, m, quick(30, 1e-4));
  auto b = attack::gradient_leakage_attack(g, ex.label, m, quick(30, 1e-4));
  EXPECT_EQ(a.images[0], b.images[0]);
  EXPECT_EQ(a.trace, b.trace);
}

TEST(Gla, OutputInBoxAndBestIsMinimum) {
  auto m = nn::init_model(nn::architecture("cnn-small", {1, 16, 16}, 10), 1);
  auto ex = shape_sample(4);
  auto r = attack::gradient_leakage_attack(true_gradient(m, ex.image, ex.label), ex.label, m, quick(60, 1e-4));
  for (double v : r.images[0].pixels().data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(r.best_objective, *std::min_element(r.trace.begin(), r.trace.end()));
}

TEST(Gla, MaskAwareReadsOnlyUnprunedCoordinates) {
  auto m = nn::init_model(nn::architecture("cnn-small", {1, 16, 16}, 10), 1);
  auto ex = shape_sample();
  auto full = true_gradient(m, ex.image, ex.label);
  auto support = defense::prune_support(full.flatten(), 0.99);
  auto pruned = defense::grad_prune(full, 0.99);
  auto cfg = quick(3);
  cfg.mask_aware = true;
  attack::ReadLog log;
  attack::gradient_leakage_attack(pruned, ex.label, m, cfg, &support, nullptr, &log);
  std::vector<bool> kept(full.size(), false);
  for (auto i : support) kept[i] = true;
  for (std::size_t i = 0; i < log.reads.size(); ++i) EXPECT_EQ(log.reads[i] > 0, kept[i]) << i;
}

TEST(Gla, MaskAwareBeatsUnawareUnderHeavyPruning) {
  auto m = nn::init_model(nn::architecture("cnn-small", {1, 16, 16}, 10), 1);
  auto ex = shape_sample();
  auto full = true_gradient(m, ex.image, ex.label);
  auto support = defense::prune_support(full.flatten(), 0.99);
  auto pruned = defense::grad_prune(full, 0.99);
  auto cfg = quick(600, 1e-5);
  auto unaware = attack::gradient_leakage_attack(pruned, ex.label, m, cfg, &support);
  cfg.mask_aware = true;
  auto aware = attack::gradient_leakage_attack(pruned, ex.label, m, cfg, &support);
  EXPECT_LE(aware.best_objective, unaware.best_objective);
  EXPECT_GT(metrics::psnr(aware.images[0], ex.image), metrics::psnr(unaware.images[0], ex.image));
}

TEST(Gla, ZeroSharedGradientThrows) {
  auto m = nn::init_model(nn::architecture("linear", {1, 2, 2}, 3), 1);
  auto z = true_gradient(m, Image::filled(1, 2, 2, 0.5), Label::hard(0, 3));
  for (auto& p : z.parts())
    for (auto& v : p.data()) v = 0.0;
  EXPECT_THROW(attack::gradient_leakage_attack(z, Label::hard(0, 3), m, quick(2)), DomainError);
}

TEST(Gla, ObjectiveGradientMatchesFiniteDifferences) {
  auto m = nn::init_model(nn::architecture("mlp", {1, 3, 3}, 4), 5);
  Image truth = Image::filled(1, 3, 3, 0.4);
  Label y = Label::hard(1, 4);
  auto shared = true_gradient(m, truth, y);
  Tensor yt({1, 4}, y.probs());
  fd::ScalarFn f = [&](ad::Tape& tape, const std::vector<ad::Var>& in) {
    auto params = nn::variable_params(tape, m);
    auto loss = ad::softmax_cross_entropy(nn::forward(m.spec, params, in[0]), yt);
    auto g = tape.grad(loss, params);
    ad::Var dot, sq;
    for (std::size_t p = 0; p < g.size(); ++p) {
      auto d = ad::dot(g[p], tape.constant(shared.parts()[p]));
      auto s = ad::sum_squares(g[p]);
      dot = p ? ad::add(dot, d) : d;
      sq = p ? ad::add(sq, s) : s;
    }
    return ad::mul(dot, ad::reciprocal(ad::sqrt(sq)));
  };
  Rng rng(1);
  Tensor x({1, 1, 3, 3});
  for (auto& v : x.data()) v = rng.uniform(0.2, 0.8);
  EXPECT_LT(fd::gradcheck(f, {x}, 1e-5), 1e-5);
}

TEST(MixAttack, IdentityMatrixRecoversImages) {
  std::vector<Image> enc = {Image::filled(1, 2, 2, 0.3), Image::filled(1, 2, 2, 0.8)};
  auto r = attack::adaptive_mix_attack(enc, defense::MixingMatrix::identity({0, 1}), attack::mix_attack_defaults(), 3);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_GT(metrics::psnr(r.images[i], enc[i]), 40.0);
}

TEST(MixAttack, TwoImageMixIsInverted) {
  Image a(Tensor({1, 2, 2}, {0.1, 0.9, 0.4, 0.6})), b(Tensor({1, 2, 2}, {0.7, 0.2, 0.5, 0.0}));
  defense::MixingMatrix m{2, {0, 1}, {0.6, 0.4, 0.4, 0.6}};
  std::vector<Image> enc;
  for (auto& t : defense::apply_mixing({a, b}, m)) enc.emplace_back(t);
  auto r = attack::adaptive_mix_attack(enc, m, attack::mix_attack_defaults(), 5);
  for (std::size_t p = 0; p < 4; ++p) {
    EXPECT_NEAR(r.images[0].pixels()[p], a.pixels()[p], 1e-3);
    EXPECT_NEAR(r.images[1].pixels()[p], b.pixels()[p], 1e-3);
  }
}

TEST(MixAttack, SignFlipsAreNullified) {
  Image s(Tensor({1, 1, 3}, {-0.2, 0.5, -0.9}), PixelRange::Signed);
  auto r = attack::adaptive_mix_attack({s}, defense::MixingMatrix::identity({0}), attack::mix_attack_defaults(), 2);
  EXPECT_GT(metrics::psnr(r.images[0], s), 40.0);
}

TEST(MixAttack, SingularMatrixWarns) {
  defense::MixingMatrix m{2, {0, 1}, {0.5, 0.5, 0.5, 0.5}};
  auto cfg = attack::mix_attack_defaults();
  cfg.steps = 5;
  auto r = attack::adaptive_mix_attack({Image::filled(1, 1, 1, 0.5), Image::filled(1, 1, 1, 0.5)}, m, cfg, 1);
  ASSERT_FALSE(r.events.empty());
  EXPECT_NE(r.events[0].find("singular"), std::string::npos);
}

TEST(MixAttack, DimensionMismatchThrows) {
  EXPECT_THROW(attack::adaptive_mix_attack({Image::filled(1, 1, 1, 0.5)}, defense::MixingMatrix::identity({0, 1}), attack::mix_attack_defaults(), 1),
               ShapeError);
}

TEST(MixAttack, GdTraceNonIncreasing) {
  Image a(Tensor({1, 2, 2}, {0.1, 0.9, 0.4, 0.6}));
  auto cfg = attack::mix_attack_defaults();
  cfg.optimizer = attack::Optimizer::Gd;
  cfg.lr = 0.1;
  cfg.lr_decay = false;
  cfg.steps = 100;
  auto r = attack::adaptive_mix_attack({a}, defense::MixingMatrix::identity({0}), cfg, 1);
  for (std::size_t t = 1; t < r.trace.size(); ++t) EXPECT_LE(r.trace[t], r.trace[t - 1] + 1e-15);
}

TEST(LodaAttack, ZeroCoefficientKeepsEncryptedPoint) {
  auto fx = nn::identity_extractor({1, 4, 4});
  Image xp = Image::filled(1, 4, 4, 0.3);
  auto cfg = attack::loda_attack_defaults();
  cfg.steps = 10;
  cfg.init = attack::Init::Given;
  auto r = attack::loda_adaptive_attack(xp, fx, 0.0, cfg);
  EXPECT_NEAR(r.trace[0], 0.0, 1e-15);
  EXPECT_EQ(r.images[0], xp);
  // and from a random start it heads there
  auto u = attack::loda_adaptive_attack(xp, fx, 0.0, attack::loda_attack_defaults());
  EXPECT_GT(metrics::psnr(u.images[0], xp), 25.0);
}

TEST(LodaAttack, UnitCoefficientIsDegenerate) {
  // identity features: residual is (1 - c)(x' - x), identically zero at c = 1
  auto fx = nn::identity_extractor({1, 4, 4});
  Image xp = Image::filled(1, 4, 4, 0.3), init = Image::filled(1, 4, 4, 0.7);
  auto cfg = attack::loda_attack_defaults();
  cfg.steps = 10;
  cfg.init = attack::Init::Given;
  auto r = attack::loda_adaptive_attack(xp, fx, 1.0, cfg, &init);
  ASSERT_EQ(r.events.size(), 1u);
  EXPECT_NE(r.events[0].find("degenerate"), std::string::npos);
  EXPECT_EQ(r.images[0], init);
}

TEST(LodaAttack, ResidualVanishesAtStationaryPoint) {
  // A LODA output is stationary by construction when x' == x*, so the
  // objective is zero there for any c.
  nn::FeatureExtractor fx{nn::init_model(nn::architecture("cnn-small", {1, 16, 16}, 10), 17), {"conv1", "conv2"}};
  auto ex = shape_sample();
  auto cfg = attack::loda_attack_defaults();
  cfg.steps = 0;
  cfg.init = attack::Init::Given;
  auto r = attack::loda_adaptive_attack(ex.image, fx, 10.0, cfg, &ex.image);
  EXPECT_NEAR(r.best_objective, 0.0, 1e-20);
}

TEST(LodaAttack, ObjectiveMatchesStationarityResidual) {
  nn::FeatureExtractor fx{nn::init_model(nn::architecture("cnn-small", {1, 16, 16}, 10), 17), {"conv1", "conv2"}};
  auto s = data::synthetic_shapes({.count = 10, .seed = 5});
  auto cfg = attack::loda_attack_defaults();
  cfg.steps = 0;
  cfg.init = attack::Init::Given;
  auto r = attack::loda_adaptive_attack(s[1].image, fx, 5.0, cfg, &s[2].image);
  const double res = defense::loda_stationarity_residual(s[1].image, s[2].image, fx, 5.0);
  EXPECT_NEAR(r.best_objective, res * res, 1e-9 * std::max(1.0, res * res));
}

TEST(EstimateMixing, RowsAreValidMixingRows) {
  auto batch = data::synthetic_shapes({.count = 8, .seed = 12});
  auto enc = defense::mix_encrypt(batch, {3, 5, false});
  std::vector<Image> imgs;
  for (const auto& r : enc.records) imgs.push_back(r.image);
  auto m = attack::estimate_mixing(imgs, 3, enc.mixing.ids);
  EXPECT_NO_THROW(m.validate(3));
  EXPECT_EQ(m.ids, enc.mixing.ids);
  auto id = attack::estimate_mixing(imgs, 1, enc.mixing.ids);
  for (std::size_t i = 0; i < id.n; ++i) EXPECT_EQ(id.at(i, i), 1.0);
  EXPECT_THROW(attack::estimate_mixing(imgs, 9, enc.mixing.ids), ConfigError);
}

TEST(AttackConfigJson, RejectsUnknownEnumNames) {
  attack::AttackConfig c;
  EXPECT_THROW(attack::from_json(json{{"init", "zeros"}}, c), ConfigError);
  EXPECT_NO_THROW(attack::from_json(json{{"init", "gray"}}, c));
  EXPECT_EQ(c.init, attack::Init::Gray);
}
