#include <gtest/gtest.h>

#include <filesystem>

#include "loda/fedsim.hpp"
#include "support/fixtures.hpp"

using namespace loda;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

nn::Model small_cnn(std::uint64_t seed = 1) { return nn::init_model(nn::architecture("cnn-small", {1, 16, 16}, 10), seed); }

std::vector<LabeledExample> shapes(std::size_t n, std::uint64_t seed) { return data::synthetic_shapes({.count = n, .seed = seed}); }

}  // namespace

TEST(ClientGradient, ZeroImageZeroBias) {
  auto m = small_cnn();
  const auto layout = nn::param_layout(m.spec);
  for (std::size_t p = 0; p < layout.size(); ++p)
    if (layout[p].shape.size() == 1)
      for (auto& v : m.params[p].data()) v = 0.0;
  auto g = fedsim::client_gradient(m, {0, Image::filled(1, 16, 16, 0.0), Label::hard(3, 10)}).grad;
  double bias_norm = 0.0;
  for (std::size_t p = 0; p < layout.size(); ++p) {
    if (layout[p].name.rfind("conv", 0) == 0 && layout[p].shape.size() == 4)
      for (double v : g.parts()[p].data()) EXPECT_EQ(v, 0.0) << layout[p].name;
    if (layout[p].shape.size() == 1) bias_norm += l2_norm(g.parts()[p].data());
  }
  EXPECT_GT(bias_norm, 0.0);
}

TEST(ClientGradient, FullPruneIsZeroAndSupportEmpty) {
  auto ex = shapes(1, 2)[0];
  auto sg = fedsim::client_gradient(small_cnn(), ex, 1.0);
  for (double v : sg.grad.flatten()) EXPECT_EQ(v, 0.0);
  ASSERT_TRUE(sg.support.has_value());
  EXPECT_TRUE(sg.support->empty());
}

TEST(ClientGradient, Deterministic) {
  auto ex = shapes(1, 2)[0];
  EXPECT_EQ(fedsim::client_gradient(small_cnn(), ex).grad, fedsim::client_gradient(small_cnn(), ex).grad);
}

TEST(Train, ZeroLearningRateLeavesModel) {
  auto data = shapes(40, 3);
  auto m = small_cnn();
  fedsim::TrainConfig tc;
  tc.lr = 0.0;
  tc.epochs = 2;
  auto r = fedsim::train(m, data, data, tc);
  EXPECT_EQ(r.model.params, m.params);
  EXPECT_EQ(r.accuracy.back(), metrics::accuracy(m, data));
}

TEST(Train, SameSeedSameParameters) {
  auto data = shapes(64, 3);
  fedsim::TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 16;
  auto a = fedsim::train(small_cnn(), data, {}, tc);
  auto b = fedsim::train(small_cnn(), data, {}, tc);
  EXPECT_EQ(a.model.params, b.model.params);
  tc.seed = 99;
  auto c = fedsim::train(small_cnn(), data, {}, tc);
  EXPECT_NE(a.model.params, c.model.params);
}

TEST(Train, CleanToySplitLearns) {
  fedsim::DatasetConfig dc;
  auto split = fedsim::load_split(dc);
  fedsim::TrainConfig tc;  // default budget
  tc.seed = 9;
  auto r = fedsim::train(small_cnn(), split.private_train, split.test, tc);
  EXPECT_GE(*std::max_element(r.accuracy.begin(), r.accuracy.end()), 0.85);
  EXPECT_EQ(r.accuracy.size(), tc.epochs);
}

TEST(Train, SoftLabelsAccepted) {
  auto data = shapes(8, 4);
  auto mixed = defense::mix_encrypt(data, {2, 1, false});
  std::vector<LabeledExample> ex;
  for (auto& r : mixed.records) ex.push_back({r.sample_id, r.image, r.label});
  fedsim::TrainConfig tc;
  tc.epochs = 1;
  EXPECT_NO_THROW(fedsim::train(small_cnn(), ex, {}, tc));
}

TEST(Train, DivergenceAbortsWithTrace) {
  auto data = shapes(64, 3);
  fedsim::TrainConfig tc;
  tc.lr = 1e6;
  tc.epochs = 5;
  tc.batch_size = 8;
  try {
    fedsim::train(small_cnn(), data, {}, tc);
    FAIL() << "expected divergence";
  } catch (const fedsim::DivergenceError& e) {
    EXPECT_EQ(e.kind(), "divergence");
    EXPECT_FALSE(e.trace.empty());
  }
}

TEST(Train, RejectsBadConfig) {
  fedsim::TrainConfig tc;
  tc.epochs = 0;
  EXPECT_THROW(fedsim::train(small_cnn(), shapes(4, 1), {}, tc), ConfigError);
  EXPECT_THROW(fedsim::train(small_cnn(), {}, {}, fedsim::TrainConfig{}), DomainError);
}

TEST(ParallelFor, OrderIndependentAndRethrows) {
  std::vector<int> out(100);
  fedsim::parallel_for(out.size(), 4, [&](std::size_t i) { out[i] = static_cast<int>(i * i); });
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], static_cast<int>(i * i));
  EXPECT_THROW(fedsim::parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw DomainError("x"); }), DomainError);
}

TEST(AttackerView, CarriesNoPrivateImage) {
  auto cfg = fixtures::tiny_config();
  auto batch = shapes(4, 6);
  auto model = small_cnn();
  for (auto kind : {defense::Kind::None, defense::Kind::GradPrune, defense::Kind::Mixup, defense::Kind::InstaHide}) {
    cfg.defense = kind;
    auto enc = fedsim::encrypt_set(cfg, batch, shapes(20, 7), nullptr, 1);
    for (const auto& r : enc.records) {
      auto v = fedsim::make_view(cfg, model, r, enc, nullptr);
      if (kind == defense::Kind::None || kind == defense::Kind::GradPrune) {
        EXPECT_FALSE(v.encrypted.has_value());
      } else {
        ASSERT_TRUE(v.encrypted.has_value());
        for (const auto& b : batch) EXPECT_FALSE(*v.encrypted == b.image);
      }
      EXPECT_EQ(v.prune_support.has_value(), kind == defense::Kind::GradPrune);
    }
  }
}

TEST(Experiment, NoDefenseBundle) {
  auto cfg = fixtures::tiny_config();
  cfg.run_training = false;
  const auto dir = fixtures::scratch("nodef");
  auto r = fedsim::run_experiment(cfg, dir.string());
  ASSERT_EQ(r.rows.size(), 2u);  // gla + strongest, adaptive skipped
  EXPECT_EQ(r.rows[0].attack, "gla");
  EXPECT_EQ(r.pixel_distance, 0.0);
  auto split = fedsim::load_split(cfg.dataset);
  for (std::size_t i = 0; i < r.eval_records.size(); ++i) EXPECT_EQ(r.eval_records[i].image, split.private_eval[i].image);
  for (auto f : {"config.json", "metrics.csv", "pairs.csv", "images/private.png", "images/gla.png"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
}

TEST(Experiment, LodaRowSchemaAndRerunIsIdentical) {
  auto cfg = fixtures::tiny_config();
  cfg.defense = defense::Kind::Loda;
  const auto dir = fixtures::scratch("loda");
  auto first = fedsim::run_experiment(cfg, dir.string());
  const std::string csv = read_file((dir / "metrics.csv").string());
  EXPECT_EQ(csv.substr(0, csv.find('\n') + 1), "defense,param,attack,accuracy,proxy_avg,proxy_std,proxy_min,psnr_avg,psnr_std,psnr_max\n");
  EXPECT_NE(csv.find("loda,c=20,gla,"), std::string::npos);
  EXPECT_NE(csv.find("loda,c=20,adaptive-c1,"), std::string::npos);
  const std::string pairs = read_file((dir / "pairs.csv").string());
  std::size_t ckpts = 0;
  for (auto& e : fs::directory_iterator(dir / "checkpoints")) ckpts += e.exists();

  auto again = fedsim::run_experiment(cfg, dir.string());
  EXPECT_EQ(read_file((dir / "metrics.csv").string()), csv);
  EXPECT_EQ(read_file((dir / "pairs.csv").string()), pairs);
  std::size_t ckpts2 = 0;
  for (auto& e : fs::directory_iterator(dir / "checkpoints")) ckpts2 += e.exists();
  EXPECT_EQ(ckpts, ckpts2);
}

TEST(Experiment, WorkerCountDoesNotChangeResults) {
  auto cfg = fixtures::tiny_config();
  cfg.defense = defense::Kind::Loda;
  cfg.run_training = false;
  cfg.workers = 1;
  const auto a = fixtures::scratch("w1"), b = fixtures::scratch("w3");
  fedsim::run_experiment(cfg, a.string());
  cfg.workers = 3;
  fedsim::run_experiment(cfg, b.string());
  EXPECT_EQ(read_file((a / "metrics.csv").string()), read_file((b / "metrics.csv").string()));
}

TEST(Experiment, StageErrorsAreTagged) {
  auto cfg = fixtures::tiny_config();
  cfg.dataset.format = "idx";
  cfg.dataset.path = "/nonexistent/images.idx";
  cfg.dataset.labels_path = "/nonexistent/labels.idx";
  try {
    fedsim::run_experiment(cfg, fixtures::scratch("err").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("stage data"), std::string::npos) << e.what();
  }
}

TEST(Config, JsonOverlayAndUnknownSection) {
  fedsim::ExperimentConfig c;
  fedsim::apply_json_config(c, json::parse(R"({"defense": {"kind": "mixup", "k": 2}, "attack": {"gla": {"lr": 0.5}}})"));
  EXPECT_EQ(c.defense, defense::Kind::Mixup);
  EXPECT_EQ(c.mix_k, 2u);
  EXPECT_EQ(c.gla.lr, 0.5);
  EXPECT_EQ(c.gla.steps, 2000u);
  EXPECT_THROW(fedsim::apply_json_config(c, json::parse(R"({"nope": 1})")), ConfigError);
  EXPECT_THROW(fedsim::apply_json_config(c, json::parse(R"({"attack": {"alpha_select": "best"}})")), ConfigError);
  EXPECT_THROW(fedsim::apply_json_config(c, json::parse(R"({"train_repeats": 0})")), ConfigError);
  // round trip
  fedsim::ExperimentConfig d;
  fedsim::apply_json_config(d, fedsim::to_json_config(c));
  EXPECT_EQ(fedsim::to_json_config(d), fedsim::to_json_config(c));
}

TEST(Experiment, CorrelationEstimateRunsWithoutOracle) {
  auto cfg = fixtures::tiny_config();
  cfg.defense = defense::Kind::Mixup;
  cfg.run_training = false;
  cfg.mixing_estimate = fedsim::MixingEstimate::Correlation;
  auto r = fedsim::run_experiment(cfg, fixtures::scratch("mhat").string());
  EXPECT_NO_THROW(r.row("adaptive"));
}

TEST(Train, StepDecayChangesTrajectory) {
  auto data = shapes(64, 3);
  fedsim::TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 16;
  auto a = fedsim::train(small_cnn(), data, {}, tc);
  tc.lr_decay = false;
  auto b = fedsim::train(small_cnn(), data, {}, tc);
  EXPECT_NE(a.model.params, b.model.params);
  tc.epochs = 1;  // a single epoch never reaches the first milestone
  auto c1 = fedsim::train(small_cnn(), data, {}, tc);
  tc.lr_decay = true;
  auto c2 = fedsim::train(small_cnn(), data, {}, tc);
  EXPECT_EQ(c1.model.params, c2.model.params);
}
