#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "esf/data.hpp"
#include "esf/error.hpp"
#include "esf/train.hpp"
#include "helpers.hpp"

using namespace esf;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.base_scale = 16;
  m.base_channels = 4;
  m.fpb_count = 1;
  return m;
}

std::vector<LabeledImage> toy_items(std::size_t n, std::uint64_t seed, std::size_t size = 32) {
  std::mt19937_64 rng(seed);
  std::vector<LabeledImage> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({toy_real_image(size, rng), 0, {}});
    out.push_back({toy_fake_image(size, rng), 1, {}});
  }
  return out;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.model = small_model();
  c.batch_size = 4;
  c.epochs = 2;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 10, 2e-4, 1e-6), 2e-4);
  EXPECT_NEAR(cosine_lr(10, 10, 2e-4, 1e-6), 1e-6, 1e-18);
  EXPECT_NEAR(cosine_lr(5, 10, 2e-4, 0.0), 1e-4, 1e-18);
}

TEST(CosineLr, Contract) {
  EXPECT_THROW(cosine_lr(0, 0, 1e-3, 0), ContractError);
  EXPECT_THROW(cosine_lr(11, 10, 1e-3, 0), ContractError);
}

class AdamTest : public ::testing::Test {
 protected:
  ModelParams<double> params;
  AdamState<double> state;

  void SetUp() override {
    params.tensors["a.weight"] = Tensor<double>({3}, {1.0, -2.0, 0.5});
    params.tensors["b.weight"] = Tensor<double>({3}, {1.0, -2.0, 0.5});
    params.tensors["n.running_mean"] = Tensor<double>({3}, 0.25);
  }

  std::map<std::string, Tensor<double>> grads(Tensor<double> ga, Tensor<double> gb) {
    return {{"a.weight", std::move(ga)}, {"b.weight", std::move(gb)}};
  }
};

TEST_F(AdamTest, ZeroGradientIsFixedPoint) {
  const auto before = params;
  adam_step(params, grads(Tensor<double>({3}), Tensor<double>({3})), state, 1e-3);
  EXPECT_EQ(params, before);
  EXPECT_EQ(state.step, 1u);
}

TEST_F(AdamTest, FirstStepHasMagnitudeLr) {
  const auto before = params;
  adam_step(params, grads(Tensor<double>({3}, {0.3, -4.0, 1e-2}), Tensor<double>({3}, 1.0)), state,
            1e-3);
  const auto& a = params.at("a.weight");
  EXPECT_NEAR(a[0] - before.at("a.weight")[0], -1e-3, 1e-9);
  EXPECT_NEAR(a[1] - before.at("a.weight")[1], 1e-3, 1e-9);
  EXPECT_NEAR(a[2] - before.at("a.weight")[2], -1e-3, 1e-8);
}

TEST_F(AdamTest, EqualGradientsGiveEqualUpdates) {
  const Tensor<double> g({3}, {0.1, 0.2, -0.3});
  for (int i = 0; i < 3; ++i) adam_step(params, grads(g, g), state, 1e-2);
  EXPECT_EQ(params.at("a.weight"), params.at("b.weight"));
}

TEST_F(AdamTest, NegatedGradientsNegateUpdates) {
  auto mirror = params;
  AdamState<double> mirror_state;
  const auto g = fixtures::random_tensor({3}, 70);
  Tensor<double> neg = g;
  for (auto& v : neg.values()) v = -v;
  adam_step(params, grads(g, g), state, 1e-2);
  adam_step(mirror, grads(neg, neg), mirror_state, 1e-2);
  for (std::size_t i = 0; i < 3; ++i) {
    const double start = i == 0 ? 1.0 : i == 1 ? -2.0 : 0.5;
    EXPECT_NEAR(params.at("a.weight")[i] - start, -(mirror.at("a.weight")[i] - start), 1e-15);
  }
}

TEST_F(AdamTest, BuffersUntouched) {
  adam_step(params, grads(Tensor<double>({3}, 1.0), Tensor<double>({3}, 1.0)), state, 1e-2);
  EXPECT_EQ(params.at("n.running_mean"), Tensor<double>({3}, 0.25));
}

TEST_F(AdamTest, NanGradientAbortsWithName) {
  const auto before = params;
  Tensor<double> bad({3}, 0.1);
  bad[2] = std::nan("");
  try {
    adam_step(params, grads(Tensor<double>({3}, 0.1), bad), state, 1e-2);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("b.weight"), std::string::npos);
  }
  EXPECT_EQ(params, before);
}

TEST(Augment, DisabledIsIdentity) {
  const auto img = fixtures::random_image(16, 16, 71);
  AugmentConfig off;
  off.probability = 0.0;
  std::mt19937_64 rng(1);
  EXPECT_EQ(augment(img, rng, off), img);
}

TEST(Augment, FlipTwiceRestores) {
  const auto img = fixtures::random_image(16, 8, 72);
  AugmentConfig flip;
  flip.blur = flip.jpeg = false;
  flip.probability = 1.0;
  std::mt19937_64 rng(2);
  const auto once = augment(img, rng, flip);
  EXPECT_EQ(once, flip_horizontal(img));
  EXPECT_EQ(augment(once, rng, flip), img);
}

TEST(Augment, SeededDeterminism) {
  const auto img = fixtures::random_image(24, 24, 73);
  AugmentConfig all;
  all.probability = 1.0;
  std::mt19937_64 r1(9), r2(9);
  const auto a = augment(img, r1, all);
  EXPECT_EQ(a, augment(img, r2, all));
  EXPECT_NE(a, img);
}

TEST(TrainConfigJson, RoundTrip) {
  TrainConfig c = quick_config();
  c.augment.jpeg = false;
  c.model.use_small_scale = false;
  EXPECT_EQ(train_config_from_json(to_json(c)), c);
}

TEST(TrainConfigJson, PartialDocumentKeepsDefaults) {
  const auto c = train_config_from_json(nlohmann::json::parse(R"({"epochs": 3, "model": {"base_scale": 32}})"));
  EXPECT_EQ(c.epochs, 3u);
  EXPECT_EQ(c.model.base_scale, 32u);
  EXPECT_EQ(c.learning_rate, 2e-4);
  EXPECT_EQ(c.batch_size, 32u);
}

TEST(TrainConfigJson, Rejections) {
  auto parse = [](const char* s) { return train_config_from_json(nlohmann::json::parse(s)); };
  EXPECT_THROW(parse(R"({"lerning_rate": 1e-3})"), ConfigError);
  EXPECT_THROW(parse(R"({"model": {"scale": 32}})"), ConfigError);
  EXPECT_THROW(parse(R"({"epochs": "ten"})"), ConfigError);
  EXPECT_THROW(parse(R"({"learning_rate": 0})"), ConfigError);
  EXPECT_THROW(parse(R"({"batch_size": 0})"), ConfigError);
  EXPECT_THROW(parse(R"({"model": {"base_scale": 24}})"), ConfigError);
}

TEST(Train, RejectsDegenerateData) {
  EXPECT_THROW(train({}, quick_config()), ConfigError);
  auto items = toy_items(2, 1);
  std::erase_if(items, [](const LabeledImage& x) { return x.label == 1; });
  EXPECT_THROW(train(items, quick_config()), ConfigError);
}

TEST(Train, TraceAndSchedule) {
  auto config = quick_config();
  config.lr_min = 1e-6;
  std::ostringstream log;
  const auto result = train(toy_items(4, 2), config, &log);
  ASSERT_EQ(result.trace.size(), 2u);
  ASSERT_EQ(result.lr_trace.size(), 4u);  // 8 images, batch 4, 2 epochs
  EXPECT_DOUBLE_EQ(result.lr_trace.front(), config.learning_rate);
  EXPECT_NEAR(result.lr_trace.back(), config.lr_min, 1e-18);
  EXPECT_EQ(result.trace[1].lr, result.lr_trace[2]);
  EXPECT_NE(log.str().find("epoch 2/2"), std::string::npos);
  const auto csv = trace_csv(result.trace);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,mean_loss,train_acc,lr");
  EXPECT_NO_THROW(check_params(result.params, config.model));
}

TEST(Train, BitIdenticalAcrossRuns) {
  const auto data = toy_items(3, 4);
  const auto a = train(data, quick_config());
  const auto b = train(data, quick_config());
  EXPECT_EQ(encode_checkpoint({quick_config().model, a.params}),
            encode_checkpoint({quick_config().model, b.params}));
  auto other = quick_config();
  other.seed = 4;
  EXPECT_NE(train(data, other).params, a.params);
}

TEST(Train, LossDecreasesOnToyData) {
  TrainConfig c;
  c.model = small_model();
  c.model.base_channels = 8;
  c.batch_size = 8;
  c.epochs = 8;
  c.learning_rate = 2e-3;
  c.seed = 5;
  c.augment.blur = c.augment.jpeg = false;
  const auto result = train(toy_items(16, 6), c);
  std::size_t upticks = 0;
  for (std::size_t e = 2; e < result.trace.size(); ++e) {
    const double prev = result.trace[e - 1].mean_loss, cur = result.trace[e].mean_loss;
    if (cur > prev) {
      ++upticks;
      EXPECT_LE(cur, prev * 1.05) << "epoch " << e + 1;
    }
  }
  EXPECT_LE(upticks, 1u);
  EXPECT_LT(result.trace.back().mean_loss, result.trace.front().mean_loss);
}

TEST(Checkpoint, EncodeDecodeIsExact) {
  auto model = small_model();
  model.central_conv = false;
  const Checkpoint ck{model, init_params<float>(model, 9)};
  const auto bytes = encode_checkpoint(ck);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "ESFC");
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.config, model);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, CorruptionIsFormatError) {
  const auto model = small_model();
  const auto bytes = encode_checkpoint({model, init_params<float>(model, 10)});
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  EXPECT_THROW(decode_checkpoint({bytes.begin(), bytes.end() - 3}), FormatError);
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(decode_checkpoint(longer), FormatError);
  bad = bytes;
  bad[4] = 9;  // version
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = fixtures::scratch_dir("ckpt");
  const auto model = small_model();
  const Checkpoint ck{model, init_params<float>(model, 11)};
  save_checkpoint(dir / "m.esfc", ck);
  EXPECT_EQ(load_checkpoint(dir / "m.esfc").params, ck.params);
  EXPECT_THROW(load_checkpoint(dir / "none.esfc"), IoError);
}
