#include <gtest/gtest.h>

#include "cstbir/checkpoint.hpp"
#include "cstbir/encoders.hpp"
#include "cstbir/error.hpp"
#include "cstbir/stnet.hpp"
#include "cstbir/tokenizer.hpp"
#include "support/test_util.hpp"

using namespace cstbir;
using cstbir::testing::tensors_equal;
using cstbir::testing::tiny_config;

namespace {

ModelConfig paper_patch_config() {
  auto c = tiny_config();
  c.image_size = 224;
  c.patch_size = 16;
  return c;
}

RgbImage random_image(int size, std::uint64_t seed) {
  torch::manual_seed(seed);
  auto t = torch::randint(0, 256, {size, size, 3}, torch::kUInt8).contiguous();
  RgbImage img(size, size);
  std::memcpy(img.data.data(), t.data_ptr<std::uint8_t>(), img.data.size());
  return img;
}

}  // namespace

TEST(ModelConfig, ValidationAndJsonRoundTrip) {
  auto c = tiny_config();
  c.validate();
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
  auto bad = c;
  bad.patch_size = 7;
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.n_categories = 1;
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.od_grid = 0;
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.od_boxes = 0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(TextEncoder, ShapeDeterminismAndOrderSensitivity) {
  torch::manual_seed(0);
  auto cfg = tiny_config();
  TextEncoder enc(cfg);
  enc->eval();
  const auto tok = Tokenizer::train({"dog above cat", "cat above dog"}, 600);
  const auto a = encode_text(enc, tok.tokenize("dog above cat", cfg.max_text_len), cfg.max_text_len);
  const auto b = encode_text(enc, tok.tokenize("dog above cat", cfg.max_text_len), cfg.max_text_len);
  const auto c = encode_text(enc, tok.tokenize("cat above dog", cfg.max_text_len), cfg.max_text_len);
  EXPECT_EQ(a.layout, TokenLayout::text);
  EXPECT_EQ(a.length(), cfg.max_text_len);
  EXPECT_EQ(a.cls().size(0), cfg.embed_dim);
  EXPECT_TRUE(tensors_equal(a.tokens, b.tokens));
  EXPECT_GT((a.cls() - c.cls()).norm().item<double>(), 0.0);
  EXPECT_TRUE(torch::isfinite(a.tokens).all().item<bool>());
}

TEST(TextEncoder, RejectsBadIds) {
  auto cfg = tiny_config();
  TextEncoder enc(cfg);
  std::vector<std::int64_t> ids(cfg.max_text_len, 0);
  ids[1] = cfg.vocab_size;
  EXPECT_THROW(encode_text(enc, ids, cfg.max_text_len), Error);
  EXPECT_THROW(encode_text(enc, std::vector<std::int64_t>(3, 0), cfg.max_text_len), Error);
}

TEST(VisionEncoder, SketchGridLengthAtPaperPatching) {
  torch::manual_seed(0);
  const auto cfg = paper_patch_config();
  VisionEncoder enc(cfg, 1);
  enc->eval();
  SketchRaster zeros{GrayImage(224, 224, 0.0f), "", SketchSource::file};
  SketchRaster ones{GrayImage(224, 224, 1.0f), "", SketchSource::file};
  const auto a = encode_sketch(enc, zeros, 224);
  EXPECT_EQ(a.length(), 1 + 196);
  EXPECT_EQ(a.grid_side, 14);
  EXPECT_EQ(a.layout, TokenLayout::vision);
  EXPECT_FALSE(torch::allclose(a.cls(), encode_sketch(enc, ones, 224).cls()));
  EXPECT_TRUE(tensors_equal(a.tokens, encode_sketch(enc, zeros, 224).tokens));
  SketchRaster wrong{GrayImage(100, 100, 0.0f), "", SketchSource::file};
  EXPECT_THROW(encode_sketch(enc, wrong, 224), Error);
}

TEST(VisionEncoder, ImagesAreResizedAndDistinguished) {
  torch::manual_seed(0);
  auto cfg = tiny_config();
  VisionEncoder enc(cfg, 3);
  enc->eval();
  const auto big = encode_image(enc, random_image(64, 1), cfg.image_size);
  EXPECT_EQ(big.length(), 1 + cfg.grid_side() * cfg.grid_side());
  EXPECT_EQ(big.grid_side, cfg.grid_side());
  EXPECT_EQ(enc->grid_side(), cfg.grid_side());
  int distinct = 0;
  for (int i = 0; i < 100; ++i) {
    const auto x = encode_image(enc, random_image(cfg.image_size, 100 + 2 * i), cfg.image_size);
    const auto y = encode_image(enc, random_image(cfg.image_size, 101 + 2 * i), cfg.image_size);
    distinct += !torch::equal(x.tokens, y.tokens);
  }
  EXPECT_EQ(distinct, 100);
  EXPECT_THROW(encode_image(enc, RgbImage(), cfg.image_size), Error);
}

TEST(VisionEncoder, FitSketchResizesOnlyWhenNeeded) {
  GrayImage g(64, 64, 0.25f);
  EXPECT_EQ(fit_sketch(g, 64), g);
  const auto small = fit_sketch(g, 32);
  EXPECT_EQ(small.height, 32);
  EXPECT_NEAR(small.at(3, 3), 0.25f, 1e-6);
  EXPECT_THROW(fit_sketch(GrayImage(), 32), Error);
  EXPECT_EQ(fitted_sketch_tensor(g, 32).sizes(), (std::vector<std::int64_t>{1, 1, 32, 32}));
}

TEST(Encoders, EvalModeIsPure) {
  torch::manual_seed(3);
  auto cfg = tiny_config();
  STNet net(cfg);
  net->eval();
  auto ids = torch::randint(2, 500, {2, cfg.max_text_len}, torch::kLong);
  auto images = torch::rand({2, 3, cfg.image_size, cfg.image_size});
  auto first = net->image_tokens(images);
  net->text_embedding(ids);
  EXPECT_TRUE(tensors_equal(first, net->image_tokens(images)));
}

TEST(Encoders, EveryParameterReceivesGradient) {
  torch::manual_seed(5);
  auto cfg = tiny_config();
  STNet net(cfg);
  net->train();
  TrainingBatch batch;
  batch.text_ids = torch::randint(2, 500, {3, cfg.max_text_len}, torch::kLong);
  batch.sketches = torch::rand({3, 1, cfg.image_size, cfg.image_size});
  batch.images = torch::rand({3, 3, cfg.image_size, cfg.image_size});
  batch.labels = torch::tensor({0, 1, 2}, torch::kLong);
  batch.boxes = {{0.1, 0.1, 0.3, 0.4}, {0.5, 0.2, 0.3, 0.3}, {0.2, 0.6, 0.5, 0.3}};
  compute_losses(net, batch, Modality::sketch_text, all_losses()).total.backward();
  for (const auto& p : net->named_parameters()) {
    ASSERT_TRUE(p.value().grad().defined()) << p.key();
    EXPECT_GT(p.value().grad().abs().sum().item<double>(), 0.0) << p.key();
  }
}

TEST(Pretrain, ZeroEpochsReturnsInitialization) {
  auto cfg = tiny_config();
  auto corpus = generate_synthetic(cstbir::testing::small_synthetic(3, 24, 3));
  std::vector<SketchRaster> sketches;
  for (const auto& [id, s] : corpus.sketches) sketches.push_back(s);
  PretrainConfig opt;
  opt.epochs = 0;
  opt.seed = 4;
  const auto a = pretrain_sketch_classifier(sketches, cfg, opt);
  torch::manual_seed(4);
  SketchClassifier fresh(cfg, static_cast<int>(a.categories.size()));
  const auto pa = a.model->parameters(), pf = fresh->parameters();
  ASSERT_EQ(pa.size(), pf.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(tensors_equal(pa[i], pf[i]));
  EXPECT_TRUE(a.history.empty());
}

TEST(Pretrain, RejectsDegenerateData) {
  auto cfg = tiny_config();
  const GrayImage blank(32, 32, 0.5f);
  std::vector<SketchRaster> one_class = {{blank, "a", SketchSource::file}, {blank, "a", SketchSource::file}};
  EXPECT_THROW(pretrain_sketch_classifier(one_class, cfg, {}), Error);
  std::vector<SketchRaster> thin = {{blank, "a", SketchSource::file}, {blank, "a", SketchSource::file},
                                    {blank, "b", SketchSource::file}};
  EXPECT_THROW(pretrain_sketch_classifier(thin, cfg, {}), Error);
}

TEST(Pretrain, FourClassesLearnAboveChanceAndLossDescends) {
  auto cfg = tiny_config();
  cfg.image_size = 64;
  cfg.patch_size = 8;
  cfg.embed_dim = 32;
  cfg.heads = 4;
  auto syn = cstbir::testing::small_synthetic(4, 600, 4, 11);
  syn.canvas_size = 64;
  const auto corpus = generate_synthetic(syn);
  std::vector<SketchRaster> sketches;
  for (const auto& [id, s] : corpus.sketches) sketches.push_back(s);
  double descended = 0;
  double last_accuracy = 0;
  for (std::uint64_t seed : {11, 12, 13}) {
    PretrainConfig opt;
    opt.epochs = 5;
    opt.seed = seed;
    const auto r = pretrain_sketch_classifier(sketches, cfg, opt);
    ASSERT_EQ(r.history.size(), 5u);
    descended += r.initial_loss - r.history[0].loss;
    if (seed == 11) last_accuracy = r.history.back().accuracy;
  }
  EXPECT_GT(descended / 3, 0.0);
  EXPECT_GT(last_accuracy, 0.8);
}
