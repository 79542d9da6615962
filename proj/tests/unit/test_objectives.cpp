#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cstbir/error.hpp"
#include "cstbir/objectives.hpp"
#include "support/gradcheck.hpp"

using namespace cstbir;

namespace {

torch::Tensor log_tau(double tau) { return torch::full({}, std::log(tau), torch::kDouble); }

// Straight-line symmetric InfoNCE over doubles.
double oracle_contrastive(const std::vector<std::vector<double>>& q, const std::vector<std::vector<double>>& v,
                          double tau) {
  const std::size_t n = q.size();
  auto unit = [](std::vector<double> x) {
    double s = 0;
    for (double e : x) s += e * e;
    for (double& e : x) e /= std::sqrt(s);
    return x;
  };
  std::vector<std::vector<double>> qn, vn;
  for (auto& r : q) qn.push_back(unit(r));
  for (auto& r : v) vn.push_back(unit(r));
  std::vector<std::vector<double>> sim(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < qn[i].size(); ++k) dot += qn[i][k] * vn[j][k];
      sim[i][j] = dot / tau;
    }
  }
  double rows = 0, cols = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double zr = 0, zc = 0;
    for (std::size_t j = 0; j < n; ++j) {
      zr += std::exp(sim[i][j]);
      zc += std::exp(sim[j][i]);
    }
    rows += std::log(zr) - sim[i][i];
    cols += std::log(zc) - sim[i][i];
  }
  return 0.5 * (rows + cols) / static_cast<double>(n);
}

std::vector<std::vector<double>> to_rows(const torch::Tensor& t) {
  std::vector<std::vector<double>> rows(t.size(0), std::vector<double>(t.size(1)));
  for (int i = 0; i < t.size(0); ++i) {
    for (int k = 0; k < t.size(1); ++k) rows[i][k] = t[i][k].item<double>();
  }
  return rows;
}

// Pixel-counting IoU oracle on a fine grid.
double grid_iou(const BoundingBox& a, const BoundingBox& b, int n = 2000) {
  long inter = 0, uni = 0;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double px = (x + 0.5) / n, py = (y + 0.5) / n;
      const bool ia = px >= a.x && px < a.x + a.w && py >= a.y && py < a.y + a.h;
      const bool ib = px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h;
      inter += ia && ib;
      uni += ia || ib;
    }
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

double sigmoid(double x) { return 1 / (1 + std::exp(-x)); }

}  // namespace

// ---- contrastive -------------------------------------------------------------------

TEST(Contrastive, SingletonIsExactlyZero) {
  EXPECT_EQ(contrastive_loss(torch::randn({1, 8}, torch::kDouble), torch::randn({1, 8}, torch::kDouble),
                             log_tau(0.07)).item<double>(), 0.0);
}

TEST(Contrastive, IdenticalRowsGiveLogN) {
  for (double tau : {0.01, 0.07, 1.0, 50.0}) {
    auto row = torch::randn({1, 8}, torch::kDouble);
    EXPECT_NEAR(contrastive_loss(row.repeat({4, 1}), row.repeat({4, 1}), log_tau(tau)).item<double>(),
                std::log(4.0), 1e-6);
  }
}

TEST(Contrastive, MatchesOracleOnRandomCases) {
  torch::manual_seed(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto q = torch::randn({3, 5}, torch::kDouble), v = torch::randn({3, 5}, torch::kDouble);
    const double tau = 0.05 + 0.1 * trial;
    EXPECT_NEAR(contrastive_loss(q, v, log_tau(tau)).item<double>(), oracle_contrastive(to_rows(q), to_rows(v), tau),
                1e-6);
  }
}

TEST(Contrastive, QueryDependentPoolingUsesDiagonalLayout) {
  torch::manual_seed(2);
  auto q = torch::randn({3, 4}, torch::kDouble), v = torch::randn({3, 4}, torch::kDouble);
  // [i, j] = image j pooled under query i; identical pools reduce to the [N, d] form.
  auto pooled = v.unsqueeze(0).expand({3, 3, 4}).contiguous();
  EXPECT_NEAR(contrastive_loss(q, pooled, log_tau(0.1)).item<double>(),
              contrastive_loss(q, v, log_tau(0.1)).item<double>(), 1e-12);
}

TEST(Contrastive, PermutationInvariance) {
  torch::manual_seed(3);
  auto q = torch::randn({6, 4}, torch::kDouble), v = torch::randn({6, 4}, torch::kDouble);
  auto perm = torch::randperm(6, torch::kLong);
  EXPECT_NEAR(contrastive_loss(q, v, log_tau(0.2)).item<double>(),
              contrastive_loss(q.index_select(0, perm), v.index_select(0, perm), log_tau(0.2)).item<double>(), 1e-10);
}

TEST(Contrastive, TemperatureIsClamped) {
  torch::manual_seed(4);
  auto q = torch::randn({3, 4}, torch::kDouble), v = torch::randn({3, 4}, torch::kDouble);
  EXPECT_DOUBLE_EQ(contrastive_loss(q, v, log_tau(1e-6)).item<double>(),
                   contrastive_loss(q, v, log_tau(kMinTemperature)).item<double>());
  EXPECT_DOUBLE_EQ(contrastive_loss(q, v, log_tau(1e6)).item<double>(),
                   contrastive_loss(q, v, log_tau(kMaxTemperature)).item<double>());
}

TEST(Contrastive, ZeroNormRowIsAnError) {
  auto q = torch::randn({2, 4}, torch::kDouble);
  auto v = torch::zeros({2, 4}, torch::kDouble);
  EXPECT_THROW(contrastive_loss(q, v, log_tau(0.07)), Error);
}

// ---- classification ----------------------------------------------------------------

TEST(Classification, ClosedForms) {
  EXPECT_NEAR(classification_loss(torch::zeros({258}, torch::kDouble), torch::tensor(17)).item<double>(),
              std::log(258.0), 1e-6);
  auto logits = torch::zeros({5}, torch::kDouble);
  logits[3] = 30;
  EXPECT_LT(classification_loss(logits, torch::tensor(3)).item<double>(), 1e-9);
  EXPECT_THROW(classification_loss(logits, torch::tensor(5)), Error);
  EXPECT_THROW(classification_loss(logits, torch::tensor(-1)), Error);
}

TEST(Classification, MatchesHandComputedSoftmax) {
  torch::manual_seed(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto logits = torch::randn({5}, torch::kDouble) * 3;
    const int label = trial % 5;
    double z = 0;
    for (int c = 0; c < 5; ++c) z += std::exp(logits[c].item<double>());
    EXPECT_NEAR(classification_loss(logits, torch::tensor(label)).item<double>(),
                std::log(z) - logits[label].item<double>(), 1e-8);
  }
}

// ---- IoU ----------------------------------------------------------------------------

TEST(Iou, ClosedFormsAndGridOracle) {
  const BoundingBox a{0, 0, 0.2, 0.2}, b{0.1, 0.1, 0.2, 0.2};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, {0.5, 0.5, 0.2, 0.2}), 0.0);
  EXPECT_NEAR(iou(a, b), grid_iou(a, b), 1e-3);
  EXPECT_NEAR(iou(a, b), 1.0 / 7.0, 1e-12);
}

TEST(Iou, SymmetricAndBounded) {
  std::mt19937 rng(6);
  std::uniform_real_distribution<double> u(0.0, 0.5), s(0.01, 0.5);
  for (int trial = 0; trial < 1000; ++trial) {
    const BoundingBox a{u(rng), u(rng), s(rng), s(rng)}, b{u(rng), u(rng), s(rng), s(rng)};
    const double v = iou(a, b);
    ASSERT_DOUBLE_EQ(v, iou(b, a));
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
}

// ---- detection ----------------------------------------------------------------------

namespace {

// Prediction grid that exactly encodes `gt` in its responsible cell.
DetectionGrid perfect_grid(const BoundingBox& gt, int label, int S, int B, int C) {
  auto v = torch::zeros({1, S, S, 5 * B + C}, torch::kDouble);
  const double cx = gt.x + gt.w / 2, cy = gt.y + gt.h / 2;
  const int col = static_cast<int>(cx * S), row = static_cast<int>(cy * S);
  auto cell = v[0][row][col];
  cell[0] = cx * S - col;
  cell[1] = cy * S - row;
  cell[2] = gt.w;
  cell[3] = gt.h;
  cell[4] = 1.0;
  cell[5 * B + label] = 1.0;
  return {v, S, B, C};
}

// Brute-force YOLO-v1 sum written from the definition, one image.
double oracle_detection(const torch::Tensor& cells, int S, int B, int C, const BoundingBox& gt, int label) {
  auto at = [&](int r, int c, int k) { return cells[r][c][k].item<double>(); };
  const double cx = gt.x + gt.w / 2, cy = gt.y + gt.h / 2;
  const int col = static_cast<int>(std::floor(cx * S)), row = static_cast<int>(std::floor(cy * S));
  int best = 0;
  double best_iou = -1;
  std::vector<double> ious;
  for (int k = 0; k < B; ++k) {
    const double px = (at(row, col, 5 * k) + col) / S, py = (at(row, col, 5 * k + 1) + row) / S;
    const double pw = at(row, col, 5 * k + 2), ph = at(row, col, 5 * k + 3);
    const BoundingBox pb{px - pw / 2, py - ph / 2, pw, ph};
    // Intersection and union from corner coordinates.
    const double ix = std::max(0.0, std::min(pb.x + pb.w, gt.x + gt.w) - std::max(pb.x, gt.x));
    const double iy = std::max(0.0, std::min(pb.y + pb.h, gt.y + gt.h) - std::max(pb.y, gt.y));
    const double v = ix * iy / (pw * ph + gt.w * gt.h - ix * iy);
    ious.push_back(v);
    if (v > best_iou) best_iou = v, best = k;
  }
  double loss = 0;
  const int o = 5 * best;
  loss += 5.0 * (std::pow(at(row, col, o) - (cx * S - col), 2) + std::pow(at(row, col, o + 1) - (cy * S - row), 2) +
                 std::pow(std::sqrt(at(row, col, o + 2)) - std::sqrt(gt.w), 2) +
                 std::pow(std::sqrt(at(row, col, o + 3)) - std::sqrt(gt.h), 2));
  loss += std::pow(at(row, col, o + 4) - ious[best], 2);
  for (int c = 0; c < C; ++c) loss += std::pow(at(row, col, 5 * B + c) - (c == label ? 1.0 : 0.0), 2);
  for (int r = 0; r < S; ++r) {
    for (int c = 0; c < S; ++c) {
      for (int k = 0; k < B; ++k) {
        if (r == row && c == col && k == best) continue;
        loss += 0.5 * std::pow(at(r, c, 5 * k + 4), 2);
      }
    }
  }
  return loss;
}

}  // namespace

TEST(Detection, PerfectPredictionIsZero) {
  const BoundingBox gt{0.3, 0.2, 0.25, 0.5};
  EXPECT_LT(detection_loss(perfect_grid(gt, 4, 7, 2, 258), {{{gt, 4}}}).item<double>(), 1e-9);
}

TEST(Detection, EmptyTargetsLeaveOnlyNoObjectTerm) {
  torch::manual_seed(7);
  auto v = torch::rand({1, 3, 3, 5 * 2 + 4}, torch::kDouble);
  const auto loss = detection_loss({v, 3, 2, 4}, {{}}).item<double>();
  double expect = 0;
  for (int k = 0; k < 2; ++k) expect += 0.5 * v.select(3, 5 * k + 4).pow(2).sum().item<double>();
  EXPECT_NEAR(loss, expect, 1e-12);
}

TEST(Detection, MatchesBruteForceReference) {
  torch::manual_seed(8);
  std::mt19937 rng(8);
  std::uniform_real_distribution<double> pos(0.0, 0.45), size(0.05, 0.5);
  for (int trial = 0; trial < 50; ++trial) {
    auto v = torch::cat({torch::rand({1, 2, 2, 5}, torch::kDouble) * 0.98 + 0.01,
                         torch::randn({1, 2, 2, 2}, torch::kDouble)}, 3);
    const BoundingBox gt{pos(rng), pos(rng), size(rng), size(rng)};
    const int label = trial % 2;
    EXPECT_NEAR(detection_loss({v, 2, 1, 2}, {{{gt, label}}}).item<double>(),
                oracle_detection(v[0], 2, 1, 2, gt, label), 1e-6);
  }
}

TEST(Detection, BatchAverageAndErrors) {
  torch::manual_seed(9);
  auto v = torch::rand({2, 2, 2, 7}, torch::kDouble);
  const BoundingBox a{0.1, 0.1, 0.2, 0.2}, b{0.5, 0.5, 0.3, 0.3};
  const double joint = detection_loss({v, 2, 1, 2}, {{{a, 0}}, {{b, 1}}}).item<double>();
  const double first = detection_loss({v.slice(0, 0, 1), 2, 1, 2}, {{{a, 0}}}).item<double>();
  const double second = detection_loss({v.slice(0, 1, 2), 2, 1, 2}, {{{b, 1}}}).item<double>();
  EXPECT_NEAR(joint, (first + second) / 2, 1e-12);
  EXPECT_THROW(detection_loss({v, 2, 1, 2}, {{{a, 0}}}), Error);
  EXPECT_THROW(detection_loss({v.slice(0, 0, 1), 2, 1, 2}, {{{{0.9, 0.9, 0.2, 0.2}, 0}}}), Error);
  EXPECT_THROW(detection_loss({v.slice(0, 0, 1), 2, 1, 2}, {{{a, 2}}}), Error);
}

TEST(Detection, CrossEntropyClassSwitch) {
  const BoundingBox gt{0.3, 0.2, 0.25, 0.5};
  auto grid = perfect_grid(gt, 1, 2, 1, 3);
  const double sq = detection_loss(grid, {{{gt, 1}}}).item<double>();
  DetectionLossOptions ce;
  ce.class_cross_entropy = true;
  const double with_ce = detection_loss(grid, {{{gt, 1}}}, ce).item<double>();
  // Class scores (0, 1, 0): squared error is 0, cross-entropy is -log softmax.
  EXPECT_LT(sq, 1e-12);
  EXPECT_NEAR(with_ce, std::log(2 + std::exp(1.0)) - 1.0, 1e-9);
}

// ---- reconstruction -----------------------------------------------------------------

TEST(Reconstruction, ClosedForms) {
  auto target = (torch::rand({1, 1, 16, 16}) > 0.5).to(torch::kDouble);
  auto logits = target * 60 - 30;
  EXPECT_LT(reconstruction_loss(logits, target).item<double>(), 1e-6);

  auto zeros = torch::zeros({1, 1, 16, 16}, torch::kDouble);
  EXPECT_NEAR(reconstruction_loss(zeros, target, 1.0, 0.0).item<double>(), std::log(2.0), 1e-9);
  EXPECT_NEAR(reconstruction_loss(zeros, torch::rand({1, 1, 16, 16}, torch::kDouble), 1.0, 0.0).item<double>(),
              std::log(2.0), 1e-9);
}

TEST(Reconstruction, DisjointMasksDiceClosedForm) {
  auto q = torch::zeros({1, 1, 4, 4}, torch::kDouble);
  q.slice(2, 0, 2).fill_(1.0);
  auto logits = torch::full({1, 1, 4, 4}, -60.0, torch::kDouble);
  logits.slice(2, 2, 4).fill_(60.0);
  const double sum_p = 8, sum_q = 8;
  EXPECT_NEAR(reconstruction_loss(logits, q, 0.0, 1.0).item<double>(), 1.0 - 1.0 / (sum_p + sum_q + 1.0), 1e-9);
}

TEST(Reconstruction, DecreasesTowardSaturation) {
  torch::manual_seed(10);
  auto base = torch::randn({2, 1, 8, 8}, torch::kDouble);
  auto target = (torch::sigmoid(base) > 0.5).to(torch::kDouble);
  double previous = INFINITY;
  for (double scale : {0.5, 1.0, 2.0, 4.0, 8.0, 16.0}) {
    const double v = reconstruction_loss(base * scale, target).item<double>();
    EXPECT_LT(v, previous);
    previous = v;
  }
}

TEST(Reconstruction, MatchesDirectFormula) {
  torch::manual_seed(11);
  auto logits = torch::randn({2, 1, 5, 5}, torch::kDouble);
  auto target = torch::rand({2, 1, 5, 5}, torch::kDouble);
  double bce = 0, dice = 0;
  for (int b = 0; b < 2; ++b) {
    double pq = 0, sp = 0, sq = 0;
    for (int i = 0; i < 25; ++i) {
      const double p = sigmoid(logits.flatten(1)[b][i].item<double>()), q = target.flatten(1)[b][i].item<double>();
      bce += -(q * std::log(p) + (1 - q) * std::log(1 - p));
      pq += p * q, sp += p, sq += q;
    }
    dice += 1 - (2 * pq + 1) / (sp + sq + 1);
  }
  EXPECT_NEAR(reconstruction_loss(logits, target, 0.7, 1.3).item<double>(), 0.7 * bce / 50 + 1.3 * dice / 2, 1e-9);
}

TEST(Reconstruction, Errors) {
  EXPECT_THROW(reconstruction_loss(torch::zeros({1, 1, 4, 4}), torch::zeros({1, 1, 4, 5})), Error);
  EXPECT_THROW(reconstruction_loss(torch::zeros({1, 1, 4, 4}), torch::full({1, 1, 4, 4}, 2.0)), Error);
}

// ---- total ---------------------------------------------------------------------------

TEST(Total, WeightedSum) {
  std::map<LossKind, torch::Tensor> parts;
  double v = 1;
  for (auto kind : all_losses()) parts[kind] = torch::full({}, v++, torch::kDouble);
  EXPECT_DOUBLE_EQ(total_loss(parts).total.item<double>(), 15.0);

  std::map<LossKind, double> only_ct{{LossKind::ct, 1.0}, {LossKind::cls_t, 0.0}, {LossKind::cls_i, 0.0},
                                     {LossKind::od, 0.0}, {LossKind::sr, 0.0}};
  EXPECT_DOUBLE_EQ(total_loss(parts, only_ct).total.item<double>(), 1.0);

  auto no_sr = parts;
  no_sr.erase(LossKind::sr);
  const auto bundle = total_loss(no_sr);
  EXPECT_DOUBLE_EQ(bundle.total.item<double>(), 10.0);
  EXPECT_EQ(bundle.l_sr.item<double>(), 0.0);
  EXPECT_FALSE(bundle.l_sr.requires_grad());

  EXPECT_THROW(total_loss(parts, {{LossKind::od, -1.0}}), Error);
}

TEST(Total, DisabledComponentsAreExactZerosWithoutGradient) {
  auto cfg = cstbir::testing::tiny_config();
  torch::manual_seed(12);
  STNet net(cfg);
  net->to(torch::kDouble);
  const auto batch = cstbir::testing::tiny_batch(cfg, 13);
  const auto bundle = compute_losses(net, batch, Modality::sketch_text, {LossKind::ct, LossKind::od});
  EXPECT_EQ(bundle.l_sr.item<double>(), 0.0);
  EXPECT_EQ(bundle.l_cls_t.item<double>(), 0.0);
  EXPECT_FALSE(bundle.l_sr.requires_grad());
  bundle.total.backward();
  for (const auto& p : net->decoder->parameters()) EXPECT_FALSE(p.grad().defined() && p.grad().abs().sum().item<double>() > 0);
  for (const auto& p : net->text_head->parameters()) EXPECT_FALSE(p.grad().defined() && p.grad().abs().sum().item<double>() > 0);
}

TEST(Total, EveryComponentNonNegativeAndFinite) {
  auto cfg = cstbir::testing::tiny_config();
  for (std::uint64_t seed : {1, 2, 3}) {
    torch::manual_seed(seed);
    STNet net(cfg);
    net->to(torch::kDouble);
    const auto bundle = compute_losses(net, cstbir::testing::tiny_batch(cfg, seed), Modality::sketch_text, all_losses());
    for (auto kind : all_losses()) {
      const double v = bundle.component(kind).item<double>();
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0);
    }
  }
}

// ---- gradients -----------------------------------------------------------------------

class LossGradient : public ::testing::TestWithParam<LossKind> {};

TEST_P(LossGradient, MatchesCentralDifferences) {
  const auto report = cstbir::testing::check_loss_gradients(GetParam(), 31);
  EXPECT_EQ(report.failures, 0u) << "worst relative error " << report.worst;
  std::size_t nonzero = 0;
  for (const auto& s : report.samples) nonzero += s.analytic != 0.0;
  EXPECT_GT(nonzero, 0u);
}

INSTANTIATE_TEST_SUITE_P(AllLosses, LossGradient,
                         ::testing::Values(LossKind::ct, LossKind::cls_t, LossKind::cls_i, LossKind::od, LossKind::sr),
                         [](const auto& info) { return to_string(info.param); });
