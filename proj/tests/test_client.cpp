#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "rcsr/client.hpp"
#include "test_util.hpp"

namespace rcsr {
namespace {

struct Fixture {
  EncoderConfig mcfg;
  FrozenBackbone backbone;
  TrainableParams theta;
  GlobalPrototypes protos;
  SyntheticDataset data;

  explicit Fixture(std::uint64_t seed = 0) {
    backbone = FrozenBackbone::create(mcfg, seed + 1);
    theta = init_params(mcfg, seed + 2);
    DataConfig dcfg;
    dcfg.per_class = 3;
    data = generate_dataset(dcfg, seed + 3).train;
    protos.image = compute_prototype(encode(theta, backbone, data.image, Modality::image));
    protos.text = compute_prototype(encode(theta, backbone, data.text, Modality::text));
  }

  ClientState client(ModalityType type, std::size_t n, std::size_t id = 0) const {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    ClientState c;
    c.id = id;
    c.type = type;
    c.train = subset(data, idx);
    return c;
  }
};

LocalTrainConfig config(double lr, std::size_t batch = 8) {
  LocalTrainConfig c;
  c.lr = lr;
  c.batch_size = batch;
  return c;
}

TEST(LocalTrain, ZeroLearningRateLeavesParamsBitwise) {
  const Fixture f;
  for (ModalityType type : {ModalityType::paired, ModalityType::image_only, ModalityType::text_only}) {
    const ClientState c = f.client(type, 20);
    const LocalTrainResult r = local_train(f.theta, c, f.backbone, f.protos, config(0.0), 5);
    EXPECT_TRUE(r.theta == f.theta);
    ASSERT_FALSE(r.step_losses.empty());
    // Every step sees the initial parameters, so the first batch's loss is the initial loss.
    Rng rng(5);
    const auto batches = epoch_batches(c.num_samples(), 8, rng);
    const double initial = client_loss(make_batch(c, batches[0]), type, f.protos, f.theta, f.theta,
                                       f.backbone, config(0.0).loss);
    EXPECT_EQ(r.step_losses[0], initial);
  }
}

TEST(LocalTrain, BatchCoveringDatasetTakesOneStep) {
  const Fixture f;
  const ClientState c = f.client(ModalityType::paired, 12);
  const LocalTrainResult r = local_train(f.theta, c, f.backbone, f.protos, config(1e-3, 32), 1);
  EXPECT_EQ(r.steps, 1u);
  EXPECT_EQ(r.step_losses.size(), 1u);
}

TEST(LocalTrain, StepCountFollowsBatching) {
  const Fixture f;
  const ClientState c = f.client(ModalityType::paired, 20);
  const LocalTrainResult r = local_train(f.theta, c, f.backbone, f.protos, config(1e-3, 8), 1);
  EXPECT_EQ(r.steps, 3u);  // 8 + 8 + 4
}

TEST(LocalTrain, SameSeedIsBitIdentical) {
  const Fixture f;
  const ClientState c = f.client(ModalityType::text_only, 30);
  const LocalTrainResult a = local_train(f.theta, c, f.backbone, f.protos, config(1e-2), 42);
  const LocalTrainResult b = local_train(f.theta, c, f.backbone, f.protos, config(1e-2), 42);
  EXPECT_TRUE(a.theta == b.theta);
  EXPECT_EQ(a.step_losses, b.step_losses);
  EXPECT_FALSE(a.theta == f.theta);
}

TEST(LocalTrain, SingleModalityNeverEvaluatesContrastiveLoss) {
  const Fixture f;
  for (ModalityType type : {ModalityType::image_only, ModalityType::text_only}) {
    const LocalTrainResult r = local_train(f.theta, f.client(type, 30), f.backbone, f.protos, config(1e-2), 3);
    EXPECT_EQ(r.nce_evaluations, 0u);
    EXPECT_EQ(r.anchor_evaluations, r.steps);
  }
  const LocalTrainResult p = local_train(f.theta, f.client(ModalityType::paired, 30), f.backbone, f.protos,
                                         config(1e-2), 3);
  EXPECT_EQ(p.nce_evaluations, p.steps);
  EXPECT_EQ(p.anchor_evaluations, 0u);
}

TEST(LocalTrain, ReportedLossIsMeanOfSteps) {
  const Fixture f;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const LocalTrainResult r =
        local_train(f.theta, f.client(ModalityType::paired, 40), f.backbone, f.protos, config(1e-2), seed);
    double mean = 0.0;
    for (double l : r.step_losses) mean += l;
    mean /= static_cast<double>(r.step_losses.size());
    EXPECT_TRUE(std::isfinite(r.mean_loss));
    EXPECT_NEAR(r.mean_loss, mean, 1e-12);
  }
}

TEST(LocalTrain, EmptyClientIsSkippedExplicitly) {
  const Fixture f;
  const LocalTrainResult r = local_train(f.theta, f.client(ModalityType::paired, 0), f.backbone, f.protos,
                                         config(1e-2), 0);
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(r.steps, 0u);
}

TEST(Prototype, RowsEqualToUReturnU) {
  const std::vector<double> u{0.6, 0.0, -0.8};
  Tensor z(5, 3);
  for (std::size_t r = 0; r < 5; ++r) std::copy(u.begin(), u.end(), z.row(r).begin());
  const auto p = compute_prototype(z);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], u[i], 1e-15);
}

TEST(Prototype, AntipodalRowsAreDegenerate) {
  const Tensor z = Tensor::from_rows({{1, 0}, {-1, 0}});
  EXPECT_THROW(compute_prototype(z), DegeneratePrototype);
}

TEST(Prototype, MatchesMeanThenNormalizeOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor z = test::random_unit_rows(8, 4, rng);
    std::vector<double> mean(4, 0.0);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 4; ++c) mean[c] += z(r, c) / 8.0;
    const double n = std::sqrt(mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2] + mean[3] * mean[3]);
    const auto p = compute_prototype(z);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(p[c], mean[c] / n, 1e-12);
  }
}

TEST(Statistics, PairedClientComputesBothSlots) {
  const Fixture f;
  const ClientState c = f.client(ModalityType::paired, 20);
  const LocalTrainResult r = local_train(f.theta, c, f.backbone, f.protos, config(1e-2), 1);
  const ClientStatistics s = build_statistics(c, r.theta, f.theta, f.backbone, f.protos, r.mean_loss, r.steps, {});
  EXPECT_EQ(s.mask, (std::array<bool, 2>{true, true}));
  EXPECT_EQ(s.p_image, compute_prototype(encode(r.theta, f.backbone, c.train.image, Modality::image)));
  EXPECT_EQ(s.p_text, compute_prototype(encode(r.theta, f.backbone, c.train.text, Modality::text)));
  EXPECT_NEAR(l2_norm(s.p_image), 1.0, 1e-12);
}

TEST(Statistics, MissingSlotHoldsBroadcastPrototypeBitwise) {
  const Fixture f;
  const ClientState img = f.client(ModalityType::image_only, 20);
  const LocalTrainResult r = local_train(f.theta, img, f.backbone, f.protos, config(1e-2), 1);
  const ClientStatistics s = build_statistics(img, r.theta, f.theta, f.backbone, f.protos, r.mean_loss, r.steps, {});
  EXPECT_EQ(s.mask, (std::array<bool, 2>{true, false}));
  EXPECT_EQ(s.p_text, f.protos.text);

  const ClientState txt = f.client(ModalityType::text_only, 20);
  const ClientStatistics t = build_statistics(txt, f.theta, f.theta, f.backbone, f.protos, 1.0, 1, {});
  EXPECT_EQ(t.mask, (std::array<bool, 2>{false, true}));
  EXPECT_EQ(t.p_image, f.protos.image);
}

TEST(Statistics, UnchangedParamsGiveZeroGeometry) {
  const Fixture f;
  const ClientState c = f.client(ModalityType::paired, 10);
  const std::vector<double> prev(flatten(f.theta).size(), 0.5);
  const ClientStatistics s = build_statistics(c, f.theta, f.theta, f.backbone, f.protos, 1.0, 3, prev);
  EXPECT_EQ(s.gamma.as_array(), (std::array<double, 4>{0.0, 0.0, 0.0, 0.0}));
}

TEST(Statistics, IsAPureFunctionOfItsInputs) {
  const Fixture f;
  const ClientState c = f.client(ModalityType::paired, 20);
  const LocalTrainResult r = local_train(f.theta, c, f.backbone, f.protos, config(1e-2), 1);
  const auto prev = flatten(delta(r.theta, f.theta));
  const ClientStatistics a = build_statistics(c, r.theta, f.theta, f.backbone, f.protos, r.mean_loss, r.steps, prev);
  const ClientStatistics b = build_statistics(c, r.theta, f.theta, f.backbone, f.protos, r.mean_loss, r.steps, prev);
  EXPECT_EQ(a.p_image, b.p_image);
  EXPECT_EQ(a.gamma.as_array(), b.gamma.as_array());
  EXPECT_NEAR(a.gamma.cos_prev, 1.0, 1e-12);
}

TEST(Geometry, ComponentsByHand) {
  const std::vector<double> d{3.0, -4.0};
  const std::vector<double> prev{0.0, 1.0};
  const UpdateGeometry g = update_geometry(d, prev, 2);
  EXPECT_DOUBLE_EQ(g.l2, 5.0);
  EXPECT_DOUBLE_EQ(g.max_abs, 4.0);
  EXPECT_NEAR(g.cos_prev, -0.8, 1e-15);
  EXPECT_DOUBLE_EQ(g.per_step, 2.5);
  EXPECT_EQ(update_geometry(d, {}, 2).cos_prev, 0.0);
  EXPECT_THROW(update_geometry(d, std::vector<double>{1.0}, 2), std::invalid_argument);
}

TEST(Geometry, InvariantsOnRandomDeltas) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor d = test::random_tensor(1, 12, rng);
    const Tensor p = test::random_tensor(1, 12, rng);
    const UpdateGeometry g = update_geometry(d.values(), p.values(), 1 + trial % 5);
    EXPECT_GE(g.l2, 0.0);
    EXPECT_GE(g.max_abs, 0.0);
    EXPECT_GE(g.per_step, 0.0);
    EXPECT_GE(g.cos_prev, -1.0);
    EXPECT_LE(g.cos_prev, 1.0);
  }
}

}  // namespace
}  // namespace rcsr
