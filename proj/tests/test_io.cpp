#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "rcsr/config.hpp"
#include "rcsr/io.hpp"
#include "test_util.hpp"

namespace rcsr {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "rcsr_test_io";
  fs::create_directories(dir);
  return dir / name;
}

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

TrainingConfig tiny_config(AggregationMode mode = AggregationMode::rcsr_p) {
  TrainingConfig c;
  c.data.per_class = 12;
  c.data.test_per_class = 5;
  c.data.num_classes = 6;
  c.rounds = 6;
  c.warmup_rounds = 2;
  c.personalize_from = 3;
  c.eval_every = 3;
  c.num_clients = 6;
  c.router.hidden = 16;
  c.mode = mode;
  return c;
}

// --- config ------------------------------------------------------------------------

TEST(Config, JsonRoundTripIsExact) {
  TrainingConfig c = tiny_config();
  c.seed = 1234567890123ull;
  c.lr = 3.3e-4;
  c.fairness.zscore = true;
  c.router_loss.mask_filled = true;
  const json j = config_to_json(c);
  const TrainingConfig back = config_from_json(j);
  EXPECT_EQ(config_to_json(back), j);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.lr, c.lr);
  EXPECT_EQ(back.personalize_from, c.personalize_from);
}

TEST(Config, EmptyObjectGivesDefaults) {
  EXPECT_EQ(config_to_json(config_from_json(json::object())), config_to_json(TrainingConfig{}));
}

TEST(Config, DefaultHyperparameters) {
  const TrainingConfig c = config_from_json(json::object());
  EXPECT_EQ(c.loss.lambda_align, 0.1);
  EXPECT_EQ(c.loss.lambda_prox, 0.01);
  EXPECT_EQ(c.loss.lambda_anchor, 1.0);
  EXPECT_EQ(c.loss.tau_nce, 0.07);
  EXPECT_EQ(c.router_loss.beta_image, 1.0);
  EXPECT_EQ(c.router_loss.beta_text, 1.0);
  EXPECT_EQ(c.router_loss.beta_entropy, 0.2);
  EXPECT_EQ(c.router_loss.beta_align, 0.3);
  EXPECT_EQ(c.fairness.tau_fair, 0.1);
  EXPECT_EQ(c.fairness.eta_q, 0.1);
  EXPECT_EQ(c.proto_momentum, 0.9);
  EXPECT_EQ(c.warmup_rounds, 20u);
}

TEST(Config, NullPersonalizeFromMeansHalfway) {
  json j = config_to_json(tiny_config());
  j["federation"]["personalize_from"] = nullptr;
  EXPECT_EQ(config_from_json(j).personalization_round(), 3u);
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(message_of([] { config_from_json(json{{"training", {{"bogus", 1}}}}); }), "training.bogus: unknown key");
  EXPECT_EQ(message_of([] { config_from_json(json{{"federation", {{"rounds", -3}}}}); }),
            "federation.rounds: expected a non-negative integer");
  EXPECT_EQ(message_of([] { config_from_json(json{{"router", {{"lr", "fast"}}}}); }), "router.lr: expected a number");
  EXPECT_EQ(message_of([] { config_from_json(json{{"fairness", {{"enabled", 1}}}}); }),
            "fairness.enabled: expected true or false");
  EXPECT_EQ(message_of([] { config_from_json(json{{"model", 3}}); }), "model: expected an object");
  EXPECT_NE(message_of([] { config_from_json(json{{"mode", "fedsgd"}}); }).find("mode: unknown aggregation mode"),
            std::string::npos);
}

TEST(Config, ValidationRunsAfterParsing) {
  EXPECT_THROW(config_from_json(json{{"federation", {{"participation", 0.0}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"federation", {{"rounds", 5}, {"warmup_rounds", 6}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"workers", 0}}), ConfigError);
}

TEST(Config, RawDimensionsFollowTheData) {
  const TrainingConfig c = config_from_json(json{{"data", {{"raw_dim_image", 10}, {"raw_dim_text", 7}}},
                                                 {"model", {{"embed_dim", 12}}}});
  EXPECT_EQ(c.model.raw_dim_image, 10u);
  EXPECT_EQ(c.model.raw_dim_text, 7u);
  EXPECT_EQ(c.router.embed_dim, 12u);
}

TEST(Config, LoadConfigPrefixesThePath) {
  const fs::path missing = scratch("does_not_exist.json");
  fs::remove(missing);
  const std::string m = message_of([&] { load_config(missing.string()); });
  EXPECT_EQ(m.rfind(missing.string(), 0), 0u) << m;

  const fs::path bad = scratch("bad.json");
  std::ofstream(bad) << "{\"seed\": ";
  EXPECT_NE(message_of([&] { load_config(bad.string()); }).find("invalid JSON"), std::string::npos);

  const fs::path wrong = scratch("wrong.json");
  std::ofstream(wrong) << R"({"training": {"lr": -1}})";
  const std::string w = message_of([&] { load_config(wrong.string()); });
  EXPECT_EQ(w.rfind(wrong.string() + ": ", 0), 0u) << w;
}

// --- container ---------------------------------------------------------------------

TEST(Container, RoundTripIsBitwise) {
  Rng rng(1);
  Container c;
  c.meta = {{"kind", "test"}, {"x", 0.1}};
  c.add("a", test::random_tensor(3, 4, rng));
  c.add("empty", Tensor(0, 5));
  c.add("b", Tensor::row_vector(std::vector<double>{-0.0, 1e-310, 1.0 / 3.0}));
  const fs::path p = scratch("container.bin");
  write_container(p.string(), c);
  const Container back = read_container(p.string());
  EXPECT_EQ(back.meta, c.meta);
  ASSERT_EQ(back.sections.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.sections[i].first, c.sections[i].first);
    EXPECT_EQ(std::memcmp(back.sections[i].second.values().data(), c.sections[i].second.values().data(),
                          c.sections[i].second.size() * sizeof(double)),
              0);
  }
  EXPECT_TRUE(std::signbit(back.get("b")[0]));
}

TEST(Container, LayoutStartsWithMagicAndLength) {
  Container c;
  c.add("v", Tensor::row_vector(std::vector<double>{2.5}));
  const fs::path p = scratch("layout.bin");
  write_container(p.string(), c);
  std::ifstream in(p, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(bytes.substr(0, 8), "RCSRPARM");
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 4);
  const json header = json::parse(bytes.substr(12, len));
  EXPECT_EQ(header["sections"][0]["name"], "v");
  EXPECT_EQ(bytes.size(), 12u + len + sizeof(double));
  double v = 0.0;
  std::memcpy(&v, bytes.data() + 12 + len, sizeof v);
  EXPECT_EQ(v, 2.5);
}

TEST(Container, RejectsDamagedFiles) {
  const fs::path p = scratch("damaged.bin");
  std::ofstream(p, std::ios::binary) << "NOTMAGIC1234";
  EXPECT_THROW(read_container(p.string()), IoError);

  Container c;
  c.add("v", Tensor(2, 2, 1.0));
  write_container(p.string(), c);
  fs::resize_file(p, fs::file_size(p) - 3);
  EXPECT_THROW(read_container(p.string()), IoError);

  write_container(p.string(), c);
  std::ofstream(p, std::ios::binary | std::ios::app) << "x";
  EXPECT_THROW(read_container(p.string()), IoError);
  EXPECT_THROW(read_container(scratch("nothing_here.bin").string()), IoError);
  EXPECT_THROW(c.get("missing"), IoError);
}

// --- checkpoints -------------------------------------------------------------------

bool same_state(const ServerState& a, const ServerState& b) {
  return a.round == b.round && a.theta == b.theta && a.router == b.router && a.fairness.q == b.fairness.q &&
         a.fairness.group_mean == b.fairness.group_mean && a.fairness.group_seen == b.fairness.group_seen &&
         a.protos.image == b.protos.image && a.protos.text == b.protos.text && a.prev_update == b.prev_update &&
         a.loss_sum == b.loss_sum && a.loss_count == b.loss_count && a.adapters == b.adapters &&
         a.strengths == b.strengths;
}

TEST(Checkpoint, SaveLoadRestoresEveryField) {
  const TrainingConfig cfg = tiny_config();
  const Federation fed = build_federation(cfg);
  ServerState s = initial_state(fed);
  for (std::size_t t = 1; t <= 4; ++t) run_round(fed, s, t);
  ASSERT_FALSE(s.adapters.empty());
  const fs::path p = scratch("ckpt.bin");
  save_checkpoint(p.string(), cfg, s);
  EXPECT_TRUE(same_state(load_checkpoint(p.string(), cfg), s));
}

TEST(Checkpoint, ResumedRunMatchesUninterruptedRun) {
  const TrainingConfig cfg = tiny_config();
  const Federation fed = build_federation(cfg);
  ServerState s = initial_state(fed);
  const fs::path p = scratch("resume.bin");
  for (std::size_t t = 1; t <= 3; ++t) run_round(fed, s, t);
  save_checkpoint(p.string(), cfg, s);
  const TrainingResult straight = continue_training(fed, s);
  TrainingConfig more_workers = cfg;
  more_workers.workers = 4;
  const TrainingResult resumed = continue_training(fed, load_checkpoint(p.string(), more_workers));
  EXPECT_TRUE(same_state(straight.state, resumed.state));
}

TEST(Checkpoint, RejectsDifferentConfig) {
  const TrainingConfig cfg = tiny_config();
  const Federation fed = build_federation(cfg);
  const fs::path p = scratch("other.bin");
  save_checkpoint(p.string(), cfg, initial_state(fed));
  TrainingConfig other = cfg;
  other.loss.lambda_anchor = 0.5;
  EXPECT_THROW(load_checkpoint(p.string(), other), IoError);
  TrainingConfig reseeded = cfg;
  reseeded.seed = 9;
  EXPECT_THROW(load_checkpoint(p.string(), reseeded), IoError);
}

// --- dataset exchange --------------------------------------------------------------

TEST(DatasetFile, ExportImportRoundTrip) {
  DataConfig dc;
  dc.per_class = 4;
  const SyntheticDataset d = generate_dataset(dc, 17).train;
  const fs::path p = scratch("data.bin");
  export_dataset(p.string(), d, 17);
  const ImportedDataset back = import_dataset(p.string());
  EXPECT_EQ(back.seed, 17u);
  EXPECT_EQ(back.data.num_classes, d.num_classes);
  EXPECT_EQ(back.data.labels, d.labels);
  EXPECT_EQ(back.data.latents, d.latents);
  EXPECT_EQ(back.data.image, d.image);
  EXPECT_EQ(back.data.text, d.text);
  const json meta = read_container(p.string()).meta;
  EXPECT_EQ(meta["raw_dim_image"], dc.raw_dim_image);
  EXPECT_EQ(meta["raw_dim_text"], dc.raw_dim_text);
  EXPECT_EQ(meta["latent_dim"], dc.latent_dim);
}

TEST(DatasetFile, CheckpointIsNotADataset) {
  const TrainingConfig cfg = tiny_config();
  const fs::path p = scratch("not_data.bin");
  save_checkpoint(p.string(), cfg, initial_state(build_federation(cfg)));
  EXPECT_THROW(import_dataset(p.string()), IoError);
}

}  // namespace
}  // namespace rcsr
