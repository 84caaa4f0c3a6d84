#include "safm/tuning.hpp"

#include <cmath>

#include <gtest/gtest.h>

namespace safm {
namespace {

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.max_seq = 16;
  cfg.bottleneck = 4;
  cfg.base_vocab = 16;
  cfg.max_tasks = 4;
  return cfg;
}

StreamOptions small_data() {
  StreamOptions opts;
  opts.domain_size = 4;
  opts.x_len = 2;
  opts.train_n = 32;
  opts.valid_n = 8;
  opts.test_n = 8;
  return opts;
}

std::vector<std::vector<double>> adapter_weights(const AdapterStore& store, AdapterId id) {
  std::vector<std::vector<double>> out;
  for (const auto& p : store.get(id).parameters()) out.push_back(p->values);
  return out;
}

TEST(ReplayTargets, SharedAdapterSelectsPrior) {
  AdapterId a1{1}, a3{3}, a0{0}, a2{2}, a4{4};
  Route current{2, {std::nullopt, a1, a1, a3}};
  Route prior{1, {a0, a1, a2, a4}};
  EXPECT_EQ(replay_targets(current, {prior}), (std::vector<int>{1}));
}

TEST(ReplayTargets, AllNewRouteHasNoTargets) {
  AdapterId a5{5}, a6{6};
  Route current{3, {a5, a6}};
  Route prior1{1, {AdapterId{0}, AdapterId{1}}};
  Route prior2{2, {AdapterId{2}, std::nullopt}};
  EXPECT_TRUE(replay_targets(current, {prior1, prior2}).empty());
}

TEST(ReplayTargets, EverySharingPriorIncluded) {
  AdapterId a1{1};
  Route current{3, {a1, std::nullopt}};
  Route prior1{1, {a1, AdapterId{2}}};
  Route prior2{2, {a1, AdapterId{3}}};
  EXPECT_EQ(replay_targets(current, {prior1, prior2}), (std::vector<int>{1, 2}));
}

TEST(LayerwiseLoss, AllEmptyRouteIsExactlyZero) {
  auto h0 = Tensor::create({1, 2, 4});
  auto h1 = Tensor::create({1, 2, 4});
  auto h2 = Tensor::create({1, 2, 4});
  for (auto* t : {&h0, &h1, &h2}) {
    for (std::size_t i = 0; i < (*t)->values.size(); ++i) (*t)->values[i] = double(i) + 1.0;
  }
  Route route{1, {std::nullopt, std::nullopt}};
  auto loss = layerwise_loss({h0, h1, h2}, route);
  EXPECT_EQ(loss->values[0], 0.0);
}

TEST(LayerwiseLoss, SelfCosineSumsOnePerNonEmptyLayer) {
  auto h = Tensor::create({2, 3, 4});
  for (std::size_t i = 0; i < h->values.size(); ++i) h->values[i] = 0.1 * double(i) + 0.5;
  Route route{1, {AdapterId{0}, std::nullopt, AdapterId{1}}};
  auto loss = layerwise_loss({h, h, h, h}, route);
  // The cosine's 1e-8 epsilon keeps self-similarity marginally below 1.
  EXPECT_NEAR(loss->values[0], 2.0, 1e-7);
}

TEST(LayerwiseLoss, OrthogonalStatesContributeZero) {
  auto h0 = Tensor::create({1, 1, 4});
  auto h1 = Tensor::create({1, 1, 4});
  h0->values = {1.0, 0.0, 1.0, 0.0};
  h1->values = {0.0, 1.0, 0.0, -1.0};
  Route route{1, {AdapterId{0}}};
  auto loss = layerwise_loss({h0, h1}, route);
  EXPECT_NEAR(loss->values[0], 0.0, 1e-12);
}

TEST(LayerwiseLoss, BoundedByLayerCount) {
  Rng rng(5);
  auto h0 = Tensor::create({2, 2, 8});
  auto h1 = Tensor::create({2, 2, 8});
  auto h2 = Tensor::create({2, 2, 8});
  for (auto* t : {&h0, &h1, &h2}) {
    for (auto& v : (*t)->values) v = rng.normal(0.0, 1.0);
  }
  Route route{1, {AdapterId{0}, AdapterId{1}}};
  double v = layerwise_loss({h0, h1, h2}, route)->values[0];
  EXPECT_GE(v, -2.0);
  EXPECT_LE(v, 2.0);
}

TEST(LayerwiseLoss, TraceLengthMismatchThrows) {
  auto h = Tensor::create({1, 1, 4});
  Route route{1, {AdapterId{0}, AdapterId{1}}};
  EXPECT_THROW(layerwise_loss({h, h}, route), std::invalid_argument);
}

// Shared fixture: a small model fine-tuned on one task so it can emit
// well-formed samples for replay.
struct TunedTask {
  ModelConfig cfg = small_cfg();
  BackboneParams backbone;
  AdapterStore store;
  Route route;
  TaskData data;

  explicit TunedTask(std::uint64_t seed, int epochs = 20)
      : backbone(), store(cfg.width, cfg.bottleneck) {
    Rng rng_model(mix_seed(seed, 1));
    backbone = BackboneParams::init(cfg, rng_model);
    Rng rng(mix_seed(seed, 2));
    route = Route{1, {store.new_adapter(1, 1, rng), store.new_adapter(2, 1, rng)}};
    store.register_route(route);
    auto stream = make_similar_stream(cfg, 1, seed, small_data());
    data = materialize(stream.specs[0]);
    TuneConfig tcfg;
    tcfg.epochs = epochs;
    tcfg.w_lw = 0.0;
    tcfg.replay_ratio = 0.0;
    tune(backbone, cfg, store, route, data.train, {}, tcfg, /*backbone_trainable=*/true, rng);
  }
};

TEST(GeneratePseudoSamples, ExactCountAndWellFormed) {
  TunedTask t(1);
  Rng rng(11);
  SamplingConfig sampling{3, 1.0, true};
  bool degraded = true;
  auto samples = generate_pseudo_samples(t.backbone, t.cfg, t.store, t.route, 1, 16, sampling,
                                         rng, &degraded);
  EXPECT_FALSE(degraded);
  ASSERT_EQ(samples.size(), 16u);
  for (const auto& s : samples) {
    EXPECT_EQ(s.task, 1);
    EXPECT_FALSE(s.x.empty());
    EXPECT_FALSE(s.y.empty());
    // Round-trips through the sample grammar: one SEP, task token, EOS.
    auto parsed = parse_sample(t.cfg, encode_sample(t.cfg, s));
    ASSERT_TRUE(parsed.has_value());
    EXPECT_EQ(parsed->x, s.x);
  }
}

TEST(GeneratePseudoSamples, ZeroCountIsEmpty) {
  TunedTask t(1, /*epochs=*/0);
  Rng rng(11);
  bool degraded = true;
  auto samples = generate_pseudo_samples(t.backbone, t.cfg, t.store, t.route, 1, 0,
                                         SamplingConfig{3, 1.0, true}, rng, &degraded);
  EXPECT_FALSE(degraded);
  EXPECT_TRUE(samples.empty());
}

TEST(GeneratePseudoSamples, UntrainedModelDegrades) {
  ModelConfig cfg = small_cfg();
  Rng rng_model(4);
  auto backbone = BackboneParams::init(cfg, rng_model);
  AdapterStore store(cfg.width, cfg.bottleneck);
  Route empty{1, {std::nullopt, std::nullopt}};
  store.register_route(empty);
  Rng rng(4);
  bool degraded = false;
  // Greedy decoding from an untrained model loops on one token and never
  // produces the [task, x, SEP, y, EOS] grammar.
  auto samples = generate_pseudo_samples(backbone, cfg, store, empty, 1, 8,
                                         SamplingConfig{0, 1.0, false}, rng, &degraded);
  EXPECT_TRUE(degraded);
  EXPECT_TRUE(samples.empty());
}

TEST(Tune, UpdatesRouteAdaptersOnly) {
  ModelConfig cfg = small_cfg();
  Rng rng_model(6);
  auto backbone = BackboneParams::init(cfg, rng_model);
  AdapterStore store(cfg.width, cfg.bottleneck);
  Rng rng(6);
  AdapterId off_route = store.new_adapter(1, 1, rng);
  store.register_route({1, {off_route, std::nullopt}});
  AdapterId reused = store.new_adapter(2, 1, rng);
  Route route{2, {store.new_adapter(1, 2, rng), reused}};
  store.register_route(route);

  auto off_before = adapter_weights(store, off_route);
  auto reused_before = adapter_weights(store, reused);
  std::vector<std::vector<double>> backbone_before;
  for (const auto& p : backbone.parameters()) backbone_before.push_back(p->values);

  auto stream = make_similar_stream(cfg, 2, 6, small_data());
  auto data = materialize(stream.specs[1]);
  TuneConfig tcfg;
  tcfg.epochs = 1;
  tune(backbone, cfg, store, route, data.train, {}, tcfg, /*backbone_trainable=*/false, rng);

  EXPECT_EQ(adapter_weights(store, off_route), off_before);
  EXPECT_NE(adapter_weights(store, reused), reused_before);
  auto params = backbone.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(params[i]->values, backbone_before[i]) << "backbone tensor " << i;
  }
}

TEST(Tune, BackboneTrainableFlagUpdatesBackbone) {
  ModelConfig cfg = small_cfg();
  Rng rng_model(6);
  auto backbone = BackboneParams::init(cfg, rng_model);
  AdapterStore store(cfg.width, cfg.bottleneck);
  Rng rng(6);
  Route route{1, {store.new_adapter(1, 1, rng), store.new_adapter(2, 1, rng)}};
  store.register_route(route);
  auto tok_before = backbone.tok_emb->values;
  auto stream = make_similar_stream(cfg, 1, 6, small_data());
  auto data = materialize(stream.specs[0]);
  TuneConfig tcfg;
  tcfg.epochs = 1;
  tune(backbone, cfg, store, route, data.train, {}, tcfg, /*backbone_trainable=*/true, rng);
  EXPECT_NE(backbone.tok_emb->values, tok_before);
}

TEST(Tune, DeterministicPerSeedAndSensitiveToWlw) {
  auto run = [](double w_lw) {
    ModelConfig cfg = small_cfg();
    Rng rng_model(8);
    auto backbone = BackboneParams::init(cfg, rng_model);
    AdapterStore store(cfg.width, cfg.bottleneck);
    Rng rng(8);
    Route route{1, {store.new_adapter(1, 1, rng), store.new_adapter(2, 1, rng)}};
    store.register_route(route);
    auto stream = make_similar_stream(cfg, 1, 8, small_data());
    auto data = materialize(stream.specs[0]);
    TuneConfig tcfg;
    tcfg.epochs = 2;
    tcfg.w_lw = w_lw;
    tune(backbone, cfg, store, route, data.train, {}, tcfg, false, rng);
    std::vector<double> out;
    for (const auto& e : route.entries) {
      for (const auto& p : store.get(*e).parameters()) {
        out.insert(out.end(), p->values.begin(), p->values.end());
      }
    }
    return out;
  };
  EXPECT_EQ(run(0.0), run(0.0));
  EXPECT_NE(run(0.0), run(0.4));
}

TEST(Tune, LogRowsPerEpochWithReplayCount) {
  TunedTask t(2, /*epochs=*/4);
  Rng rng(13);
  // Rehearse task 1's own samples as stand-in pseudo data.
  std::map<int, std::vector<Sample>> replay;
  replay[1] = {t.data.train.begin(), t.data.train.begin() + 6};
  TuneConfig tcfg;
  tcfg.epochs = 3;
  std::vector<TrainLogRow> log;
  tune(t.backbone, t.cfg, t.store, t.route, t.data.train, replay, tcfg, true, rng, &log);
  ASSERT_EQ(log.size(), 3u);
  for (int e = 0; e < 3; ++e) {
    EXPECT_EQ(log[e].task, 1);
    EXPECT_EQ(log[e].epoch, e + 1);
    EXPECT_EQ(log[e].stage, "tune");
    EXPECT_EQ(log[e].replay_samples, 6);
    EXPECT_TRUE(std::isfinite(log[e].ce_loss));
  }
}

TEST(Tune, NonFiniteLossAborts) {
  ModelConfig cfg = small_cfg();
  Rng rng_model(6);
  auto backbone = BackboneParams::init(cfg, rng_model);
  AdapterStore store(cfg.width, cfg.bottleneck);
  Rng rng(6);
  Route route{1, {store.new_adapter(1, 1, rng), std::nullopt}};
  store.register_route(route);
  store.get(route.entries[0].value()).parameters()[0]->values[0] =
      std::numeric_limits<double>::quiet_NaN();
  auto stream = make_similar_stream(cfg, 1, 6, small_data());
  auto data = materialize(stream.specs[0]);
  TuneConfig tcfg;
  tcfg.epochs = 1;
  EXPECT_THROW(tune(backbone, cfg, store, route, data.train, {}, tcfg, false, rng),
               std::runtime_error);
}

TEST(Tune, LayerwiseTermDrivesCosineDown) {
  int improved = 0;
  for (std::uint64_t seed : {21ULL, 22ULL, 23ULL}) {
    ModelConfig cfg = small_cfg();
    Rng rng_model(mix_seed(seed, 1));
    auto backbone = BackboneParams::init(cfg, rng_model);
    AdapterStore store(cfg.width, cfg.bottleneck);
    Rng rng(mix_seed(seed, 2));
    Route route{1, {store.new_adapter(1, 1, rng), store.new_adapter(2, 1, rng)}};
    store.register_route(route);
    StreamOptions opts = small_data();
    auto stream = make_dissimilar_stream(cfg, 1, seed, opts);  // copy task
    auto data = materialize(stream.specs[0]);
    TuneConfig tcfg;
    tcfg.epochs = 6;
    tcfg.w_lw = 0.4;
    std::vector<TrainLogRow> log;
    tune(backbone, cfg, store, route, data.train, {}, tcfg, false, rng, &log);
    if (log.back().lw_loss <= log.front().lw_loss) ++improved;
  }
  EXPECT_GE(improved, 2);
}

}  // namespace
}  // namespace safm
