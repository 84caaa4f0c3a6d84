#include "safm/tasks.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

namespace safm {
namespace {

ModelConfig small_cfg() {
  ModelConfig cfg;
  return cfg;
}

TaskSpec spec_with(Pattern p, std::vector<int> domain, std::uint64_t seed = 7) {
  TaskSpec spec;
  spec.task = 1;
  spec.pattern = p;
  spec.domain = std::move(domain);
  spec.seed = seed;
  return spec;
}

TEST(PatternOutput, CopyIsIdentity) {
  auto spec = spec_with(Pattern::kCopy, {3, 7, 9});
  EXPECT_EQ(pattern_output(spec, {7, 3, 9}), (std::vector<int>{7, 3, 9}));
}

TEST(PatternOutput, SortAndReverse) {
  auto sorted = spec_with(Pattern::kSort, {3, 7, 9});
  EXPECT_EQ(pattern_output(sorted, {7, 3, 9}), (std::vector<int>{3, 7, 9}));
  auto rev = spec_with(Pattern::kReverse, {3, 7, 9});
  EXPECT_EQ(pattern_output(rev, {7, 3, 9}), (std::vector<int>{9, 3, 7}));
}

TEST(PatternOutput, ClassifyIntentAndExtractSlot) {
  auto cls = spec_with(Pattern::kClassifyIntent, {3, 7, 9});
  auto y = pattern_output(cls, {7, 3, 9});
  ASSERT_EQ(y.size(), 1u);
  EXPECT_TRUE(std::count(cls.domain.begin(), cls.domain.end(), y[0]) == 1);
  auto slot = spec_with(Pattern::kExtractSlot, {3, 7, 9});
  EXPECT_EQ(pattern_output(slot, {7, 3, 9}), (std::vector<int>{9}));
}

TEST(PatternOutput, VerbalizeIsADomainBijection) {
  auto spec = spec_with(Pattern::kVerbalize, {20, 21, 25, 30});
  std::set<int> images;
  for (int tok : spec.domain) {
    auto y = pattern_output(spec, {tok});
    ASSERT_EQ(y.size(), 1u);
    EXPECT_TRUE(std::count(spec.domain.begin(), spec.domain.end(), y[0]) == 1);
    images.insert(y[0]);
  }
  EXPECT_EQ(images.size(), spec.domain.size());
  // Deterministic per spec seed.
  EXPECT_EQ(pattern_output(spec, {20, 30}), pattern_output(spec, {20, 30}));
}

TEST(PatternOutput, VerbalizeRejectsOutOfDomainToken) {
  auto spec = spec_with(Pattern::kVerbalize, {20, 21});
  EXPECT_THROW(pattern_output(spec, {99}), std::invalid_argument);
}

TEST(PatternNames, RoundTripAndUnknown) {
  for (Pattern p : {Pattern::kVerbalize, Pattern::kCopy, Pattern::kReverse, Pattern::kSort,
                    Pattern::kClassifyIntent, Pattern::kExtractSlot}) {
    EXPECT_EQ(pattern_from_name(pattern_name(p)), p);
  }
  EXPECT_THROW(pattern_from_name("summarize"), std::invalid_argument);
}

TEST(SimilarStream, DeterministicPerSeed) {
  auto cfg = small_cfg();
  auto a = make_similar_stream(cfg, 5, 1);
  auto b = make_similar_stream(cfg, 5, 1);
  EXPECT_EQ(stream_to_json(a), stream_to_json(b));
  auto c = make_similar_stream(cfg, 5, 2);
  EXPECT_NE(stream_to_json(a), stream_to_json(c));
}

TEST(SimilarStream, DisjointDomainsAllVerbalize) {
  auto cfg = small_cfg();
  auto stream = make_similar_stream(cfg, 5, 1);
  ASSERT_EQ(stream.specs.size(), 5u);
  std::set<int> all;
  for (const auto& spec : stream.specs) {
    EXPECT_EQ(spec.pattern, Pattern::kVerbalize);
    for (int tok : spec.domain) {
      EXPECT_TRUE(all.insert(tok).second) << "domains overlap at token " << tok;
      EXPECT_GE(tok, cfg.base_token(0));
      EXPECT_LE(tok, cfg.base_token(cfg.base_vocab - 1));
    }
  }
}

TEST(SimilarStream, VocabularyExhaustionThrows) {
  auto cfg = small_cfg();
  // 9 tasks x 8 tokens = 72 > 64 base tokens.
  EXPECT_THROW(make_similar_stream(cfg, 9, 1), std::invalid_argument);
}

TEST(DissimilarStream, FiveDistinctPatterns) {
  auto cfg = small_cfg();
  auto stream = make_dissimilar_stream(cfg, 5, 1);
  std::set<Pattern> patterns;
  for (const auto& spec : stream.specs) patterns.insert(spec.pattern);
  EXPECT_EQ(patterns.size(), 5u);
}

TEST(Materialize, SamplesSatisfyPatternRule) {
  auto cfg = small_cfg();
  auto stream = make_dissimilar_stream(cfg, 5, 3);
  for (const auto& spec : stream.specs) {
    auto data = materialize(spec);
    EXPECT_EQ(static_cast<int>(data.train.size()), spec.train_n);
    EXPECT_EQ(static_cast<int>(data.valid.size()), spec.valid_n);
    EXPECT_EQ(static_cast<int>(data.test.size()), spec.test_n);
    for (const auto* split : {&data.train, &data.valid, &data.test}) {
      for (const auto& s : *split) {
        EXPECT_EQ(s.task, spec.task);
        EXPECT_EQ(s.y, pattern_output(spec, s.x));
      }
    }
  }
}

TEST(Materialize, SplitsHaveDistinctInputsForXLen4) {
  auto cfg = small_cfg();
  auto spec = make_similar_stream(cfg, 1, 5).specs[0];
  ASSERT_GE(spec.x_len, 4);
  auto data = materialize(spec);
  std::set<std::vector<int>> seen;
  for (const auto* split : {&data.train, &data.valid, &data.test}) {
    for (const auto& s : *split) {
      EXPECT_TRUE(seen.insert(s.x).second) << "duplicate input across splits";
    }
  }
}

TEST(Materialize, TooSmallInputSpaceThrows) {
  auto spec = spec_with(Pattern::kCopy, {20, 21});
  spec.x_len = 4;  // 2^4 = 16 inputs < 2 * (train+valid+test)
  EXPECT_THROW(materialize(spec), std::invalid_argument);
}

TEST(Encode, SampleLayoutAndRoundTrip) {
  auto cfg = small_cfg();
  Sample s{2, {cfg.base_token(0), cfg.base_token(5)}, {cfg.base_token(9)}};
  auto toks = encode_sample(cfg, s);
  ASSERT_EQ(toks.size(), 6u);
  EXPECT_EQ(toks[0], cfg.task_token(2));
  EXPECT_EQ(toks[3], ModelConfig::kSep);
  EXPECT_EQ(toks.back(), ModelConfig::kEos);
  auto parsed = parse_sample(cfg, toks);
  ASSERT_TRUE(parsed.has_value());
  EXPECT_EQ(parsed->task, s.task);
  EXPECT_EQ(parsed->x, s.x);
  EXPECT_EQ(parsed->y, s.y);
}

TEST(Encode, ParseRejectsMalformedSequences) {
  auto cfg = small_cfg();
  const int b = cfg.base_token(0);
  const int task = cfg.task_token(1);
  // no EOS
  EXPECT_FALSE(parse_sample(cfg, {task, b, ModelConfig::kSep, b}).has_value());
  // no task token
  EXPECT_FALSE(parse_sample(cfg, {b, b, ModelConfig::kSep, b, ModelConfig::kEos}).has_value());
  // two SEPs
  EXPECT_FALSE(parse_sample(cfg, {task, b, ModelConfig::kSep, ModelConfig::kSep, b,
                                  ModelConfig::kEos})
                   .has_value());
  // empty answer
  EXPECT_FALSE(parse_sample(cfg, {task, b, ModelConfig::kSep, ModelConfig::kEos}).has_value());
  // non-base token inside x
  EXPECT_FALSE(
      parse_sample(cfg, {task, task, ModelConfig::kSep, b, ModelConfig::kEos}).has_value());
}

TEST(Encode, BatchMasksAndPadding) {
  auto cfg = small_cfg();
  Sample a{1, {cfg.base_token(0), cfg.base_token(1)}, {cfg.base_token(2)}};   // len 6
  Sample b{1, {cfg.base_token(3)}, {cfg.base_token(4), cfg.base_token(5)}};  // len 6
  Sample c{1, {cfg.base_token(6)}, {cfg.base_token(7)}};                     // len 5
  auto batch = encode_batch(cfg, {a, b, c});
  EXPECT_EQ(batch.batch, 3);
  EXPECT_EQ(batch.seq, 6);
  // Row c is padded with PAD and its pad position carries no loss.
  EXPECT_EQ(batch.ids[2 * 6 + 5], ModelConfig::kPad);
  EXPECT_EQ(batch.full_mask[2 * 6 + 5], 0);
  for (int r = 0; r < 3; ++r) {
    const Sample& s = r == 0 ? a : (r == 1 ? b : c);
    auto row = encode_sample(cfg, s);
    const int len = static_cast<int>(row.size());
    const int sep_pos = 1 + static_cast<int>(s.x.size());
    int answer_positions = 0;
    for (int p = 0; p < batch.seq; ++p) {
      const int i = r * batch.seq + p;
      if (p + 1 < len) {
        EXPECT_EQ(batch.targets[i], row[p + 1]);
        EXPECT_EQ(batch.full_mask[i], 1);
        EXPECT_EQ(batch.answer_mask[i], p >= sep_pos ? 1 : 0);
        answer_positions += batch.answer_mask[i];
      } else {
        EXPECT_EQ(batch.full_mask[i], 0);
        EXPECT_EQ(batch.answer_mask[i], 0);
      }
    }
    // y tokens plus EOS are predicted under the answer mask.
    EXPECT_EQ(answer_positions, static_cast<int>(s.y.size()) + 1);
  }
  EXPECT_THROW(encode_batch(cfg, {}), std::invalid_argument);
}

TEST(Persistence, JsonlRoundTrip) {
  auto cfg = small_cfg();
  auto spec = make_similar_stream(cfg, 1, 11).specs[0];
  auto data = materialize(spec);
  auto path = std::filesystem::temp_directory_path() / "safm_tasks_roundtrip.jsonl";
  write_jsonl(path.string(), data.train);
  auto back = read_jsonl(path.string());
  ASSERT_EQ(back.size(), data.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].task, data.train[i].task);
    EXPECT_EQ(back[i].x, data.train[i].x);
    EXPECT_EQ(back[i].y, data.train[i].y);
  }
  std::filesystem::remove(path);
  EXPECT_THROW(read_jsonl((path.parent_path() / "safm_missing.jsonl").string()),
               std::runtime_error);
}

TEST(Persistence, StreamJsonRoundTrip) {
  auto cfg = small_cfg();
  auto stream = make_dissimilar_stream(cfg, 4, 9);
  auto back = stream_from_json(stream_to_json(stream));
  EXPECT_EQ(back.scenario, stream.scenario);
  EXPECT_EQ(back.seed, stream.seed);
  ASSERT_EQ(back.specs.size(), stream.specs.size());
  for (std::size_t i = 0; i < back.specs.size(); ++i) {
    EXPECT_EQ(back.specs[i].task, stream.specs[i].task);
    EXPECT_EQ(back.specs[i].pattern, stream.specs[i].pattern);
    EXPECT_EQ(back.specs[i].domain, stream.specs[i].domain);
    EXPECT_EQ(back.specs[i].seed, stream.specs[i].seed);
  }
}

TEST(Encode, MaterializedSamplesFitMaxSeq) {
  auto cfg = small_cfg();
  auto stream = make_similar_stream(cfg, 5, 2);
  for (const auto& spec : stream.specs) {
    auto data = materialize(spec);
    for (const auto& s : data.test) {
      EXPECT_LE(static_cast<int>(s.x.size() + s.y.size()) + 3, cfg.max_seq);
      EXPECT_NO_THROW(encode_sample(cfg, s));
    }
  }
}

}  // namespace
}  // namespace safm
