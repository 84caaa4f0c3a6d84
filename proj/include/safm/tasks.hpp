#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "safm/backbone.hpp"
#include "safm/rng.hpp"

namespace safm {

enum class Pattern {
  kVerbalize,
  kCopy,
  kReverse,
  kSort,
  kClassifyIntent,
  kExtractSlot,
};

std::string pattern_name(Pattern p);
Pattern pattern_from_name(const std::string& name);

// One (x, y) token-sequence pair.
struct Sample {
  int task = 0;
  std::vector<int> x, y;
};

// Synthetic task definition. `domain` holds global token ids.
struct TaskSpec {
  int task = 0;
  Pattern pattern = Pattern::kVerbalize;
  std::vector<int> domain;
  int x_len = 4;
  int train_n = 256, valid_n = 64, test_n = 64;
  std::uint64_t seed = 0;
};

struct Stream {
  std::string scenario;  // "similar" | "dissimilar"
  std::uint64_t seed = 0;
  std::vector<TaskSpec> specs;
};

struct TaskData {
  std::vector<Sample> train, valid, test;
};

struct StreamOptions {
  int domain_size = 8;
  int x_len = 4;
  int train_n = 256, valid_n = 64, test_n = 64;
};

// Every pattern has an exact oracle: y is a pure function of x.
std::vector<int> pattern_output(const TaskSpec& spec, const std::vector<int>& x);

// n_tasks verbalize tasks over pairwise-disjoint domain vocabularies.
Stream make_similar_stream(const ModelConfig& cfg, int n_tasks, std::uint64_t seed,
                           const StreamOptions& opts = {});

// Stream cycling distinct patterns, still over disjoint domains.
Stream make_dissimilar_stream(const ModelConfig& cfg, int n_tasks, std::uint64_t seed,
                              const StreamOptions& opts = {});

// Disjoint train/valid/test splits; inputs are pairwise distinct across all
// splits whenever |x| >= 4.
TaskData materialize(const TaskSpec& spec);

// Token layout of one sample: [task, x..., SEP, y..., EOS].
std::vector<int> encode_sample(const ModelConfig& cfg, const Sample& s);

// Inverse of encode_sample with well-formedness checks (one SEP, leading
// task token, base-vocabulary x/y, trailing EOS). Returns nullopt otherwise.
std::optional<Sample> parse_sample(const ModelConfig& cfg, const std::vector<int>& tokens);

// Padded batch with next-token targets. answer_mask covers predictions of
// y...EOS; full_mask additionally covers x and SEP (the generation format).
struct EncodedBatch {
  int batch = 0, seq = 0;
  std::vector<int> ids;
  std::vector<int> targets;
  std::vector<std::uint8_t> answer_mask;
  std::vector<std::uint8_t> full_mask;
};

EncodedBatch encode_batch(const ModelConfig& cfg, const std::vector<Sample>& samples);

// JSONL persistence: {"task": int, "x": [int], "y": [int]} per line.
void write_jsonl(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> read_jsonl(const std::string& path);

std::string stream_to_json(const Stream& stream);
Stream stream_from_json(const std::string& text);

}  // namespace safm
