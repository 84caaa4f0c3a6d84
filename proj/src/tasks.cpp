#include "safm/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace safm {

using nlohmann::json;

std::string pattern_name(Pattern p) {
  switch (p) {
    case Pattern::kVerbalize: return "verbalize";
    case Pattern::kCopy: return "copy";
    case Pattern::kReverse: return "reverse";
    case Pattern::kSort: return "sort";
    case Pattern::kClassifyIntent: return "classify-intent";
    case Pattern::kExtractSlot: return "extract-slot";
  }
  throw std::logic_error("pattern_name: unknown pattern");
}

Pattern pattern_from_name(const std::string& name) {
  for (Pattern p : {Pattern::kVerbalize, Pattern::kCopy, Pattern::kReverse, Pattern::kSort,
                    Pattern::kClassifyIntent, Pattern::kExtractSlot}) {
    if (pattern_name(p) == name) return p;
  }
  throw std::invalid_argument("pattern_from_name: unknown pattern '" + name + "'");
}

namespace {

// Seeded bijection over the task's domain, used by verbalize and
// classify-intent.
std::map<int, int> domain_bijection(const TaskSpec& spec) {
  std::vector<int> image = spec.domain;
  Rng rng(mix_seed(spec.seed, 0x6d6170));
  rng.shuffle(image);
  std::map<int, int> out;
  for (std::size_t i = 0; i < spec.domain.size(); ++i) out[spec.domain[i]] = image[i];
  return out;
}

int mapped(const std::map<int, int>& sigma, int tok) {
  auto it = sigma.find(tok);
  if (it == sigma.end()) {
    throw std::invalid_argument("pattern_output: token " + std::to_string(tok) +
                                " outside the task domain");
  }
  return it->second;
}

}  // namespace

std::vector<int> pattern_output(const TaskSpec& spec, const std::vector<int>& x) {
  switch (spec.pattern) {
    case Pattern::kVerbalize: {
      auto sigma = domain_bijection(spec);
      std::vector<int> y;
      y.reserve(x.size());
      for (int t : x) y.push_back(mapped(sigma, t));
      return y;
    }
    case Pattern::kCopy:
      return x;
    case Pattern::kReverse: {
      std::vector<int> y(x.rbegin(), x.rend());
      return y;
    }
    case Pattern::kSort: {
      std::vector<int> y = x;
      std::sort(y.begin(), y.end());
      return y;
    }
    case Pattern::kClassifyIntent: {
      auto sigma = domain_bijection(spec);
      return {mapped(sigma, x.front())};
    }
    case Pattern::kExtractSlot:
      return {x.back()};
  }
  throw std::logic_error("pattern_output: unknown pattern");
}

namespace {

Stream make_stream(const ModelConfig& cfg, int n_tasks, std::uint64_t seed,
                   const StreamOptions& opts, const std::string& scenario,
                   const std::vector<Pattern>& patterns) {
  if (n_tasks < 1) throw std::invalid_argument("stream: need at least one task");
  if (n_tasks > cfg.max_tasks) {
    throw std::invalid_argument("stream: " + std::to_string(n_tasks) +
                                " tasks exceed the task-token capacity of " +
                                std::to_string(cfg.max_tasks));
  }
  if (n_tasks * opts.domain_size > cfg.base_vocab) {
    throw std::invalid_argument("stream: vocabulary exhausted, " + std::to_string(n_tasks) +
                                " tasks x " + std::to_string(opts.domain_size) +
                                " tokens exceed base vocabulary of " +
                                std::to_string(cfg.base_vocab));
  }
  if (3 + 2 * opts.x_len > cfg.max_seq) {
    throw std::invalid_argument("stream: samples would exceed max_seq");
  }
  std::vector<int> base(cfg.base_vocab);
  for (int i = 0; i < cfg.base_vocab; ++i) base[i] = cfg.base_token(i);
  Rng rng(mix_seed(seed, 0x646f6d));
  rng.shuffle(base);

  Stream stream;
  stream.scenario = scenario;
  stream.seed = seed;
  for (int t = 1; t <= n_tasks; ++t) {
    TaskSpec spec;
    spec.task = t;
    spec.pattern = patterns[(t - 1) % patterns.size()];
    spec.domain.assign(base.begin() + (t - 1) * opts.domain_size,
                       base.begin() + t * opts.domain_size);
    std::sort(spec.domain.begin(), spec.domain.end());
    spec.x_len = opts.x_len;
    spec.train_n = opts.train_n;
    spec.valid_n = opts.valid_n;
    spec.test_n = opts.test_n;
    spec.seed = mix_seed(seed, 0x7461736b, static_cast<std::uint64_t>(t));
    stream.specs.push_back(std::move(spec));
  }
  return stream;
}

}  // namespace

Stream make_similar_stream(const ModelConfig& cfg, int n_tasks, std::uint64_t seed,
                           const StreamOptions& opts) {
  return make_stream(cfg, n_tasks, seed, opts, "similar", {Pattern::kVerbalize});
}

Stream make_dissimilar_stream(const ModelConfig& cfg, int n_tasks, std::uint64_t seed,
                              const StreamOptions& opts) {
  return make_stream(cfg, n_tasks, seed, opts, "dissimilar",
                     {Pattern::kCopy, Pattern::kReverse, Pattern::kSort,
                      Pattern::kClassifyIntent, Pattern::kExtractSlot, Pattern::kVerbalize});
}

TaskData materialize(const TaskSpec& spec) {
  if (spec.train_n < 1 || spec.valid_n < 1 || spec.test_n < 1) {
    throw std::invalid_argument("materialize: split sizes must be >= 1");
  }
  const int total = spec.train_n + spec.valid_n + spec.test_n;
  const bool enforce_distinct = spec.x_len >= 4;
  double space = std::pow(static_cast<double>(spec.domain.size()), spec.x_len);
  if (enforce_distinct && space < 2.0 * total) {
    throw std::invalid_argument("materialize: input space too small for disjoint splits");
  }
  Rng rng(mix_seed(spec.seed, 0x64617461));
  std::set<std::vector<int>> seen;
  std::vector<Sample> all;
  all.reserve(total);
  long attempts = 0;
  while (static_cast<int>(all.size()) < total) {
    if (++attempts > 100L * total) {
      throw std::runtime_error("materialize: failed to draw enough distinct inputs");
    }
    std::vector<int> x(spec.x_len);
    for (auto& t : x) t = rng.pick(spec.domain);
    if (enforce_distinct && !seen.insert(x).second) continue;
    Sample s;
    s.task = spec.task;
    s.y = pattern_output(spec, x);
    s.x = std::move(x);
    all.push_back(std::move(s));
  }
  TaskData data;
  data.train.assign(all.begin(), all.begin() + spec.train_n);
  data.valid.assign(all.begin() + spec.train_n, all.begin() + spec.train_n + spec.valid_n);
  data.test.assign(all.begin() + spec.train_n + spec.valid_n, all.end());
  return data;
}

std::vector<int> encode_sample(const ModelConfig& cfg, const Sample& s) {
  std::vector<int> out;
  out.reserve(s.x.size() + s.y.size() + 3);
  out.push_back(cfg.task_token(s.task));
  out.insert(out.end(), s.x.begin(), s.x.end());
  out.push_back(ModelConfig::kSep);
  out.insert(out.end(), s.y.begin(), s.y.end());
  out.push_back(ModelConfig::kEos);
  if (static_cast<int>(out.size()) > cfg.max_seq) {
    throw std::invalid_argument("encode_sample: sample exceeds max_seq");
  }
  return out;
}

std::optional<Sample> parse_sample(const ModelConfig& cfg, const std::vector<int>& tokens) {
  if (tokens.size() < 4) return std::nullopt;
  int first = tokens.front();
  if (first < 3 || first >= 3 + cfg.max_tasks) return std::nullopt;
  if (tokens.back() != ModelConfig::kEos) return std::nullopt;
  int sep_count = 0;
  std::size_t sep_pos = 0;
  for (std::size_t i = 1; i + 1 < tokens.size(); ++i) {
    if (tokens[i] == ModelConfig::kSep) {
      ++sep_count;
      sep_pos = i;
    }
  }
  if (sep_count != 1) return std::nullopt;
  Sample s;
  s.task = first - 2;
  const int base_lo = 3 + cfg.max_tasks;
  for (std::size_t i = 1; i < sep_pos; ++i) {
    if (tokens[i] < base_lo || tokens[i] >= cfg.vocab()) return std::nullopt;
    s.x.push_back(tokens[i]);
  }
  for (std::size_t i = sep_pos + 1; i + 1 < tokens.size(); ++i) {
    if (tokens[i] < base_lo || tokens[i] >= cfg.vocab()) return std::nullopt;
    s.y.push_back(tokens[i]);
  }
  if (s.x.empty() || s.y.empty()) return std::nullopt;
  return s;
}

EncodedBatch encode_batch(const ModelConfig& cfg, const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("encode_batch: empty batch");
  EncodedBatch b;
  b.batch = static_cast<int>(samples.size());
  std::vector<std::vector<int>> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) {
    rows.push_back(encode_sample(cfg, s));
    b.seq = std::max(b.seq, static_cast<int>(rows.back().size()));
  }
  b.ids.assign(static_cast<std::size_t>(b.batch) * b.seq, ModelConfig::kPad);
  b.targets.assign(b.ids.size(), ModelConfig::kPad);
  b.answer_mask.assign(b.ids.size(), 0);
  b.full_mask.assign(b.ids.size(), 0);
  for (int r = 0; r < b.batch; ++r) {
    const auto& row = rows[r];
    const int len = static_cast<int>(row.size());
    const int sep_pos = 1 + static_cast<int>(samples[r].x.size());
    for (int p = 0; p < len; ++p) b.ids[r * b.seq + p] = row[p];
    for (int p = 0; p + 1 < len; ++p) {
      b.targets[r * b.seq + p] = row[p + 1];
      b.full_mask[r * b.seq + p] = 1;
      if (p >= sep_pos) b.answer_mask[r * b.seq + p] = 1;
    }
  }
  return b;
}

void write_jsonl(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_jsonl: cannot open " + path);
  for (const auto& s : samples) {
    json j{{"task", s.task}, {"x", s.x}, {"y", s.y}};
    out << j.dump() << "\n";
  }
}

std::vector<Sample> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_jsonl: cannot open " + path);
  std::vector<Sample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Sample s;
    s.task = j.at("task").get<int>();
    s.x = j.at("x").get<std::vector<int>>();
    s.y = j.at("y").get<std::vector<int>>();
    out.push_back(std::move(s));
  }
  return out;
}

std::string stream_to_json(const Stream& stream) {
  json specs = json::array();
  for (const auto& s : stream.specs) {
    specs.push_back({{"task", s.task},
                     {"pattern", pattern_name(s.pattern)},
                     {"domain", s.domain},
                     {"x_len", s.x_len},
                     {"train_n", s.train_n},
                     {"valid_n", s.valid_n},
                     {"test_n", s.test_n},
                     {"seed", s.seed}});
  }
  json j{{"scenario", stream.scenario}, {"seed", stream.seed}, {"specs", specs}};
  return j.dump(2);
}

Stream stream_from_json(const std::string& text) {
  json j = json::parse(text);
  Stream stream;
  stream.scenario = j.at("scenario").get<std::string>();
  stream.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& sj : j.at("specs")) {
    TaskSpec s;
    s.task = sj.at("task").get<int>();
    s.pattern = pattern_from_name(sj.at("pattern").get<std::string>());
    s.domain = sj.at("domain").get<std::vector<int>>();
    s.x_len = sj.at("x_len").get<int>();
    s.train_n = sj.at("train_n").get<int>();
    s.valid_n = sj.at("valid_n").get<int>();
    s.test_n = sj.at("test_n").get<int>();
    s.seed = sj.at("seed").get<std::uint64_t>();
    stream.specs.push_back(std::move(s));
  }
  return stream;
}

}  // namespace safm
