#include "safm/experiment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "safm/checkpoint.hpp"

namespace safm {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

const std::set<std::string> kMethods = {"finetune", "adaptercl", "acm", "safm", "safm_no_lw"};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key)) {
      throw std::invalid_argument("config: unknown key \"" + key + "\" in " + where);
    }
  }
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

// Seeded LM warm-start over the whole base vocabulary: random inputs mapped
// through one fixed bijection, in the same [x..., SEP, y..., EOS] layout the
// tasks use (no task token). Gives every base token a trained embedding and
// head column, standing in for a pretrained model.
void pretrain_backbone(const ExperimentConfig& cfg, BackboneParams& backbone, Rng& rng,
                       std::vector<TrainLogRow>* log) {
  if (cfg.pretrain_epochs == 0 || cfg.pretrain_n == 0) return;
  const ModelConfig& m = cfg.model;
  std::vector<int> sigma(m.base_vocab);
  for (int i = 0; i < m.base_vocab; ++i) sigma[i] = i;
  rng.shuffle(sigma);

  const int x_len = cfg.data.x_len;
  const int seq = 2 * x_len + 2;
  std::vector<std::vector<int>> rows;
  for (int i = 0; i < cfg.pretrain_n; ++i) {
    std::vector<int> row;
    std::vector<int> xs;
    for (int p = 0; p < x_len; ++p) xs.push_back(rng.below(m.base_vocab));
    for (int x : xs) row.push_back(m.base_token(x));
    row.push_back(ModelConfig::kSep);
    for (int x : xs) row.push_back(m.base_token(sigma[x]));
    row.push_back(ModelConfig::kEos);
    rows.push_back(std::move(row));
  }

  AdamW opt(backbone.parameters(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  AdapterStore no_adapters(m.width, m.bottleneck);
  Route empty{0, std::vector<RouteEntry>(m.layers, std::nullopt)};
  std::vector<int> order(rows.size());
  for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double ce_sum = 0.0;
    int batches = 0;
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
      const int b = static_cast<int>(std::min<std::size_t>(cfg.batch_size, order.size() - i));
      std::vector<int> ids, targets;
      std::vector<std::uint8_t> mask;
      for (int k = 0; k < b; ++k) {
        const auto& row = rows[order[i + k]];
        ids.insert(ids.end(), row.begin(), row.end());
        for (int p = 0; p + 1 < seq; ++p) {
          targets.push_back(row[p + 1]);
          mask.push_back(1);
        }
        targets.push_back(ModelConfig::kPad);
        mask.push_back(0);
      }
      TapeScope ts;
      auto res = forward_with_route(backbone, m, ids, b, seq, empty, no_adapters);
      auto loss = cross_entropy_loss(res.logits, targets, mask);
      opt.zero_grad();
      backward(loss);
      opt.step();
      ce_sum += loss->values[0];
      ++batches;
    }
    if (log) log->push_back({0, epoch + 1, "pretrain", ce_sum / batches, 0.0, 0});
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  if (scenario != "similar" && scenario != "dissimilar") {
    throw std::invalid_argument("config: scenario must be similar or dissimilar");
  }
  if (!kMethods.count(method)) {
    throw std::invalid_argument("config: unknown method \"" + method + "\"");
  }
  if (seeds.empty()) throw std::invalid_argument("config: seed list is empty");
  if (n_tasks < 1) throw std::invalid_argument("config: n_tasks must be positive");
  if (warmup_epochs < 0 || search_epochs < 0 || tune_epochs < 0 || pretrain_epochs < 0 ||
      pretrain_n < 0 || batch_size < 1) {
    throw std::invalid_argument("config: bad epoch/batch settings");
  }
  if (replay_ratio < 0.0 || w_lw < 0.0 || w_gen < 0.0) {
    throw std::invalid_argument("config: loss weights and replay ratio must be non-negative");
  }
  for (int l : no_as_layers) {
    if (l < 1 || l > model.layers) {
      throw std::invalid_argument("config: no_as layer " + std::to_string(l) + " outside 1.." +
                                  std::to_string(model.layers));
    }
  }
}

std::string ExperimentConfig::to_json() const {
  ordered_json j;
  j["scenario"] = scenario;
  j["n_tasks"] = n_tasks;
  j["seeds"] = seeds;
  j["method"] = method;
  j["model"] = {{"layers", model.layers},         {"width", model.width},
                {"heads", model.heads},           {"max_seq", model.max_seq},
                {"bottleneck", model.bottleneck}, {"base_vocab", model.base_vocab},
                {"max_tasks", model.max_tasks}};
  j["data"] = {{"domain_size", data.domain_size},
               {"x_len", data.x_len},
               {"train_n", data.train_n},
               {"valid_n", data.valid_n},
               {"test_n", data.test_n}};
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["warmup_epochs"] = warmup_epochs;
  j["search_epochs"] = search_epochs;
  j["tune_epochs"] = tune_epochs;
  j["pretrain_epochs"] = pretrain_epochs;
  j["pretrain_n"] = pretrain_n;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["logit_lr"] = logit_lr;
  j["weight_decay"] = weight_decay;
  j["replay_ratio"] = replay_ratio;
  j["w_lw"] = w_lw;
  j["w_gen"] = w_gen;
  j["no_as_layers"] = no_as_layers;
  j["gen_top_k"] = gen_top_k;
  j["gen_temperature"] = gen_temperature;
  j["gen_greedy_answer"] = gen_greedy_answer;
  j["freeze_backbone"] = freeze_backbone;
  j["out_dir"] = out_dir;
  return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  auto j = json::parse(text);
  reject_unknown_keys(
      j,
      {"scenario", "n_tasks", "seeds", "method", "model", "data", "alpha", "beta",
       "warmup_epochs", "search_epochs", "tune_epochs", "pretrain_epochs", "pretrain_n",
       "batch_size", "lr", "logit_lr",
       "weight_decay", "replay_ratio", "w_lw", "w_gen", "no_as_layers", "gen_top_k",
       "gen_temperature", "gen_greedy_answer", "freeze_backbone", "out_dir"},
      "config");
  ExperimentConfig c;
  if (j.count("scenario")) c.scenario = j["scenario"].get<std::string>();
  if (j.count("n_tasks")) c.n_tasks = j["n_tasks"].get<int>();
  if (j.count("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  if (j.count("method")) c.method = j["method"].get<std::string>();
  if (j.count("model")) {
    const auto& m = j["model"];
    reject_unknown_keys(
        m, {"layers", "width", "heads", "max_seq", "bottleneck", "base_vocab", "max_tasks"},
        "model");
    if (m.count("layers")) c.model.layers = m["layers"].get<int>();
    if (m.count("width")) c.model.width = m["width"].get<int>();
    if (m.count("heads")) c.model.heads = m["heads"].get<int>();
    if (m.count("max_seq")) c.model.max_seq = m["max_seq"].get<int>();
    if (m.count("bottleneck")) c.model.bottleneck = m["bottleneck"].get<int>();
    if (m.count("base_vocab")) c.model.base_vocab = m["base_vocab"].get<int>();
    if (m.count("max_tasks")) c.model.max_tasks = m["max_tasks"].get<int>();
  }
  if (j.count("data")) {
    const auto& d = j["data"];
    reject_unknown_keys(d, {"domain_size", "x_len", "train_n", "valid_n", "test_n"}, "data");
    if (d.count("domain_size")) c.data.domain_size = d["domain_size"].get<int>();
    if (d.count("x_len")) c.data.x_len = d["x_len"].get<int>();
    if (d.count("train_n")) c.data.train_n = d["train_n"].get<int>();
    if (d.count("valid_n")) c.data.valid_n = d["valid_n"].get<int>();
    if (d.count("test_n")) c.data.test_n = d["test_n"].get<int>();
  }
  if (j.count("alpha")) c.alpha = j["alpha"].get<double>();
  if (j.count("beta")) c.beta = j["beta"].get<double>();
  if (j.count("warmup_epochs")) c.warmup_epochs = j["warmup_epochs"].get<int>();
  if (j.count("search_epochs")) c.search_epochs = j["search_epochs"].get<int>();
  if (j.count("tune_epochs")) c.tune_epochs = j["tune_epochs"].get<int>();
  if (j.count("pretrain_epochs")) c.pretrain_epochs = j["pretrain_epochs"].get<int>();
  if (j.count("pretrain_n")) c.pretrain_n = j["pretrain_n"].get<int>();
  if (j.count("batch_size")) c.batch_size = j["batch_size"].get<int>();
  if (j.count("lr")) c.lr = j["lr"].get<double>();
  if (j.count("logit_lr")) c.logit_lr = j["logit_lr"].get<double>();
  if (j.count("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
  if (j.count("replay_ratio")) c.replay_ratio = j["replay_ratio"].get<double>();
  if (j.count("w_lw")) c.w_lw = j["w_lw"].get<double>();
  if (j.count("w_gen")) c.w_gen = j["w_gen"].get<double>();
  if (j.count("no_as_layers")) c.no_as_layers = j["no_as_layers"].get<std::vector<int>>();
  if (j.count("gen_top_k")) c.gen_top_k = j["gen_top_k"].get<int>();
  if (j.count("gen_temperature")) c.gen_temperature = j["gen_temperature"].get<double>();
  if (j.count("gen_greedy_answer")) c.gen_greedy_answer = j["gen_greedy_answer"].get<bool>();
  if (j.count("freeze_backbone")) c.freeze_backbone = j["freeze_backbone"].get<bool>();
  if (j.count("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  return from_json(read_file(path));
}

std::string decision_log_to_csv(const std::vector<DecisionLogRow>& rows) {
  std::string out = "task,layer,no_as,candidates,lambdas,selected\n";
  for (const auto& r : rows) {
    std::string cands, lams;
    for (std::size_t i = 0; i < r.candidates.size(); ++i) {
      if (i) cands += "|";
      cands += r.candidates[i];
    }
    for (std::size_t i = 0; i < r.lambda.size(); ++i) {
      if (i) lams += "|";
      lams += fmt(r.lambda[i]);
    }
    out += std::to_string(r.task) + "," + std::to_string(r.layer) + "," +
           (r.no_as ? "1" : "0") + "," + cands + "," + lams + "," + r.selected + "\n";
  }
  return out;
}

std::string train_log_to_csv(const std::vector<TrainLogRow>& rows) {
  std::string out = "task,epoch,stage,ce_loss,lw_loss,replay_samples\n";
  for (const auto& r : rows) {
    out += std::to_string(r.task) + "," + std::to_string(r.epoch) + "," + r.stage + "," +
           fmt(r.ce_loss) + "," + fmt(r.lw_loss) + "," + std::to_string(r.replay_samples) + "\n";
  }
  return out;
}

SeedRunResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                       const std::string& run_dir) {
  cfg.validate();
  const bool persist = !run_dir.empty();
  if (persist) fs::create_directories(run_dir);

  Stream stream = cfg.scenario == "similar"
                      ? make_similar_stream(cfg.model, cfg.n_tasks, seed, cfg.data)
                      : make_dissimilar_stream(cfg.model, cfg.n_tasks, seed, cfg.data);
  std::vector<TaskData> task_data;
  for (const auto& spec : stream.specs) task_data.push_back(materialize(spec));
  if (persist) write_file(fs::path(run_dir) / "stream.json", stream_to_json(stream));

  Rng rng_model(mix_seed(seed, 0x6d6f646cULL));
  BackboneParams backbone = BackboneParams::init(cfg.model, rng_model);
  AdapterStore store(cfg.model.width, cfg.model.bottleneck);
  Rng rng_pre(mix_seed(seed, 0x707265ULL));
  Rng rng(mix_seed(seed, 0x747261696eULL));

  DecisionConfig dcfg;
  dcfg.alpha = cfg.alpha;
  dcfg.beta = cfg.beta;
  dcfg.include_empty = cfg.method != "acm";
  dcfg.warmup_epochs = cfg.warmup_epochs;
  dcfg.search_epochs = cfg.search_epochs;
  dcfg.batch_size = cfg.batch_size;
  dcfg.adapter_lr = cfg.lr;
  dcfg.logit_lr = cfg.logit_lr;
  dcfg.weight_decay = cfg.weight_decay;
  dcfg.no_as_layers = cfg.no_as_layers;

  TuneConfig tcfg;
  tcfg.epochs = cfg.tune_epochs;
  tcfg.batch_size = cfg.batch_size;
  tcfg.lr = cfg.lr;
  tcfg.weight_decay = cfg.weight_decay;
  tcfg.w_gen = cfg.w_gen;
  tcfg.w_lw = cfg.method == "safm" ? cfg.w_lw : 0.0;
  tcfg.replay_ratio = cfg.replay_ratio;
  tcfg.sampling = {cfg.gen_top_k, cfg.gen_temperature, cfg.gen_greedy_answer};

  SeedRunResult result;
  pretrain_backbone(cfg, backbone, rng_pre, &result.train_log);
  std::vector<AdapterId> shared;  // finetune's single adapter set

  for (int t = 1; t <= cfg.n_tasks; ++t) {
    try {
      const std::vector<Sample>& train = task_data[t - 1].train;
      bool backbone_trainable = cfg.method == "finetune" || !cfg.freeze_backbone;
      Route route{t, {}};
      std::map<int, std::vector<Sample>> replay;

      if (cfg.method == "finetune") {
        if (t == 1) {
          for (int l = 1; l <= cfg.model.layers; ++l) shared.push_back(store.new_adapter(l, 1, rng));
        }
        for (AdapterId id : shared) route.entries.push_back(id);
      } else if (cfg.method == "adaptercl") {
        for (int l = 1; l <= cfg.model.layers; ++l) {
          route.entries.push_back(store.new_adapter(l, t, rng));
        }
      } else {
        FusionState fusion = begin_decision(cfg.model, dcfg, store, t, rng);
        warmup(backbone, cfg.model, dcfg, store, fusion, train, rng);
        run_architecture_search(backbone, cfg.model, dcfg, store, fusion, train, rng);
        route = select_route(store, fusion, &result.decisions);
        const int count = static_cast<int>(std::lround(tcfg.replay_ratio * train.size()));
        for (int target : replay_targets(route, store.routes())) {
          replay[target] =
              generate_pseudo_samples(backbone, cfg.model, store, store.route_for_task(target),
                                      target, count, tcfg.sampling, rng);
        }
      }
      store.register_route(route);
      tune(backbone, cfg.model, store, route, train, replay, tcfg, backbone_trainable, rng,
           &result.train_log);

      std::vector<double> row;
      for (int j = 1; j <= t; ++j) {
        row.push_back(evaluate_task(backbone, cfg.model, store, store.route_for_task(j),
                                    task_data[j - 1].test));
      }
      result.report.r.add_row(std::move(row));
      if (persist) {
        write_file(fs::path(run_dir) / "r_matrix.csv", result.report.r.to_csv());
        save_checkpoint((fs::path(run_dir) / ("checkpoint_task_" + std::to_string(t) + ".json"))
                            .string(),
                        {cfg.model, backbone, store, t});
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("run_seed: task " + std::to_string(t) + " failed: " + e.what());
    }
  }

  result.report.method = cfg.method;
  result.report.seed = seed;
  result.report.score = score(result.report.r);
  if (cfg.n_tasks >= 2) result.report.bwt = bwt(result.report.r);
  for (int t = 1; t <= cfg.n_tasks; ++t) result.report.diagonal.push_back(result.report.r.at(t, t));
  const long long backbone_params =
      cfg.method == "finetune" ? BackboneParams::param_count(cfg.model) : 0;
  result.report.learnable_params = store.count_learnable_params(store.routes(), backbone_params);

  if (persist) {
    write_file(fs::path(run_dir) / "decision_log.csv", decision_log_to_csv(result.decisions));
    write_file(fs::path(run_dir) / "train_log.csv", train_log_to_csv(result.train_log));
    write_file(fs::path(run_dir) / "report.json", result.report.to_json());
  }
  return result;
}

std::vector<EvalReport> run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  write_file(fs::path(cfg.out_dir) / "config.json", cfg.to_json());
  std::vector<EvalReport> reports;
  for (std::uint64_t seed : cfg.seeds) {
    auto dir = fs::path(cfg.out_dir) / ("seed_" + std::to_string(seed));
    reports.push_back(run_seed(cfg, seed, dir.string()).report);
  }
  return reports;
}

namespace {

struct MethodAgg {
  std::vector<double> scores;
  std::vector<double> bwts;
  std::vector<long long> params;
  std::vector<std::uint64_t> seeds;
};

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= v.size();
  double s2 = 0.0;
  for (double x : v) s2 += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s2 / (v.size() - 1)) : 0.0};
}

}  // namespace

std::string write_aggregate_report(const std::string& dir) {
  if (!fs::is_directory(dir)) {
    throw std::invalid_argument("report: " + dir + " is not a directory");
  }
  std::vector<fs::path> report_files, decision_files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path().filename() == "report.json") report_files.push_back(entry.path());
    if (entry.path().filename() == "decision_log.csv") decision_files.push_back(entry.path());
  }
  std::sort(report_files.begin(), report_files.end());
  std::sort(decision_files.begin(), decision_files.end());
  if (report_files.empty()) {
    throw std::invalid_argument("report: no report.json found under " + dir);
  }

  std::map<std::string, MethodAgg> by_method;
  for (const auto& path : report_files) {
    EvalReport rep = EvalReport::from_json(read_file(path));
    auto& agg = by_method[rep.method];
    agg.scores.push_back(rep.score);
    if (rep.bwt) agg.bwts.push_back(*rep.bwt);
    agg.params.push_back(rep.learnable_params);
    agg.seeds.push_back(rep.seed);
  }

  std::string md = "# Run summary\n\n";
  md += "| Method | Seeds | Score | BWT | Learn. Param. |\n|---|---|---|---|---|\n";
  std::string csv = "method,seeds,score_mean,score_std,bwt_mean,bwt_std,params_mean\n";
  for (const auto& [method, agg] : by_method) {
    auto [sm, ss] = mean_std(agg.scores);
    std::string bwt_md = "N/A", bwt_mean = "N/A", bwt_std = "N/A";
    if (!agg.bwts.empty()) {
      auto [bm, bs] = mean_std(agg.bwts);
      bwt_md = fmt(100.0 * bm) + " ± " + fmt(100.0 * bs);
      bwt_mean = fmt(100.0 * bm);
      bwt_std = fmt(100.0 * bs);
    }
    double pm = 0.0;
    for (long long p : agg.params) pm += static_cast<double>(p);
    pm /= agg.params.size();
    md += "| " + method + " | " + std::to_string(agg.seeds.size()) + " | " + fmt(100.0 * sm) +
          " ± " + fmt(100.0 * ss) + " | " + bwt_md + " | " + fmt(pm) + " |\n";
    csv += method + "," + std::to_string(agg.seeds.size()) + "," + fmt(100.0 * sm) + "," +
           fmt(100.0 * ss) + "," + bwt_mean + "," + bwt_std + "," + fmt(pm) + "\n";
  }

  // Per-layer selection frequencies over every decision log found.
  std::map<int, std::array<long, 3>> layer_counts;  // empty, reuse, new
  for (const auto& path : decision_files) {
    std::istringstream in(read_file(path));
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::istringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) cells.push_back(cell);
      if (cells.size() < 6) continue;
      const int layer = std::stoi(cells[1]);
      const std::string& cands = cells[3];
      const std::string& selected = cells[5];
      std::string last_cand;
      if (auto pos = cands.rfind('|'); pos != std::string::npos) {
        last_cand = cands.substr(pos + 1);
      } else {
        last_cand = cands;
      }
      int kind;
      if (selected == "empty") {
        kind = 0;
      } else if (selected == last_cand || cells[2] == "1") {
        kind = 2;  // fresh adapter (no-AS layers always take a fresh one)
      } else {
        kind = 1;
      }
      layer_counts[layer][kind]++;
    }
  }
  if (!layer_counts.empty()) {
    md += "\n## Selection frequencies\n\n| Layer | empty | reuse | new |\n|---|---|---|---|\n";
    for (const auto& [layer, counts] : layer_counts) {
      double total = static_cast<double>(counts[0] + counts[1] + counts[2]);
      md += "| " + std::to_string(layer) + " | " + fmt(counts[0] / total) + " | " +
            fmt(counts[1] / total) + " | " + fmt(counts[2] / total) + " |\n";
    }
  }

  write_file(fs::path(dir) / "report.md", md);
  write_file(fs::path(dir) / "report.csv", csv);
  return md;
}

}  // namespace safm
