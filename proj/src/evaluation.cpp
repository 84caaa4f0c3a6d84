#include "safm/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace safm {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

void RMatrix::add_row(std::vector<double> row) {
  if (static_cast<int>(row.size()) != tasks() + 1) {
    throw std::invalid_argument("RMatrix: row " + std::to_string(tasks() + 1) + " needs " +
                                std::to_string(tasks() + 1) + " entries, got " +
                                std::to_string(row.size()));
  }
  for (double v : row) {
    if (v < 0.0 || v > 1.0) throw std::invalid_argument("RMatrix: accuracy outside [0,1]");
  }
  rows_.push_back(std::move(row));
}

double RMatrix::at(int i, int j) const {
  if (i < 1 || i > tasks() || j < 1 || j > i) {
    throw std::out_of_range("RMatrix: index (" + std::to_string(i) + "," + std::to_string(j) +
                            ") outside the lower triangle");
  }
  return rows_[i - 1][j - 1];
}

std::string RMatrix::to_csv() const {
  std::string out;
  for (const auto& row : rows_) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) out += ",";
      out += fmt(row[j]);
    }
    out += "\n";
  }
  return out;
}

RMatrix RMatrix::from_csv(const std::string& text) {
  RMatrix r;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    r.add_row(std::move(row));
  }
  return r;
}

double score(const RMatrix& r) {
  if (r.tasks() == 0) throw std::invalid_argument("score: empty R-matrix");
  const auto& last = r.rows().back();
  double s = 0.0;
  for (double v : last) s += v;
  return s / last.size();
}

double bwt(const RMatrix& r) {
  const int t = r.tasks();
  if (t < 2) throw std::invalid_argument("bwt: undefined for fewer than two tasks");
  double s = 0.0;
  for (int i = 1; i < t; ++i) s += r.at(t, i) - r.at(i, i);
  return s / (t - 1);
}

double evaluate_task(const BackboneParams& backbone, const ModelConfig& cfg,
                     const AdapterStore& store, const Route& route,
                     const std::vector<Sample>& test) {
  if (test.empty()) throw std::invalid_argument("evaluate_task: empty test set");
  int hits = 0;
  for (const auto& s : test) {
    std::vector<int> prefix = {cfg.task_token(s.task)};
    prefix.insert(prefix.end(), s.x.begin(), s.x.end());
    prefix.push_back(ModelConfig::kSep);
    auto out = generate(backbone, cfg, store, route, prefix, cfg.max_seq, {});
    if (out == encode_sample(cfg, s)) ++hits;
  }
  return static_cast<double>(hits) / test.size();
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["method"] = method;
  j["seed"] = seed;
  j["score"] = score;
  if (bwt) {
    j["bwt"] = *bwt;
  } else {
    j["bwt"] = nullptr;
  }
  j["learnable_params"] = learnable_params;
  j["diagonal"] = diagonal;
  j["r_matrix"] = r.rows();
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  EvalReport rep;
  rep.method = j.at("method").get<std::string>();
  rep.seed = j.at("seed").get<std::uint64_t>();
  rep.score = j.at("score").get<double>();
  if (!j.at("bwt").is_null()) rep.bwt = j.at("bwt").get<double>();
  rep.learnable_params = j.at("learnable_params").get<long long>();
  rep.diagonal = j.at("diagonal").get<std::vector<double>>();
  for (const auto& row : j.at("r_matrix")) {
    rep.r.add_row(row.get<std::vector<double>>());
  }
  return rep;
}

ComparisonTable compare_methods(std::vector<EvalReport> reports) {
  if (reports.empty()) throw std::invalid_argument("compare_methods: no reports");
  for (const auto& rep : reports) {
    if (rep.seed != reports.front().seed) {
      throw std::invalid_argument("compare_methods: reports mix seeds " +
                                  std::to_string(reports.front().seed) + " and " +
                                  std::to_string(rep.seed));
    }
  }
  std::stable_sort(reports.begin(), reports.end(), [](const EvalReport& a, const EvalReport& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.method < b.method;
  });
  std::string md = "| Method | Score | BWT | Learn. Param. |\n|---|---|---|---|\n";
  std::string csv = "method,score,bwt,learnable_params\n";
  for (const auto& rep : reports) {
    const std::string b = rep.bwt ? fmt(100.0 * *rep.bwt) : "N/A";
    md += "| " + rep.method + " | " + fmt(100.0 * rep.score) + " | " + b + " | " +
          std::to_string(rep.learnable_params) + " |\n";
    csv += rep.method + "," + fmt(100.0 * rep.score) + "," + b + "," +
           std::to_string(rep.learnable_params) + "\n";
  }
  return {md, csv};
}

}  // namespace safm
