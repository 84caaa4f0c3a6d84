#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "safm/adapter.hpp"
#include "safm/backbone.hpp"
#include "safm/tasks.hpp"

namespace safm {

// Lower-triangular accuracy matrix: row i holds accuracies on tasks 1..i
// measured after training task i. All values in [0, 1].
class RMatrix {
 public:
  void add_row(std::vector<double> row);
  int tasks() const { return static_cast<int>(rows_.size()); }
  double at(int i, int j) const;  // 1-based, j <= i
  const std::vector<std::vector<double>>& rows() const { return rows_; }

  std::string to_csv() const;
  static RMatrix from_csv(const std::string& text);

 private:
  std::vector<std::vector<double>> rows_;
};

// Mean of the final row.
double score(const RMatrix& r);

// (1/(t-1)) * sum_{i<t} (R_{t,i} - R_{i,i}); undefined for a single task.
double bwt(const RMatrix& r);

// Fraction of test samples whose greedy decode of [task, x..., SEP] exactly
// reproduces y (followed by EOS).
double evaluate_task(const BackboneParams& backbone, const ModelConfig& cfg,
                     const AdapterStore& store, const Route& route,
                     const std::vector<Sample>& test);

struct EvalReport {
  std::string method;
  std::uint64_t seed = 0;
  double score = 0.0;
  std::optional<double> bwt;  // nullopt for single-task streams
  long long learnable_params = 0;
  std::vector<double> diagonal;
  RMatrix r;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
};

struct ComparisonTable {
  std::string markdown;
  std::string csv;
};

// Reports ranked by Score (descending), ties broken by method tag. All
// reports must share the same seed.
ComparisonTable compare_methods(std::vector<EvalReport> reports);

}  // namespace safm
