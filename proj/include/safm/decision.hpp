#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "safm/adapter.hpp"
#include "safm/backbone.hpp"
#include "safm/tasks.hpp"

namespace safm {

struct DecisionConfig {
  double alpha = 0.11;          // sparse factor
  double beta = 0.08;           // reuse factor
  bool strict_ordering = true;  // require alpha > beta > 0
  bool include_empty = true;    // ACM-style ablation drops the empty candidate
  int warmup_epochs = 3;
  int search_epochs = 3;
  int batch_size = 8;
  double adapter_lr = 3e-3;
  double logit_lr = 0.05;
  double weight_decay = 0.01;
  std::vector<int> no_as_layers;  // empty => default_no_as_layers
};

// Layers exempt from architecture search; they always keep the fresh
// task-specific adapter. Default: one mid-stack layer.
std::vector<int> default_no_as_layers(int num_layers);

// Eq-style softmax initialization over {alpha, beta, ..., beta, -beta}:
// lambda_e = e^a/phi, lambda_j = e^b/phi, lambda_n = e^-b/phi with
// phi = e^a + k e^b + e^-b. Returns k+2 weights [empty, priors..., new].
std::vector<double> init_lambda(int k, double alpha, double beta, bool strict = true);

// Per-layer candidate list [EMPTY, mu_1..mu_k, fresh] (EMPTY omitted when
// include_empty is false).
std::vector<RouteEntry> build_candidates(int layer, const std::vector<Route>& prior_routes,
                                         AdapterId fresh, bool include_empty = true);

struct FusionLayerState {
  std::vector<RouteEntry> candidates;
  TensorPtr logits;  // trainable; null for no-AS layers
  bool no_as = false;
  std::optional<int> forced_one_hot;  // test hook: exact one-hot lambda
};

// Candidate lists plus trainable mixture logits for one task's search.
struct FusionState {
  int task = 0;
  std::vector<FusionLayerState> layers;
  std::vector<AdapterId> fresh;  // one new adapter per layer

  std::vector<double> lambda_at(int layer) const;  // softmax(z), 1-based layer
};

// Creates the per-layer fresh adapters and candidate/logit state for task
// `task` given every previously registered route.
FusionState begin_decision(const ModelConfig& cfg, const DecisionConfig& dcfg,
                           AdapterStore& store, int task, Rng& rng);

// Trains the fresh adapters with hard routing; prior adapters and backbone
// stay untouched.
void warmup(const BackboneParams& backbone, const ModelConfig& cfg, const DecisionConfig& dcfg,
            AdapterStore& store, const FusionState& fusion, const std::vector<Sample>& train,
            Rng& rng);

// Mixture forward: at each searched layer the post-layer state is the
// lambda-weighted sum over candidate adapters; no-AS layers hard-route
// through the fresh adapter. Loss is cross-entropy on the answer tokens.
std::pair<TensorPtr, HiddenTrace> fused_forward(const BackboneParams& backbone,
                                                const ModelConfig& cfg,
                                                const AdapterStore& store,
                                                const FusionState& fusion,
                                                const EncodedBatch& batch);

// Jointly trains mixture logits and the fresh adapters; prior adapters and
// backbone frozen.
void run_architecture_search(const BackboneParams& backbone, const ModelConfig& cfg,
                             const DecisionConfig& dcfg, AdapterStore& store,
                             FusionState& fusion, const std::vector<Sample>& train, Rng& rng);

struct DecisionLogRow {
  int task = 0;
  int layer = 0;
  bool no_as = false;
  std::vector<std::string> candidates;
  std::vector<double> lambda;
  std::string selected;
};

// Argmax selection per layer (ties prefer empty, then earliest reused, then
// new); unselected fresh adapters are removed from the store. The returned
// route is not yet registered.
Route select_route(AdapterStore& store, const FusionState& fusion,
                   std::vector<DecisionLogRow>* log = nullptr);

std::string route_entry_name(const RouteEntry& e);

}  // namespace safm
