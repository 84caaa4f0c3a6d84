#pragma once

#include <map>
#include <string>
#include <vector>

#include "safm/adapter.hpp"
#include "safm/backbone.hpp"
#include "safm/tasks.hpp"

namespace safm {

struct TuneConfig {
  int epochs = 12;
  int batch_size = 8;
  double lr = 3e-3;
  double weight_decay = 0.01;
  double w_gen = 0.25;         // weight of the generation-format loss
  double w_lw = 0.4;           // weight of the layer-wise cosine loss
  double replay_ratio = 0.2;   // pseudo samples per prior task, as a fraction
                               // of the current train set
  SamplingConfig sampling;     // decoding for pseudo-sample generation
};

// Prior tasks whose routes share at least one adapter with `current`; only
// these are rehearsed.
std::vector<int> replay_targets(const Route& current, const std::vector<Route>& prior);

// Samples sequences from [task_token] under the target task's route and keeps
// the well-formed ones. If fewer than `count` parse, the accepted ones are
// cycled to pad; zero acceptances sets *degraded and returns empty.
std::vector<Sample> generate_pseudo_samples(const BackboneParams& backbone,
                                            const ModelConfig& cfg, const AdapterStore& store,
                                            const Route& target_route, int target_task,
                                            int count, const SamplingConfig& sampling,
                                            Rng& rng, bool* degraded = nullptr);

// Mean cosine similarity between consecutive hidden states, summed over the
// layers whose route entry is non-empty. Zero when every entry is empty.
TensorPtr layerwise_loss(const HiddenTrace& trace, const Route& route);

struct TrainLogRow {
  int task = 0;
  int epoch = 0;
  std::string stage;     // currently always "tune"
  double ce_loss = 0.0;  // mean answer cross-entropy over the epoch
  double lw_loss = 0.0;  // mean raw layer-wise loss over current-task batches
  int replay_samples = 0;
};

// Trains the distinct adapters on `route` (plus the backbone when
// backbone_trainable) on current-task data mixed with pseudo-replay batches.
// Replay batches run under the rehearsed task's own route; adapters absent
// from `route` are never updated. The layer-wise term applies to current-task
// batches only.
void tune(const BackboneParams& backbone, const ModelConfig& cfg, AdapterStore& store,
          const Route& route, const std::vector<Sample>& train,
          const std::map<int, std::vector<Sample>>& replay, const TuneConfig& tcfg,
          bool backbone_trainable, Rng& rng, std::vector<TrainLogRow>* log = nullptr);

}  // namespace safm
