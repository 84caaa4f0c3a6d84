#include "safm/tuning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>

namespace safm {

std::vector<int> replay_targets(const Route& current, const std::vector<Route>& prior) {
  std::vector<int> out;
  for (const auto& r : prior) {
    if (r.task != current.task && current.shares_adapter_with(r)) out.push_back(r.task);
  }
  return out;
}

std::vector<Sample> generate_pseudo_samples(const BackboneParams& backbone,
                                            const ModelConfig& cfg, const AdapterStore& store,
                                            const Route& target_route, int target_task,
                                            int count, const SamplingConfig& sampling,
                                            Rng& rng, bool* degraded) {
  if (degraded) *degraded = false;
  if (count <= 0) return {};
  std::vector<Sample> accepted;
  const int max_attempts = 5 * count;
  for (int attempt = 0; attempt < max_attempts && static_cast<int>(accepted.size()) < count;
       ++attempt) {
    auto seq = generate(backbone, cfg, store, target_route, {cfg.task_token(target_task)},
                        cfg.max_seq, sampling, &rng);
    auto parsed = parse_sample(cfg, seq);
    if (parsed && parsed->task == target_task) accepted.push_back(*parsed);
  }
  if (accepted.empty()) {
    if (degraded) *degraded = true;
    return {};
  }
  // Pad by cycling when acceptance fell short; keeps batch sizes predictable.
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i) out.push_back(accepted[i % accepted.size()]);
  return out;
}

TensorPtr layerwise_loss(const HiddenTrace& trace, const Route& route) {
  if (static_cast<int>(trace.size()) != route.num_layers() + 1) {
    throw std::invalid_argument("layerwise_loss: trace has " + std::to_string(trace.size()) +
                                " states for " + std::to_string(route.num_layers()) + " layers");
  }
  TensorPtr total;
  for (int l = 1; l <= route.num_layers(); ++l) {
    if (!route.entries[l - 1]) continue;
    auto term = mean_all(cosine_similarity(trace[l], trace[l - 1]));
    total = total ? add(total, term) : term;
  }
  return total ? total : Tensor::scalar(0.0);
}

namespace {

struct TuneBatch {
  const Route* route;
  EncodedBatch enc;
  bool current;
};

}  // namespace

void tune(const BackboneParams& backbone, const ModelConfig& cfg, AdapterStore& store,
          const Route& route, const std::vector<Sample>& train,
          const std::map<int, std::vector<Sample>>& replay, const TuneConfig& tcfg,
          bool backbone_trainable, Rng& rng, std::vector<TrainLogRow>* log) {
  std::vector<TensorPtr> params;
  std::set<int> seen;
  for (const auto& e : route.entries) {
    if (!e || !seen.insert(e->value).second) continue;
    for (const auto& p : store.get(*e).parameters()) params.push_back(p);
  }
  if (backbone_trainable) {
    for (const auto& p : backbone.parameters()) params.push_back(p);
  }
  if (params.empty()) return;
  AdamW opt(params, {tcfg.lr, 0.9, 0.999, 1e-8, tcfg.weight_decay});

  int replay_total = 0;
  for (const auto& [task, samples] : replay) {
    (void)task;
    replay_total += static_cast<int>(samples.size());
  }

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::vector<TuneBatch> batches;
    auto add_batches = [&](const std::vector<Sample>& data, const Route& r, bool current) {
      std::vector<int> order(data.size());
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(order);
      for (std::size_t i = 0; i < order.size(); i += tcfg.batch_size) {
        std::vector<Sample> b;
        for (std::size_t j = i; j < order.size() && j < i + tcfg.batch_size; ++j) {
          b.push_back(data[order[j]]);
        }
        batches.push_back({&r, encode_batch(cfg, b), current});
      }
    };
    add_batches(train, route, true);
    for (const auto& [task, samples] : replay) {
      if (!samples.empty()) add_batches(samples, store.route_for_task(task), false);
    }
    rng.shuffle(batches);

    double ce_sum = 0.0, lw_sum = 0.0;
    int current_batches = 0;
    for (const auto& tb : batches) {
      TapeScope ts;
      auto res = forward_with_route(backbone, cfg, tb.enc.ids, tb.enc.batch, tb.enc.seq,
                                    *tb.route, store);
      auto ce = cross_entropy_loss(res.logits, tb.enc.targets, tb.enc.answer_mask);
      ce_sum += ce->item();
      auto loss = ce;
      if (tcfg.w_gen != 0.0) {
        loss = add(loss, scale(cross_entropy_loss(res.logits, tb.enc.targets, tb.enc.full_mask),
                               tcfg.w_gen));
      }
      if (tb.current) {
        ++current_batches;
        if (tcfg.w_lw != 0.0) {
          auto lw = layerwise_loss(res.trace, *tb.route);
          lw_sum += lw->item();
          loss = add(loss, scale(lw, tcfg.w_lw));
        }
      }
      if (!std::isfinite(loss->item())) {
        throw std::runtime_error("tune: non-finite loss for task " + std::to_string(route.task) +
                                 " at epoch " + std::to_string(epoch + 1));
      }
      opt.zero_grad();
      backward(loss);
      opt.step();
    }
    if (log) {
      log->push_back({route.task, epoch + 1, "tune",
                      batches.empty() ? 0.0 : ce_sum / batches.size(),
                      current_batches ? lw_sum / current_batches : 0.0, replay_total});
    }
  }
}

}  // namespace safm
