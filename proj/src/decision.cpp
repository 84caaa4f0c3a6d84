#include "safm/decision.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace safm {

std::vector<int> default_no_as_layers(int num_layers) {
  return {static_cast<int>(std::ceil(num_layers / 2.0)) + 1};
}

std::vector<double> init_lambda(int k, double alpha, double beta, bool strict) {
  if (k < 0) throw std::invalid_argument("init_lambda: k must be non-negative");
  if (strict && !(alpha > beta && beta > 0.0)) {
    throw std::invalid_argument("init_lambda: requires alpha > beta > 0, got alpha=" +
                                std::to_string(alpha) + " beta=" + std::to_string(beta));
  }
  std::vector<double> lam(k + 2);
  double phi = std::exp(alpha) + k * std::exp(beta) + std::exp(-beta);
  lam[0] = std::exp(alpha) / phi;
  for (int j = 1; j <= k; ++j) lam[j] = std::exp(beta) / phi;
  lam[k + 1] = std::exp(-beta) / phi;
  return lam;
}

std::vector<RouteEntry> build_candidates(int layer, const std::vector<Route>& prior_routes,
                                         AdapterId fresh, bool include_empty) {
  std::vector<RouteEntry> out;
  if (include_empty) out.push_back(std::nullopt);
  for (AdapterId id : AdapterStore::unique_adapters_at_layer(layer, prior_routes)) {
    out.push_back(id);
  }
  out.push_back(fresh);
  return out;
}

std::vector<double> FusionState::lambda_at(int layer) const {
  const FusionLayerState& st = layers.at(layer - 1);
  if (st.no_as) throw std::logic_error("lambda_at: layer " + std::to_string(layer) + " is no-AS");
  std::vector<double> lam(st.candidates.size(), 0.0);
  if (st.forced_one_hot) {
    lam.at(*st.forced_one_hot) = 1.0;
    return lam;
  }
  double mx = *std::max_element(st.logits->values.begin(), st.logits->values.end());
  double z = 0.0;
  for (std::size_t i = 0; i < lam.size(); ++i) {
    lam[i] = std::exp(st.logits->values[i] - mx);
    z += lam[i];
  }
  for (auto& v : lam) v /= z;
  return lam;
}

FusionState begin_decision(const ModelConfig& cfg, const DecisionConfig& dcfg,
                           AdapterStore& store, int task, Rng& rng) {
  std::vector<int> no_as = dcfg.no_as_layers;
  if (no_as.empty()) no_as = default_no_as_layers(cfg.layers);

  FusionState fusion;
  fusion.task = task;
  fusion.layers.resize(cfg.layers);
  for (int l = 1; l <= cfg.layers; ++l) {
    fusion.fresh.push_back(store.new_adapter(l, task, rng));
  }
  for (int l = 1; l <= cfg.layers; ++l) {
    FusionLayerState& st = fusion.layers[l - 1];
    st.no_as = std::find(no_as.begin(), no_as.end(), l) != no_as.end();
    if (st.no_as) continue;
    st.candidates = build_candidates(l, store.routes(), fusion.fresh[l - 1], dcfg.include_empty);
    const int k = static_cast<int>(st.candidates.size()) - (dcfg.include_empty ? 2 : 1);
    st.logits = Tensor::create({static_cast<int>(st.candidates.size())}, true);
    if (dcfg.strict_ordering && !(dcfg.alpha > dcfg.beta && dcfg.beta > 0.0)) {
      throw std::invalid_argument("begin_decision: requires alpha > beta > 0");
    }
    int i = 0;
    if (dcfg.include_empty) st.logits->values[i++] = dcfg.alpha;
    for (int j = 0; j < k; ++j) st.logits->values[i++] = dcfg.beta;
    st.logits->values[i] = -dcfg.beta;
  }
  return fusion;
}

namespace {

std::vector<std::vector<Sample>> epoch_batches(const std::vector<Sample>& data, int batch_size,
                                               Rng& rng) {
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<std::vector<Sample>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    std::vector<Sample> b;
    for (std::size_t j = i; j < order.size() && j < i + batch_size; ++j) {
      b.push_back(data[order[j]]);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace

void warmup(const BackboneParams& backbone, const ModelConfig& cfg, const DecisionConfig& dcfg,
            AdapterStore& store, const FusionState& fusion, const std::vector<Sample>& train,
            Rng& rng) {
  Route hard{fusion.task, {}};
  std::vector<TensorPtr> params;
  for (AdapterId id : fusion.fresh) {
    hard.entries.push_back(id);
    for (const auto& p : store.get(id).parameters()) params.push_back(p);
  }
  AdamW opt(params, {dcfg.adapter_lr, 0.9, 0.999, 1e-8, dcfg.weight_decay});
  for (int epoch = 0; epoch < dcfg.warmup_epochs; ++epoch) {
    for (const auto& batch : epoch_batches(train, dcfg.batch_size, rng)) {
      EncodedBatch enc = encode_batch(cfg, batch);
      TapeScope ts;
      auto res = forward_with_route(backbone, cfg, enc.ids, enc.batch, enc.seq, hard, store);
      auto loss = cross_entropy_loss(res.logits, enc.targets, enc.answer_mask);
      opt.zero_grad();
      backward(loss);
      opt.step();
    }
  }
}

std::pair<TensorPtr, HiddenTrace> fused_forward(const BackboneParams& backbone,
                                                const ModelConfig& cfg,
                                                const AdapterStore& store,
                                                const FusionState& fusion,
                                                const EncodedBatch& batch) {
  HiddenTrace trace;
  auto h = embed_tokens(backbone, batch.ids, batch.batch, batch.seq);
  trace.push_back(h);
  for (int l = 1; l <= cfg.layers; ++l) {
    const FusionLayerState& st = fusion.layers[l - 1];
    auto base = forward_layer(backbone, cfg, l, h);
    if (st.no_as) {
      h = store.apply_adapter(fusion.fresh[l - 1], base);
      trace.push_back(h);
      continue;
    }
    TensorPtr mixed;
    if (st.forced_one_hot) {
      // Exact one-hot: evaluate only the selected branch so the mixture
      // degenerates to the hard route bit-for-bit.
      mixed = store.apply_adapter(st.candidates.at(*st.forced_one_hot), base);
    } else {
      auto lam = softmax_vec(st.logits);
      for (const double v : lam->values) {
        if (!std::isfinite(v)) {
          throw std::runtime_error("fused_forward: non-finite mixture weight at layer " +
                                   std::to_string(l));
        }
      }
      for (std::size_t i = 0; i < st.candidates.size(); ++i) {
        auto branch = scale_by_element(store.apply_adapter(st.candidates[i], base), lam,
                                       static_cast<int>(i));
        mixed = mixed ? add(mixed, branch) : branch;
      }
    }
    h = mixed;
    trace.push_back(h);
  }
  auto logits = logits_from_hidden(backbone, h);
  auto loss = cross_entropy_loss(logits, batch.targets, batch.answer_mask);
  return {loss, trace};
}

void run_architecture_search(const BackboneParams& backbone, const ModelConfig& cfg,
                             const DecisionConfig& dcfg, AdapterStore& store,
                             FusionState& fusion, const std::vector<Sample>& train, Rng& rng) {
  std::vector<TensorPtr> adapter_params;
  for (AdapterId id : fusion.fresh) {
    for (const auto& p : store.get(id).parameters()) adapter_params.push_back(p);
  }
  std::vector<TensorPtr> logit_params;
  for (const auto& st : fusion.layers) {
    if (st.logits) logit_params.push_back(st.logits);
  }
  AdamW opt_adapters(adapter_params, {dcfg.adapter_lr, 0.9, 0.999, 1e-8, dcfg.weight_decay});
  AdamW opt_logits(logit_params, {dcfg.logit_lr, 0.9, 0.999, 1e-8, 0.0});
  for (int epoch = 0; epoch < dcfg.search_epochs; ++epoch) {
    for (const auto& batch : epoch_batches(train, dcfg.batch_size, rng)) {
      EncodedBatch enc = encode_batch(cfg, batch);
      TapeScope ts;
      auto [loss, trace] = fused_forward(backbone, cfg, store, fusion, enc);
      opt_adapters.zero_grad();
      opt_logits.zero_grad();
      backward(loss);
      opt_adapters.step();
      opt_logits.step();
    }
  }
}

std::string route_entry_name(const RouteEntry& e) {
  return e ? "A" + std::to_string(e->value) : "empty";
}

Route select_route(AdapterStore& store, const FusionState& fusion,
                   std::vector<DecisionLogRow>* log) {
  Route route{fusion.task, {}};
  for (std::size_t li = 0; li < fusion.layers.size(); ++li) {
    const FusionLayerState& st = fusion.layers[li];
    const AdapterId fresh = fusion.fresh[li];
    DecisionLogRow row;
    row.task = fusion.task;
    row.layer = static_cast<int>(li) + 1;
    row.no_as = st.no_as;
    RouteEntry selected;
    if (st.no_as) {
      selected = fresh;
    } else {
      std::vector<double> lam = fusion.lambda_at(static_cast<int>(li) + 1);
      // Candidate order [empty, reused in first-use order, new] makes a plain
      // first-max argmax implement the tie-break preference.
      std::size_t best = 0;
      for (std::size_t i = 1; i < lam.size(); ++i) {
        if (lam[i] > lam[best]) best = i;
      }
      selected = st.candidates[best];
      for (const auto& c : st.candidates) row.candidates.push_back(route_entry_name(c));
      row.lambda = lam;
      if (!(selected && *selected == fresh)) store.remove(fresh);
    }
    row.selected = route_entry_name(selected);
    route.entries.push_back(selected);
    if (log) log->push_back(std::move(row));
  }
  return route;
}

}  // namespace safm
