#include "safm/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace safm {

int ModelConfig::task_token(int task) const {
  if (task < 1 || task > max_tasks) {
    throw std::invalid_argument("ModelConfig: task " + std::to_string(task) +
                                " outside capacity of " + std::to_string(max_tasks));
  }
  return 2 + task;
}

int ModelConfig::base_token(int index) const {
  if (index < 0 || index >= base_vocab) {
    throw std::invalid_argument("ModelConfig: base token index out of range");
  }
  return 3 + max_tasks + index;
}

void ModelConfig::validate() const {
  if (width % heads != 0) {
    throw std::invalid_argument("ModelConfig: width must be divisible by heads");
  }
  if (layers < 1 || width < 1 || max_seq < 1 || bottleneck < 1) {
    throw std::invalid_argument("ModelConfig: all dimensions must be positive");
  }
}

namespace {

TensorPtr param(std::vector<int> shape, Rng& rng, double sd) {
  auto t = Tensor::create(std::move(shape), true);
  if (sd > 0.0) {
    for (auto& v : t->values) v = rng.normal(0.0, sd);
  }
  return t;
}

TensorPtr ones_param(int n) {
  auto t = Tensor::create({n}, true);
  std::fill(t->values.begin(), t->values.end(), 1.0);
  return t;
}

}  // namespace

BackboneParams BackboneParams::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const int d = cfg.width;
  const double sd = 0.02;
  BackboneParams p;
  p.tok_emb = param({cfg.vocab(), d}, rng, sd);
  p.pos_emb = param({cfg.max_seq, d}, rng, sd);
  p.layers.resize(cfg.layers);
  for (auto& l : p.layers) {
    l.ln1_gain = ones_param(d);
    l.ln1_bias = param({d}, rng, 0.0);
    l.w_q = param({d, d}, rng, sd);
    l.b_q = param({d}, rng, 0.0);
    l.w_k = param({d, d}, rng, sd);
    l.b_k = param({d}, rng, 0.0);
    l.w_v = param({d, d}, rng, sd);
    l.b_v = param({d}, rng, 0.0);
    l.w_o = param({d, d}, rng, sd);
    l.b_o = param({d}, rng, 0.0);
    l.ln2_gain = ones_param(d);
    l.ln2_bias = param({d}, rng, 0.0);
    l.w_ff1 = param({d, cfg.ffn_width()}, rng, sd);
    l.b_ff1 = param({cfg.ffn_width()}, rng, 0.0);
    l.w_ff2 = param({cfg.ffn_width(), d}, rng, sd);
    l.b_ff2 = param({d}, rng, 0.0);
  }
  p.lnf_gain = ones_param(d);
  p.lnf_bias = param({d}, rng, 0.0);
  p.w_head = param({d, cfg.vocab()}, rng, sd);
  p.b_head = param({cfg.vocab()}, rng, 0.0);
  return p;
}

std::vector<TensorPtr> BackboneParams::parameters() const {
  std::vector<TensorPtr> out = {tok_emb, pos_emb};
  for (const auto& l : layers) {
    for (const auto& t : {l.ln1_gain, l.ln1_bias, l.w_q, l.b_q, l.w_k, l.b_k, l.w_v, l.b_v,
                          l.w_o, l.b_o, l.ln2_gain, l.ln2_bias, l.w_ff1, l.b_ff1, l.w_ff2,
                          l.b_ff2}) {
      out.push_back(t);
    }
  }
  out.push_back(lnf_gain);
  out.push_back(lnf_bias);
  out.push_back(w_head);
  out.push_back(b_head);
  return out;
}

long long BackboneParams::actual_param_count() const {
  long long n = 0;
  for (const auto& p : parameters()) n += p->size();
  return n;
}

long long BackboneParams::param_count(const ModelConfig& cfg) {
  const long long d = cfg.width;
  const long long f = cfg.ffn_width();
  const long long v = cfg.vocab();
  long long per_layer = 2 * d                    // ln1
                        + 4 * (d * d + d)        // q, k, v, o
                        + 2 * d                  // ln2
                        + d * f + f + f * d + d; // ffn
  return v * d + cfg.max_seq * d + cfg.layers * per_layer + 2 * d + d * v + v;
}

TensorPtr forward_layer(const BackboneParams& params, const ModelConfig& cfg, int layer,
                        const TensorPtr& h) {
  if (layer < 1 || layer > cfg.layers) {
    throw std::invalid_argument("forward_layer: layer index " + std::to_string(layer) +
                                " outside 1.." + std::to_string(cfg.layers));
  }
  if (h->shape.size() != 3 || h->shape[2] != cfg.width) {
    throw std::invalid_argument("forward_layer: expected [B,S," + std::to_string(cfg.width) +
                                "], got " + h->shape_str());
  }
  const LayerParams& l = params.layers[layer - 1];
  auto x = layer_norm(h, l.ln1_gain, l.ln1_bias);
  auto q = add_bias(matmul(x, l.w_q), l.b_q);
  auto k = add_bias(matmul(x, l.w_k), l.b_k);
  auto v = add_bias(matmul(x, l.w_v), l.b_v);
  auto probs = softmax_last(attention_scores(q, k, cfg.heads));
  auto mixed = attention_mix(probs, v, cfg.heads);
  auto a = add(h, add_bias(matmul(mixed, l.w_o), l.b_o));
  auto y = layer_norm(a, l.ln2_gain, l.ln2_bias);
  auto ff = add_bias(matmul(gelu(add_bias(matmul(y, l.w_ff1), l.b_ff1)), l.w_ff2), l.b_ff2);
  return add(a, ff);
}

TensorPtr embed_tokens(const BackboneParams& params, const std::vector<int>& ids, int batch,
                       int seq) {
  return embed(params.tok_emb, params.pos_emb, ids, batch, seq);
}

TensorPtr logits_from_hidden(const BackboneParams& params, const TensorPtr& h) {
  auto n = layer_norm(h, params.lnf_gain, params.lnf_bias);
  return add_bias(matmul(n, params.w_head), params.b_head);
}

ForwardResult forward_with_route(const BackboneParams& params, const ModelConfig& cfg,
                                 const std::vector<int>& ids, int batch, int seq,
                                 const Route& route, const AdapterStore& store) {
  if (route.num_layers() != cfg.layers) {
    throw std::invalid_argument("forward_with_route: route has " +
                                std::to_string(route.num_layers()) + " entries, model has " +
                                std::to_string(cfg.layers) + " layers");
  }
  ForwardResult res;
  auto h = embed_tokens(params, ids, batch, seq);
  res.trace.push_back(h);
  for (int l = 1; l <= cfg.layers; ++l) {
    h = store.apply_adapter(route.entries[l - 1], forward_layer(params, cfg, l, h));
    res.trace.push_back(h);
  }
  res.logits = logits_from_hidden(params, h);
  return res;
}

std::vector<int> generate(const BackboneParams& params, const ModelConfig& cfg,
                          const AdapterStore& store, const Route& route,
                          const std::vector<int>& prefix, int max_len,
                          const SamplingConfig& sampling, Rng* rng) {
  if (prefix.empty() || static_cast<int>(prefix.size()) > max_len) {
    throw std::invalid_argument("generate: prefix must be non-empty and within max_len");
  }
  NoGradScope ng;
  std::vector<int> seq = prefix;
  bool seen_sep =
      std::find(prefix.begin(), prefix.end(), ModelConfig::kSep) != prefix.end();
  while (static_cast<int>(seq.size()) < max_len && static_cast<int>(seq.size()) < cfg.max_seq) {
    auto res = forward_with_route(params, cfg, seq, 1, static_cast<int>(seq.size()), route, store);
    const int vocab = cfg.vocab();
    const double* row = res.logits->values.data() + (seq.size() - 1) * vocab;
    int next;
    if (sampling.top_k <= 0 || (sampling.greedy_answer && seen_sep)) {
      next = static_cast<int>(std::max_element(row, row + vocab) - row);
    } else {
      if (!rng) throw std::invalid_argument("generate: top-k sampling needs an rng");
      std::vector<int> order(vocab);
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + sampling.top_k, order.end(),
                        [row](int a, int b) { return row[a] > row[b]; });
      std::vector<double> probs(sampling.top_k);
      double mx = row[order[0]], z = 0.0;
      for (int i = 0; i < sampling.top_k; ++i) {
        probs[i] = std::exp((row[order[i]] - mx) / std::max(sampling.temperature, 1e-6));
        z += probs[i];
      }
      double u = rng->uniform() * z, acc = 0.0;
      next = order[sampling.top_k - 1];
      for (int i = 0; i < sampling.top_k; ++i) {
        acc += probs[i];
        if (u < acc) {
          next = order[i];
          break;
        }
      }
    }
    seq.push_back(next);
    if (next == ModelConfig::kSep) seen_sep = true;
    if (next == ModelConfig::kEos) break;
  }
  return seq;
}

}  // namespace safm
