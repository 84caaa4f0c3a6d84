#pragma once

#include <cstdint>
#include <vector>

#include "safm/adapter.hpp"
#include "safm/rng.hpp"
#include "safm/tensor.hpp"

namespace safm {

// Toy decoder-only transformer configuration. The vocabulary is laid out as
// [PAD, SEP, EOS, task tokens, base tokens].
struct ModelConfig {
  int layers = 4;
  int width = 32;
  int heads = 2;
  int max_seq = 32;
  int bottleneck = 8;
  int base_vocab = 64;
  int max_tasks = 16;

  static constexpr int kPad = 0;
  static constexpr int kSep = 1;
  static constexpr int kEos = 2;

  int vocab() const { return 3 + max_tasks + base_vocab; }
  int task_token(int task) const;        // tasks are 1-based
  int base_token(int index) const;       // index in [0, base_vocab)
  int ffn_width() const { return 4 * width; }
  void validate() const;
};

struct LayerParams {
  TensorPtr ln1_gain, ln1_bias;
  TensorPtr w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  TensorPtr ln2_gain, ln2_bias;
  TensorPtr w_ff1, b_ff1, w_ff2, b_ff2;
};

// All backbone weights; output projection is untied from the embedding.
struct BackboneParams {
  TensorPtr tok_emb;  // [V, d]
  TensorPtr pos_emb;  // [max_seq, d]
  std::vector<LayerParams> layers;
  TensorPtr lnf_gain, lnf_bias;
  TensorPtr w_head, b_head;  // [d, V], [V]

  static BackboneParams init(const ModelConfig& cfg, Rng& rng);
  std::vector<TensorPtr> parameters() const;
  long long actual_param_count() const;
  static long long param_count(const ModelConfig& cfg);  // closed form
};

// h^0 (post-embedding) followed by the post-adapter state of each layer.
using HiddenTrace = std::vector<TensorPtr>;

struct ForwardResult {
  TensorPtr logits;   // [B, S, V]
  HiddenTrace trace;  // L+1 entries
};

// Transformer block l (1-based) before any adapter: pre-norm causal
// attention followed by a pre-norm feed-forward, both residual.
TensorPtr forward_layer(const BackboneParams& params, const ModelConfig& cfg, int layer,
                        const TensorPtr& h);

TensorPtr embed_tokens(const BackboneParams& params, const std::vector<int>& ids, int batch,
                       int seq);

TensorPtr logits_from_hidden(const BackboneParams& params, const TensorPtr& h);

// Full forward with one adapter (or EMPTY) applied after each layer.
ForwardResult forward_with_route(const BackboneParams& params, const ModelConfig& cfg,
                                 const std::vector<int>& ids, int batch, int seq,
                                 const Route& route, const AdapterStore& store);

struct SamplingConfig {
  int top_k = 0;  // 0 => greedy
  double temperature = 1.0;
  // Switch to greedy decoding once a SEP has been emitted, so sampled inputs
  // get the model's most confident answer.
  bool greedy_answer = false;
};

// Autoregressive continuation of `prefix` until EOS or the sequence reaches
// max_len tokens. Greedy decoding ignores `rng`.
std::vector<int> generate(const BackboneParams& params, const ModelConfig& cfg,
                          const AdapterStore& store, const Route& route,
                          const std::vector<int>& prefix, int max_len,
                          const SamplingConfig& sampling, Rng* rng = nullptr);

}  // namespace safm
