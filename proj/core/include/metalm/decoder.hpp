#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metalm/tensor.hpp"

namespace metalm {

// Decoder-only transformer: pre-norm RMSNorm blocks, rotary positions on q/k,
// grouped-query attention, SwiGLU feed-forward, untied output projection, no
// biases anywhere.
struct ModelConfig {
  int64_t d_model = 16;
  int64_t n_layers = 2;
  int64_t n_heads = 2;
  int64_t n_kv_heads = 1;
  int64_t d_ff = 64;
  int64_t vocab_size = 256;
  int64_t max_seq_len = 32;
  double norm_eps = 1e-6;
  double rope_theta = 10000.0;

  int64_t head_dim() const { return d_model / n_heads; }
  int64_t kv_dim() const { return head_dim() * n_kv_heads; }
  int64_t group_size() const { return n_heads / n_kv_heads; }
  void validate() const;
};

// Named size presets. "desk" is the laptop-scale config used throughout the
// tests; the others match the published scaling ladder.
ModelConfig tier_config(const std::string& name);

// Closed-form parameter count for a config (embedding, per-layer weights and
// gains, final gain, output projection).
int64_t parameter_count(const ModelConfig& cfg);

template <class T>
struct DecoderLayerT {
  TensorT<T> wq, wk, wv, wo;  // [d,d], [d,kv], [d,kv], [d,d]
  TensorT<T> attn_gain, ffn_gain;
  TensorT<T> w_gate, w_up;  // [d, d_ff]
  TensorT<T> w_down;        // [d_ff, d]
};

template <class T>
struct DecoderParamsT {
  ModelConfig config;
  TensorT<T> token_embedding;    // [vocab, d]
  std::vector<DecoderLayerT<T>> layers;
  TensorT<T> final_gain;
  TensorT<T> output_projection;  // [vocab, d]

  // Matrices drawn N(0, 0.02^2), gains start at one. Draw order is the
  // named_tensors order so checkpoints and replicas agree bit for bit.
  static DecoderParamsT init(const ModelConfig& cfg, Rng& rng);

  std::vector<std::pair<std::string, TensorT<T>>> named_tensors() const;
  DecoderParamsT& set_requires_grad(bool v);
  void zero_grad();
  int64_t parameter_count() const;
  DecoderParamsT clone() const;
};

using DecoderParams = DecoderParamsT<float>;
using DecoderParamsD = DecoderParamsT<double>;

template <class T>
TensorT<T> rmsnorm(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gain, double eps);

// x: [t, d_model] already normalized; returns attention output [t, d_model].
template <class T>
TensorT<T> gqa_attention(TapeT<T>* tape, const TensorT<T>& x, const DecoderLayerT<T>& layer,
                         const ModelConfig& cfg, std::span<const int32_t> positions);

// x: [t, d_model] already normalized; down(silu(x Wg) * (x Wu)).
template <class T>
TensorT<T> swiglu_ffn(TapeT<T>* tape, const TensorT<T>& x, const DecoderLayerT<T>& layer);

// Residual-branch dropout during training; leave null for evaluation.
struct DropoutSpec {
  double rate = 0.0;
  Rng* rng = nullptr;
};

// Hidden states after the final RMSNorm: [t, d_model].
template <class T>
TensorT<T> decoder_hidden(TapeT<T>* tape, const DecoderParamsT<T>& params,
                          std::span<const int32_t> ids, const DropoutSpec* drop = nullptr);

// Logits over the vocabulary: [t, vocab].
template <class T>
TensorT<T> forward_logits(TapeT<T>* tape, const DecoderParamsT<T>& params,
                          std::span<const int32_t> ids, const DropoutSpec* drop = nullptr);

// tokens = [x_0 ... x_t]; mean cross entropy of x_{i+1} given prefix. Length
// must be in [2, max_seq_len + 1].
template <class T>
TensorT<T> next_token_loss(TapeT<T>* tape, const DecoderParamsT<T>& params,
                           std::span<const int32_t> tokens, const DropoutSpec* drop = nullptr);

}  // namespace metalm
