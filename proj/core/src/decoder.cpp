#include "metalm/decoder.hpp"

#include <cmath>

namespace metalm {

void ModelConfig::validate() const {
  require(d_model > 0 && n_layers > 0 && n_heads > 0 && n_kv_heads > 0 && d_ff > 0 &&
              vocab_size > 0 && max_seq_len > 0,
          ErrorKind::config, "model config: all sizes must be positive");
  require(d_model % n_heads == 0, ErrorKind::config,
          "model config: d_model must be divisible by n_heads");
  require(n_heads % n_kv_heads == 0, ErrorKind::config,
          "model config: n_heads must be divisible by n_kv_heads");
  require(head_dim() % 2 == 0, ErrorKind::config,
          "model config: head dimension must be even for rotary positions");
  require(norm_eps > 0, ErrorKind::config, "model config: norm_eps must be positive");
  require(rope_theta > 0, ErrorKind::config, "model config: rope_theta must be positive");
}

ModelConfig tier_config(const std::string& name) {
  ModelConfig cfg;
  if (name == "desk") {
    cfg = ModelConfig{16, 2, 2, 1, 64, 256, 32, 1e-6, 10000.0};
  } else if (name == "tiny") {
    cfg = ModelConfig{96, 12, 12, 4, 384, 50304, 2048, 1e-6, 10000.0};
  } else if (name == "small") {
    cfg = ModelConfig{384, 12, 12, 4, 1536, 50304, 2048, 1e-6, 10000.0};
  } else if (name == "medium") {
    cfg = ModelConfig{768, 12, 12, 4, 3072, 50304, 2048, 1e-6, 10000.0};
  } else if (name == "large") {
    cfg = ModelConfig{1536, 12, 12, 4, 6144, 50304, 2048, 1e-6, 10000.0};
  } else {
    fail(ErrorKind::config, "unknown model tier '" + name + "'");
  }
  cfg.validate();
  return cfg;
}

int64_t parameter_count(const ModelConfig& cfg) {
  int64_t per_layer = cfg.d_model * cfg.d_model * 2        // wq, wo
                      + cfg.d_model * cfg.kv_dim() * 2     // wk, wv
                      + cfg.d_model * 2                    // attn_gain, ffn_gain
                      + cfg.d_model * cfg.d_ff * 3;        // gate, up, down
  return cfg.vocab_size * cfg.d_model * 2                  // embedding + output projection
         + cfg.n_layers * per_layer + cfg.d_model;         // final gain
}

template <class T>
DecoderParamsT<T> DecoderParamsT<T>::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  constexpr T kStd = static_cast<T>(0.02);
  DecoderParamsT<T> p;
  p.config = cfg;
  p.token_embedding = TensorT<T>::randn({cfg.vocab_size, cfg.d_model}, rng, kStd);
  p.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& layer : p.layers) {
    layer.wq = TensorT<T>::randn({cfg.d_model, cfg.d_model}, rng, kStd);
    layer.wk = TensorT<T>::randn({cfg.d_model, cfg.kv_dim()}, rng, kStd);
    layer.wv = TensorT<T>::randn({cfg.d_model, cfg.kv_dim()}, rng, kStd);
    layer.wo = TensorT<T>::randn({cfg.d_model, cfg.d_model}, rng, kStd);
    layer.attn_gain = TensorT<T>::full({cfg.d_model}, T(1));
    layer.w_gate = TensorT<T>::randn({cfg.d_model, cfg.d_ff}, rng, kStd);
    layer.w_up = TensorT<T>::randn({cfg.d_model, cfg.d_ff}, rng, kStd);
    layer.w_down = TensorT<T>::randn({cfg.d_ff, cfg.d_model}, rng, kStd);
    layer.ffn_gain = TensorT<T>::full({cfg.d_model}, T(1));
  }
  p.final_gain = TensorT<T>::full({cfg.d_model}, T(1));
  p.output_projection = TensorT<T>::randn({cfg.vocab_size, cfg.d_model}, rng, kStd);
  return p;
}

template <class T>
std::vector<std::pair<std::string, TensorT<T>>> DecoderParamsT<T>::named_tensors() const {
  std::vector<std::pair<std::string, TensorT<T>>> out;
  out.emplace_back("tok_emb", token_embedding);
  for (size_t i = 0; i < layers.size(); ++i) {
    std::string prefix = "layers." + std::to_string(i) + ".";
    out.emplace_back(prefix + "wq", layers[i].wq);
    out.emplace_back(prefix + "wk", layers[i].wk);
    out.emplace_back(prefix + "wv", layers[i].wv);
    out.emplace_back(prefix + "wo", layers[i].wo);
    out.emplace_back(prefix + "attn_gain", layers[i].attn_gain);
    out.emplace_back(prefix + "w_gate", layers[i].w_gate);
    out.emplace_back(prefix + "w_up", layers[i].w_up);
    out.emplace_back(prefix + "w_down", layers[i].w_down);
    out.emplace_back(prefix + "ffn_gain", layers[i].ffn_gain);
  }
  out.emplace_back("final_gain", final_gain);
  out.emplace_back("out_proj", output_projection);
  return out;
}

template <class T>
DecoderParamsT<T>& DecoderParamsT<T>::set_requires_grad(bool v) {
  for (auto& [name, t] : named_tensors()) t.set_requires_grad(v);
  return *this;
}

template <class T>
void DecoderParamsT<T>::zero_grad() {
  for (auto& [name, t] : named_tensors()) t.zero_grad();
}

template <class T>
int64_t DecoderParamsT<T>::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named_tensors()) n += t.numel();
  return n;
}

template <class T>
DecoderParamsT<T> DecoderParamsT<T>::clone() const {
  DecoderParamsT<T> out;
  out.config = config;
  out.token_embedding = token_embedding.clone();
  out.layers.resize(layers.size());
  for (size_t i = 0; i < layers.size(); ++i) {
    out.layers[i].wq = layers[i].wq.clone();
    out.layers[i].wk = layers[i].wk.clone();
    out.layers[i].wv = layers[i].wv.clone();
    out.layers[i].wo = layers[i].wo.clone();
    out.layers[i].attn_gain = layers[i].attn_gain.clone();
    out.layers[i].w_gate = layers[i].w_gate.clone();
    out.layers[i].w_up = layers[i].w_up.clone();
    out.layers[i].w_down = layers[i].w_down.clone();
    out.layers[i].ffn_gain = layers[i].ffn_gain.clone();
  }
  out.final_gain = final_gain.clone();
  out.output_projection = output_projection.clone();
  return out;
}

template <class T>
TensorT<T> rmsnorm(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gain, double eps) {
  return rmsnorm_rows(tape, x, gain, eps);
}

template <class T>
TensorT<T> gqa_attention(TapeT<T>* tape, const TensorT<T>& x, const DecoderLayerT<T>& layer,
                         const ModelConfig& cfg, std::span<const int32_t> positions) {
  int64_t dh = cfg.head_dim();
  auto q = matmul(tape, x, layer.wq);  // [t, d_model]
  auto k = matmul(tape, x, layer.wk);  // [t, kv_dim]
  auto v = matmul(tape, x, layer.wv);  // [t, kv_dim]

  std::vector<TensorT<T>> k_rot(static_cast<size_t>(cfg.n_kv_heads));
  std::vector<TensorT<T>> v_head(static_cast<size_t>(cfg.n_kv_heads));
  for (int64_t g = 0; g < cfg.n_kv_heads; ++g) {
    auto kg = slice_cols(tape, k, g * dh, (g + 1) * dh);
    k_rot[static_cast<size_t>(g)] = rope_rows(tape, kg, positions, cfg.rope_theta);
    v_head[static_cast<size_t>(g)] = slice_cols(tape, v, g * dh, (g + 1) * dh);
  }

  T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<TensorT<T>> contexts;
  contexts.reserve(static_cast<size_t>(cfg.n_heads));
  for (int64_t h = 0; h < cfg.n_heads; ++h) {
    auto qh = slice_cols(tape, q, h * dh, (h + 1) * dh);
    auto qh_rot = rope_rows(tape, qh, positions, cfg.rope_theta);
    int64_t g = h / cfg.group_size();
    auto scores = scale(tape, matmul_nt(tape, qh_rot, k_rot[static_cast<size_t>(g)]), inv_sqrt_dh);
    auto probs = causal_softmax_rows(tape, scores);
    contexts.push_back(matmul(tape, probs, v_head[static_cast<size_t>(g)]));
  }
  auto ctx = concat_cols(tape, contexts);
  return matmul(tape, ctx, layer.wo);
}

template <class T>
TensorT<T> swiglu_ffn(TapeT<T>* tape, const TensorT<T>& x, const DecoderLayerT<T>& layer) {
  auto gate = silu(tape, matmul(tape, x, layer.w_gate));
  auto up = matmul(tape, x, layer.w_up);
  return matmul(tape, mul(tape, gate, up), layer.w_down);
}

template <class T>
TensorT<T> decoder_hidden(TapeT<T>* tape, const DecoderParamsT<T>& params,
                          std::span<const int32_t> ids, const DropoutSpec* drop) {
  const auto& cfg = params.config;
  int64_t t = static_cast<int64_t>(ids.size());
  require(t >= 1, ErrorKind::shape, "decoder: empty input sequence");
  require(t <= cfg.max_seq_len, ErrorKind::shape,
          "decoder: sequence length " + std::to_string(t) + " exceeds max_seq_len " +
              std::to_string(cfg.max_seq_len));
  std::vector<int32_t> positions(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) positions[static_cast<size_t>(i)] = static_cast<int32_t>(i);

  bool dropping = drop != nullptr && drop->rate > 0.0;
  if (dropping)
    require(drop->rng != nullptr, ErrorKind::config, "dropout requires a generator");
  auto maybe_drop = [&](TensorT<T> x) {
    return dropping ? dropout(tape, x, drop->rate, *drop->rng) : x;
  };

  auto h = embedding_rows(tape, params.token_embedding, ids);
  for (const auto& layer : params.layers) {
    auto attn_in = rmsnorm(tape, h, layer.attn_gain, cfg.norm_eps);
    h = add(tape, h, maybe_drop(gqa_attention(tape, attn_in, layer, cfg, positions)));
    auto ffn_in = rmsnorm(tape, h, layer.ffn_gain, cfg.norm_eps);
    h = add(tape, h, maybe_drop(swiglu_ffn(tape, ffn_in, layer)));
  }
  return rmsnorm(tape, h, params.final_gain, cfg.norm_eps);
}

template <class T>
TensorT<T> forward_logits(TapeT<T>* tape, const DecoderParamsT<T>& params,
                          std::span<const int32_t> ids, const DropoutSpec* drop) {
  auto h = decoder_hidden(tape, params, ids, drop);
  return matmul_nt(tape, h, params.output_projection);
}

template <class T>
TensorT<T> next_token_loss(TapeT<T>* tape, const DecoderParamsT<T>& params,
                           std::span<const int32_t> tokens, const DropoutSpec* drop) {
  int64_t n = static_cast<int64_t>(tokens.size());
  require(n >= 2, ErrorKind::shape, "next_token_loss: need at least two tokens");
  require(n <= params.config.max_seq_len + 1, ErrorKind::shape,
          "next_token_loss: sequence length " + std::to_string(n) + " exceeds max_seq_len + 1");
  auto logits = forward_logits(tape, params, tokens.subspan(0, static_cast<size_t>(n - 1)), drop);
  return cross_entropy_rows(tape, logits, tokens.subspan(1), -1);
}

#define METALM_INSTANTIATE_DECODER(T)                                                      \
  template struct DecoderParamsT<T>;                                                      \
  template TensorT<T> rmsnorm<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&, double); \
  template TensorT<T> gqa_attention<T>(TapeT<T>*, const TensorT<T>&, const DecoderLayerT<T>&, \
                                       const ModelConfig&, std::span<const int32_t>);      \
  template TensorT<T> swiglu_ffn<T>(TapeT<T>*, const TensorT<T>&, const DecoderLayerT<T>&); \
  template TensorT<T> decoder_hidden<T>(TapeT<T>*, const DecoderParamsT<T>&,               \
                                        std::span<const int32_t>, const DropoutSpec*);     \
  template TensorT<T> forward_logits<T>(TapeT<T>*, const DecoderParamsT<T>&,               \
                                        std::span<const int32_t>, const DropoutSpec*);     \
  template TensorT<T> next_token_loss<T>(TapeT<T>*, const DecoderParamsT<T>&,              \
                                         std::span<const int32_t>, const DropoutSpec*);

METALM_INSTANTIATE_DECODER(float)
METALM_INSTANTIATE_DECODER(double)

#undef METALM_INSTANTIATE_DECODER

}  // namespace metalm
