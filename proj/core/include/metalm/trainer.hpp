#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "metalm/collectives.hpp"
#include "metalm/corpus.hpp"
#include "metalm/decoder.hpp"
#include "metalm/episodes.hpp"
#include "metalm/optimizer.hpp"

namespace metalm {

// Stream purposes for counter-derived randomness. Every random decision is
// drawn from a generator seeded by (master seed, purpose, step, lane), so any
// step reproduces without replaying the steps before it and a resumed run is
// bitwise identical to an uninterrupted one.
enum StreamPurpose : uint64_t {
  kStreamInit = 1,
  kStreamBranch = 2,
  kStreamBatch = 3,
  kStreamEpisode = 4,
  kStreamDropout = 5,
  kStreamCheckpoint = 6,
};

// Two-layer classifier head applied to pooled masked-position features.
// Meta-trained by the outer loop; episodes adapt a private copy of it.
struct MetaHead {
  Tensor w1;  // [d_model, hidden]
  Tensor w2;  // [hidden, n_way]

  static MetaHead init(int64_t d_model, int64_t hidden, int64_t n_way, Rng& rng);
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
};

struct MetaConfig {
  int64_t n_way = 4;
  int64_t k_shot = 2;
  int64_t n_query = 2;
  int64_t inner_steps = 10;
  double inner_lr = 0.05;
  int64_t head_hidden = 32;
  double max_doc_frac = 0.2;
  // Copy the adapted head's gradients back onto the meta head (first-order
  // treatment of the inner loop as identity).
  bool grad_transport = true;
};

struct EpisodeUpdate {
  double query_loss = 0.0;
  double support_acc_pre = 0.0;   // unadapted head on the adaptation rows
  double support_acc_post = 0.0;  // adapted head on the adaptation rows
  double query_acc = 0.0;         // adapted head on held-out rows, no dropout
  bool first_order_clean = false;
};

// One first-order episode update. Support features are extracted without
// gradient tracking, a cloned head takes inner_steps of SGD on them, and the
// query loss of the adapted head (scaled by loss_scale) backpropagates into
// the backbone. Gradients accumulate in place on `params` and, when
// grad_transport is set, on `head`. The inner loop is asserted to leave no
// trace in the outer graph.
EpisodeUpdate maml_episode_update(DecoderParams& params, MetaHead& head, const Episode& ep,
                                  const MetaConfig& mc, float loss_scale, const DropoutSpec* drop);

struct TrainConfig {
  ModelConfig model;
  MetaConfig meta;
  LrSchedule lr;
  AdamWOptions adamw;
  int64_t world_size = 1;
  int64_t total_steps = 50;
  int64_t checkpoint_every = 25;
  int64_t batch_size = 8;   // rows per micro-step, shared by all ranks
  int64_t accum_steps = 1;  // micro-steps per optimizer step
  double meta_mix = 0.3;    // chance an optimizer step trains on an episode
  double dropout = 0.0;
  uint64_t seed = 0;
  int64_t heldout_rows = 8;  // tail rows reserved for perplexity tracking
  std::filesystem::path out_dir;  // empty: no checkpoints or metrics written
  // Test hook: derive dropout streams per rank instead of shared; breaks
  // world-size invariance on purpose to prove the gradient exchange is real.
  bool desync_rng_for_test = false;

  void validate() const;
};

struct RankTrace {
  std::vector<int8_t> branches;  // 0 = next-token step, 1 = episode step
  std::vector<double> losses;
  std::vector<std::pair<std::string, std::vector<float>>> final_weights;
};

struct TrainResult {
  std::vector<RankTrace> ranks;
  std::vector<std::pair<int64_t, double>> heldout;  // (completed steps, loss)
  int64_t checkpoints_written = 0;
};

// Runs the hybrid pretraining loop on world_size in-process ranks. Every rank
// assembles the same global batch through scatter/all-gather, computes the
// same loss, and applies the same reduced gradients, so traces and final
// weights agree bitwise across ranks and across world sizes. Pass a
// checkpoint directory as `resume_from` to continue a run.
TrainResult train_lm(const TrainConfig& cfg, const PretokenizedCorpus& corpus, const Vocab& vocab,
                     const std::filesystem::path& resume_from = {});

// Mean next-token loss over a set of rows, no dropout, no gradients.
double corpus_loss(const DecoderParams& params, const PretokenizedCorpus& corpus, int64_t row0,
                   int64_t row1);

}  // namespace metalm
