#include "metalm/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <optional>
#include <thread>

#include <json.hpp>

#include "metalm/checkpoint.hpp"
#include "metalm/errors.hpp"

namespace metalm {

void TrainConfig::validate() const {
  model.validate();
  lr.validate();
  require(world_size >= 1, ErrorKind::config, "world_size must be at least 1");
  require(total_steps >= 1, ErrorKind::config, "total_steps must be positive");
  require(checkpoint_every >= 1, ErrorKind::config, "checkpoint_every must be positive");
  require(batch_size >= 1, ErrorKind::config, "batch_size must be positive");
  require(accum_steps >= 1, ErrorKind::config, "accum_steps must be positive");
  require(meta_mix >= 0.0 && meta_mix <= 1.0, ErrorKind::config, "meta_mix must lie in [0,1]");
  require(dropout >= 0.0 && dropout < 1.0, ErrorKind::config, "dropout must lie in [0,1)");
  require(heldout_rows >= 0, ErrorKind::config, "heldout_rows must be non-negative");
  require(meta.n_way >= 2, ErrorKind::config, "n_way must be at least 2");
  require(meta.k_shot >= 1 && meta.n_query >= 1, ErrorKind::config,
          "k_shot and n_query must be positive");
  require(meta.inner_steps >= 0, ErrorKind::config, "inner_steps must be non-negative");
  require(meta.inner_lr > 0.0, ErrorKind::config, "inner_lr must be positive");
  require(meta.head_hidden >= 1, ErrorKind::config, "head_hidden must be positive");
}

MetaHead MetaHead::init(int64_t d_model, int64_t hidden, int64_t n_way, Rng& rng) {
  MetaHead h;
  h.w1 = Tensor::randn({d_model, hidden}, rng, static_cast<float>(std::sqrt(2.0 / d_model)));
  h.w2 = Tensor::randn({hidden, n_way}, rng, static_cast<float>(std::sqrt(1.0 / hidden)));
  return h;
}

std::vector<std::pair<std::string, Tensor>> MetaHead::named_tensors() const {
  return {{"meta_head.w1", w1}, {"meta_head.w2", w2}};
}

namespace {

// Pooled masked-position feature for one example, on the caller's tape.
Tensor example_feature(Tape* tape, const DecoderParams& params, const EpisodeExample& ex,
                       const DropoutSpec* drop) {
  require(!ex.masked_positions.empty(), ErrorKind::episode,
          "episode example has no masked positions");
  auto h = decoder_hidden(tape, params, ex.ids, drop);
  Tensor f = row(tape, h, ex.masked_positions[0]);
  for (size_t i = 1; i < ex.masked_positions.size(); ++i)
    f = add(tape, f, row(tape, h, ex.masked_positions[i]));
  return scale(tape, f, static_cast<float>(1.0 / static_cast<double>(ex.masked_positions.size())));
}

Tensor stacked_features(Tape* tape, const DecoderParams& params,
                        const std::vector<EpisodeExample>& exs, const DropoutSpec* drop) {
  std::vector<Tensor> rows;
  rows.reserve(exs.size());
  for (const auto& ex : exs) rows.push_back(example_feature(tape, params, ex, drop));
  return stack_rows(tape, rows);
}

Tensor head_logits(Tape* tape, const Tensor& feats, const Tensor& w1, const Tensor& w2) {
  return matmul(tape, relu(tape, matmul(tape, feats, w1)), w2);
}

double head_accuracy(const Tensor& feats, const Tensor& w1, const Tensor& w2,
                     const std::vector<int32_t>& labels) {
  auto logits = head_logits(nullptr, feats, w1, w2);
  int64_t correct = 0;
  for (size_t i = 0; i < labels.size(); ++i)
    if (argmax_row(logits, static_cast<int64_t>(i)) == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// One plain-SGD move to a fresh gradient-tracking leaf.
Tensor sgd_next(const Tensor& w, double lr) {
  auto g = w.grad();
  require(!g.empty(), ErrorKind::episode, "inner adaptation step produced no gradient");
  auto x = w.data();
  std::vector<float> next(x.size());
  for (size_t i = 0; i < x.size(); ++i)
    next[i] = static_cast<float>(static_cast<double>(x[i]) - lr * static_cast<double>(g[i]));
  Tensor t = Tensor::from(w.shape(), std::move(next));
  t.set_requires_grad(true);
  return t;
}

void accumulate_grad(Tensor& dst, const Tensor& src) {
  auto g = src.grad();
  require(!g.empty(), ErrorKind::episode, "adapted head received no gradient");
  auto d = dst.mutable_grad();
  for (size_t i = 0; i < d.size(); ++i) d[i] += g[i];
}

}  // namespace

EpisodeUpdate maml_episode_update(DecoderParams& params, MetaHead& head, const Episode& ep,
                                  const MetaConfig& mc, float loss_scale,
                                  const DropoutSpec* drop) {
  require(!ep.support.empty() && !ep.query.empty(), ErrorKind::episode, "episode is empty");
  require(head.w1.dim(0) == params.config.d_model, ErrorKind::episode,
          "head input width does not match the model");
  require(head.w2.dim(1) == ep.n_way, ErrorKind::episode,
          "episode is " + std::to_string(ep.n_way) + "-way but the head has " +
              std::to_string(head.w2.dim(1)) + " outputs");

  std::vector<int32_t> s_labels, q_labels;
  for (const auto& ex : ep.support) {
    require(ex.label >= 0 && ex.label < ep.n_way, ErrorKind::episode, "support label out of range");
    s_labels.push_back(ex.label);
  }
  for (const auto& ex : ep.query) {
    require(ex.label >= 0 && ex.label < ep.n_way, ErrorKind::episode, "query label out of range");
    q_labels.push_back(ex.label);
  }

  // Everything created from here to inner_hi is adaptation-only state; the
  // outer graph is checked to reference none of it.
  uint64_t inner_lo = current_storage_id();

  Tensor fs = stacked_features(nullptr, params, ep.support, nullptr).detached();

  Tensor w1 = head.w1.detached();
  Tensor w2 = head.w2.detached();
  w1.set_requires_grad(true);
  w2.set_requires_grad(true);

  EpisodeUpdate out;
  out.support_acc_pre = head_accuracy(fs, w1, w2, s_labels);
  for (int64_t s = 0; s < mc.inner_steps; ++s) {
    Tape inner;
    auto loss = cross_entropy_rows(&inner, head_logits(&inner, fs, w1, w2), s_labels, -1);
    backward(loss, inner);
    w1 = sgd_next(w1, mc.inner_lr);
    w2 = sgd_next(w2, mc.inner_lr);
  }
  out.support_acc_post = head_accuracy(fs, w1, w2, s_labels);
  uint64_t inner_hi = current_storage_id();

  // Adapted values as fresh leaves, allocated outside the inner id range.
  Tensor a1 = Tensor::from(w1.shape(), std::vector<float>(w1.data().begin(), w1.data().end()));
  Tensor a2 = Tensor::from(w2.shape(), std::vector<float>(w2.data().begin(), w2.data().end()));
  a1.set_requires_grad(true);
  a2.set_requires_grad(true);

  Tape tape;
  Tensor fq = stacked_features(&tape, params, ep.query, drop);
  auto loss = cross_entropy_rows(&tape, head_logits(&tape, fq, a1, a2), q_labels, -1);
  auto scaled = scale(&tape, loss, loss_scale);
  backward(scaled, tape);

  out.query_loss = static_cast<double>(loss.item());
  out.first_order_clean = !tape.references_in_range(inner_lo, inner_hi, 0);
  require(out.first_order_clean, ErrorKind::episode,
          "adaptation state leaked into the outer graph");

  if (mc.grad_transport) {
    accumulate_grad(head.w1, a1);
    accumulate_grad(head.w2, a2);
  }

  Tensor fq_eval = stacked_features(nullptr, params, ep.query, nullptr);
  out.query_acc = head_accuracy(fq_eval, a1, a2, q_labels);
  return out;
}

double corpus_loss(const DecoderParams& params, const PretokenizedCorpus& corpus, int64_t row0,
                   int64_t row1) {
  require(row0 >= 0 && row0 < row1 && row1 <= corpus.size(), ErrorKind::config,
          "bad evaluation row range");
  double acc = 0.0;
  for (int64_t r = row0; r < row1; ++r)
    acc += static_cast<double>(
        next_token_loss(static_cast<Tape*>(nullptr), params,
                        corpus.sequences[static_cast<size_t>(r)])
            .item());
  return acc / static_cast<double>(row1 - row0);
}

namespace {

using Shard = std::vector<std::vector<int32_t>>;

std::vector<Shard> make_shards(const std::vector<std::vector<int32_t>>& batch, int64_t world) {
  std::vector<Shard> parts(static_cast<size_t>(world));
  int64_t n = static_cast<int64_t>(batch.size());
  int64_t base = n / world, rem = n % world, idx = 0;
  for (int64_t r = 0; r < world; ++r) {
    int64_t take = base + (r < rem ? 1 : 0);
    for (int64_t i = 0; i < take; ++i) parts[static_cast<size_t>(r)].push_back(batch[static_cast<size_t>(idx++)]);
  }
  return parts;
}

nlohmann::json config_snapshot(const TrainConfig& cfg) {
  const auto& m = cfg.model;
  const auto& mt = cfg.meta;
  return nlohmann::json{
      {"seed", cfg.seed},
      {"world_size", cfg.world_size},
      {"total_steps", cfg.total_steps},
      {"checkpoint_every", cfg.checkpoint_every},
      {"batch_size", cfg.batch_size},
      {"accum_steps", cfg.accum_steps},
      {"meta_mix", cfg.meta_mix},
      {"dropout", cfg.dropout},
      {"heldout_rows", cfg.heldout_rows},
      {"model",
       {{"d_model", m.d_model},
        {"n_layers", m.n_layers},
        {"n_heads", m.n_heads},
        {"n_kv_heads", m.n_kv_heads},
        {"d_ff", m.d_ff},
        {"vocab_size", m.vocab_size},
        {"max_seq_len", m.max_seq_len},
        {"norm_eps", m.norm_eps},
        {"rope_theta", m.rope_theta}}},
      {"meta",
       {{"n_way", mt.n_way},
        {"k_shot", mt.k_shot},
        {"n_query", mt.n_query},
        {"inner_steps", mt.inner_steps},
        {"inner_lr", mt.inner_lr},
        {"head_hidden", mt.head_hidden},
        {"max_doc_frac", mt.max_doc_frac},
        {"grad_transport", mt.grad_transport}}},
      {"lr",
       {{"kind", cfg.lr.kind},
        {"peak", cfg.lr.peak},
        {"warmup_steps", cfg.lr.warmup_steps},
        {"total_steps", cfg.lr.total_steps}}},
      {"adamw",
       {{"beta1", cfg.adamw.beta1},
        {"beta2", cfg.adamw.beta2},
        {"eps", cfg.adamw.eps},
        {"weight_decay", cfg.adamw.weight_decay}}},
  };
}

struct RankArgs {
  const TrainConfig* cfg;
  RankGroup* group;
  const PretokenizedCorpus* train;
  const PretokenizedCorpus* heldout;
  const Vocab* vocab;
  const Checkpoint* resume;
  TrainResult* result;
};

void run_rank(int64_t rank, const RankArgs& args) {
  const TrainConfig& cfg = *args.cfg;
  RankGroup& group = *args.group;
  RankTrace& trace = args.result->ranks[static_cast<size_t>(rank)];

  // Identical init stream on every rank: replicas agree bit for bit.
  Rng init_rng(mix_seed(cfg.seed, kStreamInit));
  auto params = DecoderParams::init(cfg.model, init_rng);
  auto head = MetaHead::init(cfg.model.d_model, cfg.meta.head_hidden, cfg.meta.n_way, init_rng);
  params.set_requires_grad(true);
  head.w1.set_requires_grad(true);
  head.w2.set_requires_grad(true);

  auto named = params.named_tensors();
  for (auto& entry : head.named_tensors()) named.push_back(entry);
  std::vector<std::pair<std::string, Tensor*>> param_ptrs;
  param_ptrs.reserve(named.size());
  for (auto& [name, t] : named) param_ptrs.emplace_back(name, &t);

  AdamW opt(param_ptrs, cfg.adamw);

  int64_t start_step = 0;
  if (args.resume != nullptr) {
    const Checkpoint& ck = *args.resume;
    for (auto& [name, t] : named) {
      const Tensor& src = ck.expect(name, t.shape());
      auto dst = t.mutable_data();
      std::copy(src.data().begin(), src.data().end(), dst.begin());
    }
    for (auto& [name, buf] : opt.state()) {
      const Tensor* src = ck.find(name);
      require(src != nullptr && src->numel() == static_cast<int64_t>(buf->size()),
              ErrorKind::checkpoint, "checkpoint is missing optimizer state '" + name + "'");
      std::copy(src->data().begin(), src->data().end(), buf->begin());
    }
    start_step = ck.step;
    opt.set_steps_taken(ck.config.value("opt_steps", ck.step));
  }

  EpisodeSamplerOptions eopt;
  eopt.n_way = cfg.meta.n_way;
  eopt.k_shot = cfg.meta.k_shot;
  eopt.n_query = cfg.meta.n_query;
  eopt.max_doc_frac = cfg.meta.max_doc_frac;
  EpisodeSampler sampler(*args.train, eopt);

  bool writer = rank == 0 && !cfg.out_dir.empty();
  std::ofstream metrics;
  if (writer) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    require(!ec, ErrorKind::io, "cannot create '" + cfg.out_dir.string() + "'");
    metrics.open(cfg.out_dir / "metrics.jsonl",
                 args.resume != nullptr ? std::ios::app : std::ios::trunc);
    require(metrics.good(), ErrorKind::io, "cannot open metrics.jsonl for writing");
  }

  auto heldout_loss = [&]() -> std::optional<double> {
    if (args.heldout->size() == 0) return std::nullopt;
    return corpus_loss(params, *args.heldout, 0, args.heldout->size());
  };

  auto write_checkpoint = [&](int64_t completed) {
    std::vector<SaveEntry> entries;
    for (auto& [name, t] : named) entries.push_back({name, t.shape(), t.data()});
    for (auto& [name, buf] : opt.state()) entries.push_back({name, {}, *buf});
    nlohmann::json cj = config_snapshot(cfg);
    cj["opt_steps"] = opt.steps_taken();
    Rng ck_rng(mix_seed(cfg.seed, kStreamCheckpoint, static_cast<uint64_t>(completed)));
    char dirname[32];
    std::snprintf(dirname, sizeof(dirname), "step_%06lld", static_cast<long long>(completed));
    save_checkpoint(cfg.out_dir / "checkpoints" / dirname, completed, entries, cj,
                    ck_rng.state_hex(), args.vocab);
    ++args.result->checkpoints_written;
  };

  if (rank == 0 && start_step == 0) {
    if (auto hl = heldout_loss()) args.result->heldout.emplace_back(0, *hl);
    if (writer) {
      write_checkpoint(0);
      nlohmann::json line{{"step", 0}};
      if (!args.result->heldout.empty()) line["heldout_loss"] = args.result->heldout.back().second;
      metrics << line.dump() << '\n' << std::flush;
    }
  }

  for (int64_t step = start_step; step < cfg.total_steps; ++step) {
    opt.zero_grad();

    int64_t branch = 0;
    if (rank == 0) {
      Rng branch_rng(mix_seed(cfg.seed, kStreamBranch, static_cast<uint64_t>(step)));
      branch = branch_rng.bernoulli(cfg.meta_mix) ? 1 : 0;
    }
    branch = group.broadcast<int64_t>(rank, branch, 0);

    double step_loss = 0.0;
    for (int64_t micro = 0; micro < cfg.accum_steps; ++micro) {
      uint64_t lane = static_cast<uint64_t>(micro);
      if (cfg.desync_rng_for_test)
        lane = (static_cast<uint64_t>(micro) << 16) + static_cast<uint64_t>(rank) + 1;
      Rng drop_rng(mix_seed(cfg.seed, kStreamDropout, static_cast<uint64_t>(step), lane));
      DropoutSpec drop_spec{cfg.dropout, &drop_rng};
      const DropoutSpec* drop = cfg.dropout > 0.0 ? &drop_spec : nullptr;

      if (branch == 0) {
        std::vector<Shard> parts;
        if (rank == 0) {
          Rng batch_rng(mix_seed(cfg.seed, kStreamBatch, static_cast<uint64_t>(step),
                                 static_cast<uint64_t>(micro)));
          parts = make_shards(sample_lm_batch(*args.train, cfg.batch_size, batch_rng),
                              cfg.world_size);
        }
        Shard mine = group.scatter(rank, std::move(parts), 0);
        auto gathered = group.all_gather(rank, std::move(mine));
        std::vector<std::vector<int32_t>> batch;
        batch.reserve(static_cast<size_t>(cfg.batch_size));
        for (auto& shard : gathered)
          for (auto& row_ids : shard) batch.push_back(std::move(row_ids));

        Tape tape;
        Tensor total;
        for (const auto& row_ids : batch) {
          auto l = next_token_loss(&tape, params, row_ids, drop);
          total = total.defined() ? add(&tape, total, l) : l;
        }
        auto scaled = scale(&tape, total,
                            static_cast<float>(1.0 / (static_cast<double>(batch.size()) *
                                                      static_cast<double>(cfg.accum_steps))));
        backward(scaled, tape);
        step_loss += static_cast<double>(total.item()) /
                     (static_cast<double>(batch.size()) * static_cast<double>(cfg.accum_steps));
      } else {
        Episode ep;
        if (rank == 0) {
          Rng ep_rng(mix_seed(cfg.seed, kStreamEpisode, static_cast<uint64_t>(step),
                              static_cast<uint64_t>(micro)));
          ep = sampler.sample(ep_rng);
        }
        ep = group.broadcast(rank, std::move(ep), 0);
        auto up = maml_episode_update(params, head, ep, cfg.meta,
                                      static_cast<float>(1.0 / cfg.accum_steps), drop);
        step_loss += up.query_loss / static_cast<double>(cfg.accum_steps);
      }
    }

    for (auto& [name, p] : param_ptrs) group.all_reduce_mean(rank, p->mutable_grad());
    opt.step(cfg.lr.at(step));

    trace.branches.push_back(static_cast<int8_t>(branch));
    trace.losses.push_back(step_loss);

    int64_t completed = step + 1;
    bool at_checkpoint = completed % cfg.checkpoint_every == 0 || completed == cfg.total_steps;
    if (rank == 0 && at_checkpoint)
      if (auto hl = heldout_loss()) args.result->heldout.emplace_back(completed, *hl);
    if (writer) {
      nlohmann::json line{{"step", completed},
                          {"branch", branch},
                          {"loss", step_loss},
                          {"lr", cfg.lr.at(step)}};
      if (at_checkpoint && !args.result->heldout.empty() &&
          args.result->heldout.back().first == completed)
        line["heldout_loss"] = args.result->heldout.back().second;
      metrics << line.dump() << '\n' << std::flush;
      if (completed % cfg.checkpoint_every == 0) write_checkpoint(completed);
    }
  }

  trace.final_weights.reserve(named.size());
  for (auto& [name, t] : named)
    trace.final_weights.emplace_back(name, std::vector<float>(t.data().begin(), t.data().end()));
  group.leave(rank);
}

}  // namespace

TrainResult train_lm(const TrainConfig& cfg, const PretokenizedCorpus& corpus, const Vocab& vocab,
                     const std::filesystem::path& resume_from) {
  cfg.validate();
  require(corpus.seq_len >= 2, ErrorKind::data, "corpus rows must hold at least two tokens");
  require(corpus.seq_len <= cfg.model.max_seq_len + 1, ErrorKind::data,
          "corpus rows are longer than max_seq_len + 1");
  require(corpus.size() > cfg.heldout_rows, ErrorKind::data,
          "corpus has no rows left after the heldout split");
  require(vocab.size() <= cfg.model.vocab_size, ErrorKind::vocab,
          "vocabulary of " + std::to_string(vocab.size()) + " exceeds the model's " +
              std::to_string(cfg.model.vocab_size));

  PretokenizedCorpus train, heldout;
  train.seq_len = heldout.seq_len = corpus.seq_len;
  auto split = corpus.sequences.end() - static_cast<ptrdiff_t>(cfg.heldout_rows);
  train.sequences.assign(corpus.sequences.begin(), split);
  heldout.sequences.assign(split, corpus.sequences.end());

  std::optional<Checkpoint> resume;
  if (!resume_from.empty()) {
    resume = load_checkpoint(resume_from);
    require(resume->step <= cfg.total_steps, ErrorKind::config,
            "checkpoint step " + std::to_string(resume->step) + " is past total_steps");
  }

  RankGroup group(cfg.world_size);
  TrainResult result;
  result.ranks.resize(static_cast<size_t>(cfg.world_size));

  RankArgs args{};
  args.cfg = &cfg;
  args.group = &group;
  args.train = &train;
  args.heldout = &heldout;
  args.vocab = &vocab;
  args.resume = resume ? &*resume : nullptr;
  args.result = &result;

  std::vector<std::exception_ptr> errors(static_cast<size_t>(cfg.world_size));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(cfg.world_size));
  for (int64_t r = 0; r < cfg.world_size; ++r)
    threads.emplace_back([&, r] {
      try {
        run_rank(r, args);
      } catch (...) {
        errors[static_cast<size_t>(r)] = std::current_exception();
        try {
          group.abort(r, "training failed on this rank");
        } catch (...) {
        }
        group.leave(r);
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return result;
}

}  // namespace metalm
