#include "metalm/finetune.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "metalm/errors.hpp"
#include "metalm/trainer.hpp"

namespace metalm {

Regime regime_from_string(const std::string& name) {
  if (name == "head_only") return Regime::head_only;
  if (name == "full") return Regime::full;
  fail(ErrorKind::config, "unknown finetune regime '" + name + "' (head_only or full)");
}

std::string to_string(Regime regime) {
  return regime == Regime::head_only ? "head_only" : "full";
}

void FinetuneConfig::validate() const {
  require(lr > 0.0, ErrorKind::config, "finetune lr must be positive");
  require(max_epochs >= 1, ErrorKind::config, "max_epochs must be positive");
  require(patience >= 0, ErrorKind::config, "patience must be non-negative");
  require(batch_size >= 1, ErrorKind::config, "batch_size must be positive");
}

void DatasetAudit::require_zero_shot() const {
  for (const auto& id : evaluated_)
    require(!trained_.count(id), ErrorKind::config,
            "dataset '" + id + "' was used by both training and evaluation");
}

std::vector<int32_t> encode_sentence(const Vocab& vocab, const TaggedSentence& sentence,
                                     int64_t max_len) {
  require(sentence.words.size() == sentence.tags.size(), ErrorKind::data,
          "sentence has " + std::to_string(sentence.words.size()) + " words but " +
              std::to_string(sentence.tags.size()) + " tags");
  require(!sentence.words.empty(), ErrorKind::data, "empty sentence");
  auto ids = vocab.encode(sentence.words);
  if (static_cast<int64_t>(ids.size()) > max_len) ids.resize(static_cast<size_t>(max_len));
  return ids;
}

namespace {

DatasetScore score_dataset(const DecoderParams& params, const CrfParams& head, const Vocab& vocab,
                           const NerDataset& ds) {
  std::vector<std::vector<Span>> pred, gold;
  pred.reserve(ds.sentences.size());
  gold.reserve(ds.sentences.size());
  for (const auto& s : ds.sentences) {
    auto ids = encode_sentence(vocab, s, params.config.max_seq_len);
    auto hidden = decoder_hidden(static_cast<Tape*>(nullptr), params, ids);
    auto em = crf_emissions(static_cast<Tape*>(nullptr), hidden, head);
    auto tags = viterbi_decode(em, head, /*constrained=*/true);
    pred.push_back(spans_from_bio(tags));
    std::vector<int> gold_tags(s.tags.begin(), s.tags.begin() + static_cast<ptrdiff_t>(ids.size()));
    gold.push_back(spans_from_bio(gold_tags));
  }
  DatasetScore out;
  out.eval_id = ds.id;
  out.micro = micro_f1(pred, gold);
  out.per_type = per_type_f1(pred, gold);
  out.n_sentences = static_cast<int64_t>(ds.sentences.size());
  out.n_gold_spans = out.micro.n_gold;
  out.n_pred_spans = out.micro.n_pred;
  return out;
}

nlohmann::json f1_json(const F1Stats& f) {
  return {{"p", f.precision}, {"r", f.recall}, {"f1", f.f1}, {"undefined", f.undefined}};
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json sets = nlohmann::json::array();
  for (const auto& d : datasets) {
    nlohmann::json per;
    for (int e = 0; e < 3; ++e)
      per[TagScheme::entity_names()[static_cast<size_t>(e)]] =
          f1_json(d.per_type[static_cast<size_t>(e)]);
    sets.push_back({{"eval_id", d.eval_id},
                    {"micro", f1_json(d.micro)},
                    {"per_type", per},
                    {"n_sentences", d.n_sentences},
                    {"n_gold_spans", d.n_gold_spans},
                    {"n_pred_spans", d.n_pred_spans}});
  }
  return {{"datasets", sets},
          {"final_train_loss", final_train_loss},
          {"epochs_run", epochs_run},
          {"best_dev_epoch", best_dev_epoch},
          {"best_dev_f1", best_dev_f1},
          {"checkpoint_id", checkpoint_id},
          {"regime", regime},
          {"source", source},
          {"seed", seed},
          {"span_level", span_level}};
}

FinetuneResult finetune_run(const Checkpoint& ck, const NerDataset& train_in,
                            const FinetuneConfig& cfg, const NerDataset* dev_in,
                            DatasetAudit* audit) {
  cfg.validate();
  require(ck.vocab.has_value(), ErrorKind::checkpoint,
          "checkpoint carries no vocabulary to tokenize with");

  // Deterministic 10% dev split by sentence index when none is supplied.
  NerDataset train_split, dev_split;
  const NerDataset* train = &train_in;
  const NerDataset* dev = dev_in;
  if (dev == nullptr) {
    train_split.id = train_in.id;
    dev_split.id = train_in.id + "#dev";
    for (size_t i = 0; i < train_in.sentences.size(); ++i)
      (i % 10 == 9 ? dev_split : train_split).sentences.push_back(train_in.sentences[i]);
    train = &train_split;
    dev = &dev_split;
  }
  require(!train->sentences.empty(), ErrorKind::data, "empty train split");
  require(!dev->sentences.empty(), ErrorKind::data,
          "empty dev split; supply more sentences or an explicit dev set");
  if (audit) {
    audit->note_train(train_in.id);
    if (dev_in != nullptr) audit->note_train(dev_in->id);
  }

  FinetuneResult out;
  out.vocab = *ck.vocab;
  out.params = decoder_from_checkpoint(ck);
  Rng head_rng(mix_seed(cfg.seed, kStreamInit, 1));
  out.head = CrfParams::init(out.params.config.d_model, head_rng);

  bool full = cfg.regime == Regime::full;
  out.params.set_requires_grad(full);
  out.head.set_requires_grad(true);

  auto trainable = out.head.named_tensors();
  if (full) {
    auto backbone_named = out.params.named_tensors();
    trainable.insert(trainable.begin(), backbone_named.begin(), backbone_named.end());
  }
  std::vector<std::pair<std::string, Tensor*>> opt_params;
  opt_params.reserve(trainable.size());
  for (auto& [name, t] : trainable) opt_params.emplace_back(name, &t);
  AdamW opt(opt_params, cfg.adamw);

  auto backbone = out.params.named_tensors();
  std::vector<std::vector<float>> frozen;
  if (!full)
    for (auto& [name, t] : backbone)
      frozen.emplace_back(t.data().begin(), t.data().end());

  int64_t max_len = out.params.config.max_seq_len;
  auto snapshot = [&] {
    std::vector<std::vector<float>> v;
    v.reserve(trainable.size());
    for (auto& [name, t] : trainable) v.emplace_back(t.data().begin(), t.data().end());
    return v;
  };
  auto restore = [&](const std::vector<std::vector<float>>& v) {
    for (size_t i = 0; i < trainable.size(); ++i) {
      auto dst = trainable[i].second.mutable_data();
      std::copy(v[i].begin(), v[i].end(), dst.begin());
    }
  };

  auto measured_dev_f1 = [&] {
    return score_dataset(out.params, out.head, out.vocab, *dev).micro.f1;
  };
  auto dev_f1 = [&](int64_t epoch) {
    const auto& fake = cfg.dev_f1_override_for_test;
    if (!fake.empty())
      return fake[std::min(static_cast<size_t>(epoch), fake.size() - 1)];
    return measured_dev_f1();
  };

  double best = -1.0;
  int64_t best_epoch = -1, stall = 0, epochs = 0;
  auto best_state = snapshot();
  double last_epoch_loss = 0.0;

  std::vector<size_t> order(train->sentences.size());
  std::iota(order.begin(), order.end(), size_t{0});

  for (int64_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, kStreamBatch, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order.begin(), order.end());

    double epoch_loss = 0.0;
    size_t done = 0;
    while (done < order.size()) {
      size_t take = std::min(static_cast<size_t>(cfg.batch_size), order.size() - done);
      opt.zero_grad();
      Tape tape;
      Tensor total;
      for (size_t b = 0; b < take; ++b) {
        const auto& s = train->sentences[order[done + b]];
        auto ids = encode_sentence(out.vocab, s, max_len);
        std::vector<int> tags(s.tags.begin(), s.tags.begin() + static_cast<ptrdiff_t>(ids.size()));
        auto hidden = decoder_hidden(&tape, out.params, ids);
        auto loss = crf_nll(&tape, crf_emissions(&tape, hidden, out.head), tags, out.head);
        total = total.defined() ? add(&tape, total, loss) : loss;
      }
      auto scaled = scale(&tape, total, static_cast<float>(1.0 / static_cast<double>(take)));
      backward(scaled, tape);
      if (!full)
        for (auto& [name, t] : backbone)
          require(t.grad().empty(), ErrorKind::numeric,
                  "frozen backbone tensor '" + name + "' received gradients");
      opt.step(cfg.lr);
      epoch_loss += static_cast<double>(total.item());
      done += take;
    }
    last_epoch_loss = epoch_loss / static_cast<double>(order.size());
    ++epochs;

    double f1 = dev_f1(epoch);
    if (f1 > best) {
      best = f1;
      best_epoch = epoch;
      best_state = snapshot();
      stall = 0;
    } else if (++stall > cfg.patience) {
      break;
    }
  }
  restore(best_state);

  if (!full) {
    size_t i = 0;
    for (auto& [name, t] : backbone) {
      auto now = t.data();
      require(now.size() == frozen[i].size() &&
                  std::memcmp(now.data(), frozen[i].data(), now.size() * sizeof(float)) == 0,
              ErrorKind::numeric, "frozen backbone tensor '" + name + "' changed during tuning");
      ++i;
    }
  }

  out.report.final_train_loss = last_epoch_loss;
  out.report.epochs_run = epochs;
  out.report.best_dev_epoch = best_epoch;
  out.report.best_dev_f1 = best;
  out.report.checkpoint_id = "step_" + std::to_string(ck.step);
  out.report.regime = to_string(cfg.regime);
  out.report.source = cfg.source.empty() ? train_in.id : cfg.source;
  out.report.seed = cfg.seed;
  return out;
}

EvalReport evaluate_model(const DecoderParams& params, const CrfParams& head, const Vocab& vocab,
                          const std::vector<NerDataset>& datasets, DatasetAudit* audit) {
  EvalReport report;
  report.span_level = true;
  for (const auto& ds : datasets) {
    report.datasets.push_back(score_dataset(params, head, vocab, ds));
    if (audit) audit->note_eval(ds.id);
  }
  return report;
}

namespace {

constexpr const char* kSweepHeader =
    "step,regime,source,eval_id,micro_f1,per_f1,loc_f1,org_f1,final_train_loss,epochs,status";

std::string csv_field(const std::string& s) {
  require(s.find(',') == std::string::npos && s.find('\n') == std::string::npos, ErrorKind::data,
          "'" + s + "' cannot appear in a CSV field");
  return s;
}

std::string format_row(const SweepRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%s,%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%lld,%s",
                static_cast<long long>(r.step), csv_field(r.regime).c_str(),
                csv_field(r.source).c_str(), csv_field(r.eval_id).c_str(), r.micro_f1, r.per_f1,
                r.loc_f1, r.org_f1, r.final_train_loss, static_cast<long long>(r.epochs),
                csv_field(r.status).c_str());
  return buf;
}

}  // namespace

std::vector<SweepRow> load_sweep_csv(const std::filesystem::path& csv_path) {
  std::vector<SweepRow> rows;
  std::ifstream in(csv_path);
  if (!in.good()) return rows;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      require(line == kSweepHeader, ErrorKind::parse,
              csv_path.string() + ":1: unexpected sweep header '" + line + "'");
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    require(f.size() == 11, ErrorKind::parse,
            csv_path.string() + ":" + std::to_string(line_no) + ": expected 11 fields, got " +
                std::to_string(f.size()));
    try {
      SweepRow r;
      r.step = std::stoll(f[0]);
      r.regime = f[1];
      r.source = f[2];
      r.eval_id = f[3];
      r.micro_f1 = std::stod(f[4]);
      r.per_f1 = std::stod(f[5]);
      r.loc_f1 = std::stod(f[6]);
      r.org_f1 = std::stod(f[7]);
      r.final_train_loss = std::stod(f[8]);
      r.epochs = std::stoll(f[9]);
      r.status = f[10];
      rows.push_back(std::move(r));
    } catch (const std::exception&) {
      fail(ErrorKind::parse,
           csv_path.string() + ":" + std::to_string(line_no) + ": malformed numeric field");
    }
  }
  return rows;
}

std::vector<SweepRow> sweep_checkpoints(const std::filesystem::path& checkpoints_dir,
                                        const NerDataset& train, const FinetuneConfig& cfg,
                                        const std::vector<NerDataset>& evals,
                                        const std::filesystem::path& csv_path) {
  cfg.validate();
  require(!evals.empty(), ErrorKind::config, "sweep needs at least one evaluation dataset");
  require(std::filesystem::is_directory(checkpoints_dir), ErrorKind::io,
          "'" + checkpoints_dir.string() + "' is not a directory");

  std::vector<std::pair<int64_t, std::filesystem::path>> steps;
  for (const auto& e : std::filesystem::directory_iterator(checkpoints_dir)) {
    std::string name = e.path().filename().string();
    if (!e.is_directory() || name.rfind("step_", 0) != 0) continue;
    try {
      steps.emplace_back(std::stoll(name.substr(5)), e.path());
    } catch (const std::exception&) {
      std::cerr << "warning: ignoring '" << name << "': no step number\n";
    }
  }
  require(!steps.empty(), ErrorKind::data,
          "no step_* checkpoints under '" + checkpoints_dir.string() + "'");
  std::sort(steps.begin(), steps.end());

  auto rows = load_sweep_csv(csv_path);
  std::set<std::pair<int64_t, std::string>> have;
  for (const auto& r : rows) have.insert({r.step, r.eval_id});

  bool fresh = !std::filesystem::exists(csv_path) ||
               std::filesystem::file_size(csv_path) == 0;
  std::ofstream csv(csv_path, std::ios::app);
  require(csv.good(), ErrorKind::io, "cannot open '" + csv_path.string() + "' for appending");
  if (fresh) csv << kSweepHeader << '\n' << std::flush;

  DatasetAudit audit;
  for (const auto& [step, dir] : steps) {
    bool missing = false;
    for (const auto& ev : evals)
      if (!have.count({step, ev.id})) missing = true;
    if (!missing) continue;

    auto emit = [&](const SweepRow& r) {
      csv << format_row(r) << '\n' << std::flush;
      rows.push_back(r);
      have.insert({r.step, r.eval_id});
    };

    try {
      auto ck = load_checkpoint(dir);
      auto tuned = finetune_run(ck, train, cfg, nullptr, &audit);
      auto report = evaluate_model(tuned.params, tuned.head, tuned.vocab, evals, &audit);
      audit.require_zero_shot();
      for (const auto& ds : report.datasets) {
        if (have.count({step, ds.eval_id})) continue;
        SweepRow r;
        r.step = step;
        r.regime = tuned.report.regime;
        r.source = tuned.report.source;
        r.eval_id = ds.eval_id;
        r.micro_f1 = ds.micro.f1;
        r.per_f1 = ds.per_type[0].f1;
        r.loc_f1 = ds.per_type[1].f1;
        r.org_f1 = ds.per_type[2].f1;
        r.final_train_loss = tuned.report.final_train_loss;
        r.epochs = tuned.report.epochs_run;
        r.status = "ok";
        emit(r);
      }
    } catch (const Error& e) {
      std::cerr << "warning: checkpoint " << dir.string() << " failed: " << e.what() << '\n';
      for (const auto& ev : evals) {
        if (have.count({step, ev.id})) continue;
        SweepRow r;
        r.step = step;
        r.regime = to_string(cfg.regime);
        r.source = cfg.source.empty() ? train.id : cfg.source;
        r.eval_id = ev.id;
        r.status = "failed";
        emit(r);
      }
    }
  }

  std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return a.step != b.step ? a.step < b.step : a.eval_id < b.eval_id;
  });
  return rows;
}

}  // namespace metalm
