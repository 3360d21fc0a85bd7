#include "run_command.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "metalm/analysis.hpp"
#include "metalm/checkpoint.hpp"
#include "metalm/config.hpp"
#include "metalm/corpus.hpp"
#include "metalm/errors.hpp"
#include "metalm/finetune.hpp"
#include "metalm/ner_data.hpp"
#include "metalm/trainer.hpp"

namespace metalm {

namespace {

namespace fs = std::filesystem;

std::string resolve_out(const std::string& flag, bool required) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("METALM_OUT"); env && *env) return env;
  if (required) fail(ErrorKind::usage, "--out is required (or set METALM_OUT)");
  return {};
}

RunConfig load_run_config(const std::string& path) {
  return path.empty() ? RunConfig{} : RunConfig::load(path);
}

nlohmann::json model_json(const ModelConfig& m) {
  return {{"d_model", m.d_model},         {"n_layers", m.n_layers},
          {"n_heads", m.n_heads},         {"n_kv_heads", m.n_kv_heads},
          {"d_ff", m.d_ff},               {"vocab_size", m.vocab_size},
          {"max_seq_len", m.max_seq_len}, {"norm_eps", m.norm_eps},
          {"rope_theta", m.rope_theta}};
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::io, "cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
  require(out.good(), ErrorKind::io, "short write to '" + path.string() + "'");
}

// A finetuned artifact: backbone, tagging head, and vocabulary in one dir.
struct TaggerBundle {
  DecoderParams params;
  CrfParams head;
  Vocab vocab;
  int64_t step = 0;
};

TaggerBundle load_tagger(const fs::path& dir) {
  auto ck = load_checkpoint(dir);
  require(ck.vocab.has_value(), ErrorKind::checkpoint,
          "'" + dir.string() + "' carries no vocabulary");
  TaggerBundle b;
  b.params = decoder_from_checkpoint(ck);
  b.vocab = *ck.vocab;
  b.step = ck.step;
  int64_t d = b.params.config.d_model;
  int64_t k = TagScheme::kCount;
  b.head.proj = ck.expect("crf.proj", {d, k});
  b.head.trans = ck.expect("crf.trans", {k, k});
  b.head.start = ck.expect("crf.start", {k});
  b.head.end = ck.expect("crf.end", {k});
  return b;
}

void save_tagger(const fs::path& dir, const FinetuneResult& result, int64_t step,
                 const nlohmann::json& finetune_meta) {
  std::vector<SaveEntry> entries;
  for (auto& [name, t] : result.params.named_tensors()) entries.push_back({name, t.shape(), t.data()});
  for (auto& [name, t] : result.head.named_tensors()) entries.push_back({name, t.shape(), t.data()});
  nlohmann::json cj = {{"model", model_json(result.params.config)}, {"finetune", finetune_meta}};
  save_checkpoint(dir, step, entries, cj, "0", &result.vocab);
}

std::set<std::string> split_particles(const std::string& csv) {
  std::set<std::string> out;
  std::stringstream ss(csv);
  std::string cell;
  while (std::getline(ss, cell, ','))
    if (!cell.empty()) out.insert(cell);
  require(!out.empty(), ErrorKind::usage, "--particles needs at least one token");
  return out;
}

Regime regime_flag(const std::string& name, Regime fallback) {
  if (name.empty()) return fallback;
  if (name == "head") return Regime::head_only;
  return regime_from_string(name);
}

int cmd_pretrain(const std::string& config_path, const std::string& out_flag,
                 std::optional<int64_t> world, const std::string& resume) {
  auto rc = load_run_config(config_path);
  if (world) rc.train.world_size = *world;
  rc.validate();
  fs::path out = resolve_out(out_flag, /*required=*/true);
  rc.train.out_dir = out;

  Vocab vocab;
  PretokenizedCorpus corpus;
  if (!rc.data.corpus.empty()) {
    vocab = Vocab::load_json(rc.data.vocab);
    corpus = load_pretokenized(rc.data.corpus, rc.train.model.max_seq_len + 1, vocab.size());
  } else {
    auto syn = gen_synthetic_corpus(rc.data.synthetic);
    vocab = std::move(syn.vocab);
    corpus = std::move(syn.corpus);
  }

  fs::create_directories(out);
  write_json(out / "run_config.json", rc.to_json());
  auto result = train_lm(rc.train, corpus, vocab, resume);

  nlohmann::json summary = {{"out", out.string()},
                            {"steps", rc.train.total_steps},
                            {"world_size", rc.train.world_size},
                            {"checkpoints_written", result.checkpoints_written}};
  if (!result.ranks.empty() && !result.ranks[0].losses.empty())
    summary["final_loss"] = result.ranks[0].losses.back();
  if (!result.heldout.empty()) {
    summary["initial_heldout"] = result.heldout.front().second;
    summary["final_heldout"] = result.heldout.back().second;
  }
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& checkpoint,
                 const std::string& data, const std::string& dev, const std::string& regime,
                 const std::string& out_flag) {
  auto rc = load_run_config(config_path);
  auto ft = rc.finetune;
  ft.regime = regime_flag(regime, ft.regime);
  auto ck = load_checkpoint(checkpoint);
  auto train = load_conll(data);
  if (ft.source.empty()) ft.source = train.id;

  std::optional<NerDataset> dev_set;
  if (!dev.empty()) dev_set = load_conll(dev);

  DatasetAudit audit;
  auto result = finetune_run(ck, train, ft, dev_set ? &*dev_set : nullptr, &audit);

  fs::path out = resolve_out(out_flag, /*required=*/false);
  if (!out.empty()) {
    fs::create_directories(out);
    write_json(out / "report.json", result.report.to_json());
    nlohmann::json meta = {{"regime", to_string(ft.regime)},
                           {"lr", ft.lr},
                           {"seed", ft.seed},
                           {"source", ft.source}};
    save_tagger(out / "model", result, ck.step, meta);
  }
  std::cout << result.report.to_json().dump(2) << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::vector<std::string>& data,
             const std::string& out_flag) {
  auto bundle = load_tagger(checkpoint);
  std::vector<NerDataset> datasets;
  for (const auto& path : data) datasets.push_back(load_conll(path));
  DatasetAudit audit;
  auto report = evaluate_model(bundle.params, bundle.head, bundle.vocab, datasets, &audit);
  report.checkpoint_id = "step_" + std::to_string(bundle.step);
  fs::path out = resolve_out(out_flag, /*required=*/false);
  if (!out.empty()) {
    fs::create_directories(out);
    write_json(out / "report.json", report.to_json());
  }
  std::cout << report.to_json().dump(2) << '\n';
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& checkpoints,
              const std::string& data, const std::vector<std::string>& evals,
              const std::string& regime, const std::string& out_flag) {
  auto rc = load_run_config(config_path);
  auto ft = rc.finetune;
  ft.regime = regime_flag(regime, ft.regime);
  auto train = load_conll(data);
  std::vector<NerDataset> eval_sets;
  for (const auto& path : evals) eval_sets.push_back(load_conll(path));

  fs::path out = resolve_out(out_flag, /*required=*/true);
  fs::create_directories(out);
  fs::path csv = out / "sweep.csv";
  auto rows = sweep_checkpoints(checkpoints, train, ft, eval_sets, csv);

  int64_t failed = 0;
  for (const auto& r : rows)
    if (r.status != "ok") ++failed;
  nlohmann::json summary = {{"csv", csv.string()},
                            {"rows", static_cast<int64_t>(rows.size())},
                            {"failed", failed}};
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_gen_corpus(const SyntheticCorpusOptions& opt, const std::string& out_flag) {
  fs::path out = resolve_out(out_flag, /*required=*/true);
  fs::create_directories(out);
  auto syn = gen_synthetic_corpus(opt);
  save_pretokenized(out / "corpus.jsonl", syn.corpus);
  syn.vocab.save_json(out / "vocab.json");
  nlohmann::json summary = {{"corpus", (out / "corpus.jsonl").string()},
                            {"vocab", (out / "vocab.json").string()},
                            {"sequences", syn.corpus.size()},
                            {"seq_len", syn.corpus.seq_len},
                            {"vocab_size", syn.vocab.size()}};
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_gen_ner(const SyntheticNerOptions& opt, const std::string& out_flag) {
  fs::path out = resolve_out(out_flag, /*required=*/true);
  fs::create_directories(out);
  auto data = gen_synthetic_ner(opt);
  fs::path file = out / (opt.dataset_id + ".conll");
  save_conll(file, data);
  nlohmann::json summary = {{"file", file.string()},
                            {"id", data.id},
                            {"sentences", static_cast<int64_t>(data.sentences.size())},
                            {"tokens", data.token_count()},
                            {"spans", data.span_count()}};
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_analyze_curve(const std::string& metric, const std::string& curve_path,
                      const std::string& field, int64_t k) {
  auto curve = curve_from_metrics_jsonl(curve_path, field);
  char buf[64];
  if (metric == "t90") {
    std::cout << t90(curve) << '\n';
  } else if (metric == "auc") {
    std::snprintf(buf, sizeof(buf), "%.12g", normalized_auc(curve));
    std::cout << buf << '\n';
  } else {
    std::snprintf(buf, sizeof(buf), "%.12g", initial_slope(curve, k));
    std::cout << buf << '\n';
  }
  return 0;
}

int cmd_analyze_recall(const std::string& data_path, const std::set<std::string>& particles) {
  auto recall = particle_recall(load_conll(data_path), particles);
  if (!recall.defined) {
    std::cout << "null\n";
    return 0;
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", recall.value);
  std::cout << buf << '\n';
  return 0;
}

int cmd_analyze_oov(const std::string& data_path, const std::string& vocab_path) {
  auto rate = oov_rate(load_conll(data_path), Vocab::load_json(vocab_path));
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", rate);
  std::cout << buf << '\n';
  return 0;
}

int cmd_analyze_rank(const std::string& checkpoint, const std::string& tensor) {
  auto ck = load_checkpoint(checkpoint);
  nlohmann::json out = nlohmann::json::object();
  bool found = false;
  for (const auto& [name, t] : ck.tensors) {
    if (!tensor.empty() && name != tensor) continue;
    if (t.ndim() != 2) {
      require(tensor.empty(), ErrorKind::shape, "'" + name + "' is not a matrix");
      continue;
    }
    found = true;
    auto rank = effective_rank_proportional(t);
    out[name] = rank.defined ? nlohmann::json(rank.per) : nlohmann::json(nullptr);
  }
  require(found, ErrorKind::data,
          tensor.empty() ? "checkpoint holds no matrices" : "no tensor named '" + tensor + "'");
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_analyze_confidence(const std::vector<std::string>& model_dirs, const std::string& data_path,
                           int64_t top_n, const std::string& out_flag) {
  std::vector<TaggerBundle> bundles;
  for (const auto& dir : model_dirs) bundles.push_back(load_tagger(dir));
  std::sort(bundles.begin(), bundles.end(),
            [](const TaggerBundle& a, const TaggerBundle& b) { return a.step < b.step; });
  std::vector<TunedModel> models;
  for (auto& b : bundles) models.push_back({b.step, b.params, b.head});
  require(!models.empty(), ErrorKind::usage, "at least one --model is required");
  for (size_t i = 1; i < bundles.size(); ++i)
    require(bundles[i].vocab.words == bundles[0].vocab.words, ErrorKind::config,
            "the probed models tokenize with different vocabularies");

  auto data = load_conll(data_path);
  auto series = token_confidence_series(models, bundles[0].vocab, data, top_n);

  fs::path out = resolve_out(out_flag, /*required=*/true);
  fs::create_directories(out);
  fs::path csv = out / "confidence.csv";
  write_confidence_csv(series, csv);
  nlohmann::json summary = {{"csv", csv.string()},
                            {"words", static_cast<int64_t>(series.size())},
                            {"checkpoints", static_cast<int64_t>(models.size())}};
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_analyze_delta(const std::string& dir_a, const std::string& dir_b,
                      const std::string& data_path, int64_t sentence_idx) {
  auto a = load_tagger(dir_a);
  auto b = load_tagger(dir_b);
  auto data = load_conll(data_path);
  require(sentence_idx >= 0 && sentence_idx < static_cast<int64_t>(data.sentences.size()),
          ErrorKind::data, "sentence index out of range");
  const auto& s = data.sentences[static_cast<size_t>(sentence_idx)];
  auto delta = delta_logprob(a.params, a.head, b.params, b.head, a.vocab, s);
  nlohmann::json out = {{"sentence", sentence_idx},
                        {"words", std::vector<std::string>(s.words.begin(),
                                                           s.words.begin() +
                                                               static_cast<ptrdiff_t>(delta.size()))},
                        {"delta_neg_logprob", delta}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
  CLI::App app{"desk-scale hybrid LM pretraining, CRF tagging, and analysis"};
  app.name("metalm");
  app.require_subcommand(1);

  std::string config_path, out_dir, resume, checkpoint, data_path, dev_path, regime;
  std::vector<std::string> eval_paths, model_dirs;
  std::optional<int64_t> world;

  auto* pre = app.add_subcommand("pretrain", "run the hybrid pretraining loop");
  pre->add_option("--config", config_path, "run configuration JSON");
  pre->add_option("--out", out_dir, "run directory for checkpoints and metrics");
  pre->add_option("--world-size", world, "simulated rank count override");
  pre->add_option("--resume", resume, "checkpoint directory to continue from");

  auto* fin = app.add_subcommand("finetune", "attach and train a tagging head");
  fin->add_option("--config", config_path, "run configuration JSON");
  fin->add_option("--checkpoint", checkpoint, "pretrained checkpoint directory")->required();
  fin->add_option("--data", data_path, "training data (CoNLL)")->required();
  fin->add_option("--dev", dev_path, "explicit dev split (CoNLL)");
  fin->add_option("--regime", regime, "head, head_only, or full");
  fin->add_option("--out", out_dir, "directory for the report and tuned model");

  auto* ev = app.add_subcommand("eval", "score a finetuned model on datasets");
  ev->add_option("--checkpoint", checkpoint, "finetuned model directory")->required();
  ev->add_option("--data", eval_paths, "evaluation data (CoNLL), repeatable")->required();
  ev->add_option("--out", out_dir, "directory for the report");

  auto* sw = app.add_subcommand("sweep", "finetune and evaluate every checkpoint");
  sw->add_option("--config", config_path, "run configuration JSON");
  sw->add_option("--checkpoints", checkpoint, "directory of step_* checkpoints")->required();
  sw->add_option("--data", data_path, "training data (CoNLL)")->required();
  sw->add_option("--eval", eval_paths, "evaluation data (CoNLL), repeatable")->required();
  sw->add_option("--regime", regime, "head, head_only, or full");
  sw->add_option("--out", out_dir, "directory for sweep.csv");

  auto* gen = app.add_subcommand("gen-data", "generate synthetic data");
  gen->require_subcommand(1);
  SyntheticCorpusOptions corpus_opt;
  auto* gc = gen->add_subcommand("corpus", "packed language-model sequences");
  gc->add_option("--vocab-size", corpus_opt.vocab_size, "vocabulary budget");
  gc->add_option("--sequences", corpus_opt.n_sequences, "number of packed rows");
  gc->add_option("--seq-len", corpus_opt.seq_len, "tokens per row");
  gc->add_option("--seed", corpus_opt.seed, "generator seed");
  gc->add_option("--out", out_dir, "output directory");

  SyntheticNerOptions ner_opt;
  auto* gn = gen->add_subcommand("ner", "tagged sentences (CoNLL)");
  gn->add_option("--sentences", ner_opt.n_sentences, "number of sentences");
  gn->add_option("--particle-rate", ner_opt.particle_rate, "fraction of anchored persons");
  gn->add_option("--org-anchor-rate", ner_opt.org_anchor_rate, "fraction of anchored orgs");
  gn->add_option("--oov-rate", ner_opt.oov_name_rate, "fraction of out-of-corpus names");
  gn->add_flag("--dialect", ner_opt.dialect, "use the disjoint dialect lexicon");
  gn->add_option("--seed", ner_opt.seed, "generator seed");
  gn->add_option("--id", ner_opt.dataset_id, "dataset id and file stem");
  gn->add_option("--out", out_dir, "output directory");

  auto* an = app.add_subcommand("analyze", "measurements over run artifacts");
  an->require_subcommand(1);
  std::string field = "loss", tensor_name, particles_csv = "si,ni";
  int64_t slope_k = 5, top_n = 10, sentence_idx = 0;

  auto* t90c = an->add_subcommand("t90", "steps to close 90% of the loss gap");
  t90c->add_option("--curve", data_path, "metrics.jsonl file")->required();
  t90c->add_option("--field", field, "which logged value to read");
  auto* aucc = an->add_subcommand("auc", "normalized area under the loss curve");
  aucc->add_option("--curve", data_path, "metrics.jsonl file")->required();
  aucc->add_option("--field", field, "which logged value to read");
  auto* slopec = an->add_subcommand("slope", "least-squares initial slope");
  slopec->add_option("--curve", data_path, "metrics.jsonl file")->required();
  slopec->add_option("--field", field, "which logged value to read");
  slopec->add_option("--k", slope_k, "points to fit");

  auto* prc = an->add_subcommand("particle-recall", "anchored person-span fraction");
  prc->add_option("--data", data_path, "dataset (CoNLL)")->required();
  prc->add_option("--particles", particles_csv, "comma-separated particle set");

  auto* oovc = an->add_subcommand("oov", "token out-of-vocabulary rate");
  oovc->add_option("--data", data_path, "dataset (CoNLL)")->required();
  oovc->add_option("--vocab", dev_path, "vocabulary JSON")->required();

  auto* perc = an->add_subcommand("per", "proportional effective rank of weights");
  perc->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  perc->add_option("--tensor", tensor_name, "single tensor name (default: all matrices)");

  auto* conf = an->add_subcommand("confidence", "gold-tag confidence per word over checkpoints");
  conf->add_option("--model", model_dirs, "finetuned model directory, repeatable")->required();
  conf->add_option("--data", data_path, "dataset (CoNLL)")->required();
  conf->add_option("--top-n", top_n, "words per split");
  conf->add_option("--out", out_dir, "directory for confidence.csv");

  auto* dlt = an->add_subcommand("delta", "gold-tag surprisal change between two models");
  dlt->add_option("--model-a", checkpoint, "baseline model directory")->required();
  dlt->add_option("--model-b", dev_path, "comparison model directory")->required();
  dlt->add_option("--data", data_path, "dataset (CoNLL)")->required();
  dlt->add_option("--sentence", sentence_idx, "sentence index to report");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    std::cerr << app.help() << '\n';
    return exit_code(ErrorKind::usage);
  }

  try {
    if (pre->parsed()) return cmd_pretrain(config_path, out_dir, world, resume);
    if (fin->parsed()) return cmd_finetune(config_path, checkpoint, data_path, dev_path, regime, out_dir);
    if (ev->parsed()) return cmd_eval(checkpoint, eval_paths, out_dir);
    if (sw->parsed()) return cmd_sweep(config_path, checkpoint, data_path, eval_paths, regime, out_dir);
    if (gc->parsed()) return cmd_gen_corpus(corpus_opt, out_dir);
    if (gn->parsed()) return cmd_gen_ner(ner_opt, out_dir);
    if (t90c->parsed()) return cmd_analyze_curve("t90", data_path, field, slope_k);
    if (aucc->parsed()) return cmd_analyze_curve("auc", data_path, field, slope_k);
    if (slopec->parsed()) return cmd_analyze_curve("slope", data_path, field, slope_k);
    if (prc->parsed()) return cmd_analyze_recall(data_path, split_particles(particles_csv));
    if (oovc->parsed()) return cmd_analyze_oov(data_path, dev_path);
    if (perc->parsed()) return cmd_analyze_rank(checkpoint, tensor_name);
    if (conf->parsed()) return cmd_analyze_confidence(model_dirs, data_path, top_n, out_dir);
    if (dlt->parsed()) return cmd_analyze_delta(checkpoint, dev_path, data_path, sentence_idx);
    fail(ErrorKind::usage, "no subcommand given");
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return exit_code(ErrorKind::config);
  }
}

}  // namespace metalm
