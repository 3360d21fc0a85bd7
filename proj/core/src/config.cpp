#include "metalm/config.hpp"

#include <fstream>
#include <initializer_list>

#include "metalm/errors.hpp"

namespace metalm {

namespace {

void check_keys(const nlohmann::json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
  require(j.is_object(), ErrorKind::config, "section '" + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) known = true;
    require(known, ErrorKind::config, "unknown key '" + section + "." + it.key() + "'");
  }
}

int64_t get_int(const nlohmann::json& j, const std::string& section, const char* key,
                int64_t fallback) {
  if (!j.contains(key)) return fallback;
  require(j[key].is_number_integer(), ErrorKind::config,
          "'" + section + "." + key + "' must be an integer");
  return j[key].get<int64_t>();
}

uint64_t get_uint(const nlohmann::json& j, const std::string& section, const char* key,
                  uint64_t fallback) {
  if (!j.contains(key)) return fallback;
  require(j[key].is_number_integer() && (!j[key].is_number_integer() || j[key].get<int64_t>() >= 0),
          ErrorKind::config, "'" + section + "." + key + "' must be a non-negative integer");
  return j[key].get<uint64_t>();
}

double get_num(const nlohmann::json& j, const std::string& section, const char* key,
               double fallback) {
  if (!j.contains(key)) return fallback;
  require(j[key].is_number(), ErrorKind::config, "'" + section + "." + key + "' must be a number");
  return j[key].get<double>();
}

bool get_bool(const nlohmann::json& j, const std::string& section, const char* key,
              bool fallback) {
  if (!j.contains(key)) return fallback;
  require(j[key].is_boolean(), ErrorKind::config,
          "'" + section + "." + key + "' must be a boolean");
  return j[key].get<bool>();
}

std::string get_str(const nlohmann::json& j, const std::string& section, const char* key,
                    const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  require(j[key].is_string(), ErrorKind::config, "'" + section + "." + key + "' must be a string");
  return j[key].get<std::string>();
}

ModelConfig parse_model(const nlohmann::json& j, std::string* tier) {
  if (j.is_string()) {
    *tier = j.get<std::string>();
    return tier_config(*tier);
  }
  check_keys(j, "model",
             {"d_model", "n_layers", "n_heads", "n_kv_heads", "d_ff", "vocab_size", "max_seq_len",
              "norm_eps", "rope_theta"});
  ModelConfig cfg;
  cfg.d_model = get_int(j, "model", "d_model", cfg.d_model);
  cfg.n_layers = get_int(j, "model", "n_layers", cfg.n_layers);
  cfg.n_heads = get_int(j, "model", "n_heads", cfg.n_heads);
  cfg.n_kv_heads = get_int(j, "model", "n_kv_heads", cfg.n_kv_heads);
  cfg.d_ff = get_int(j, "model", "d_ff", cfg.d_ff);
  cfg.vocab_size = get_int(j, "model", "vocab_size", cfg.vocab_size);
  cfg.max_seq_len = get_int(j, "model", "max_seq_len", cfg.max_seq_len);
  cfg.norm_eps = get_num(j, "model", "norm_eps", cfg.norm_eps);
  cfg.rope_theta = get_num(j, "model", "rope_theta", cfg.rope_theta);
  return cfg;
}

void parse_train(const nlohmann::json& j, TrainConfig* train) {
  check_keys(j, "train",
             {"world_size", "total_steps", "checkpoint_every", "batch_size", "accum_steps",
              "dropout", "seed", "heldout_rows", "lr", "adamw"});
  train->world_size = get_int(j, "train", "world_size", train->world_size);
  train->total_steps = get_int(j, "train", "total_steps", train->total_steps);
  train->checkpoint_every = get_int(j, "train", "checkpoint_every", train->checkpoint_every);
  train->batch_size = get_int(j, "train", "batch_size", train->batch_size);
  train->accum_steps = get_int(j, "train", "accum_steps", train->accum_steps);
  train->dropout = get_num(j, "train", "dropout", train->dropout);
  train->seed = get_uint(j, "train", "seed", train->seed);
  train->heldout_rows = get_int(j, "train", "heldout_rows", train->heldout_rows);
  if (j.contains("lr")) {
    check_keys(j["lr"], "train.lr", {"kind", "peak", "warmup_steps", "total_steps"});
    train->lr.kind = get_str(j["lr"], "train.lr", "kind", train->lr.kind);
    train->lr.peak = get_num(j["lr"], "train.lr", "peak", train->lr.peak);
    train->lr.warmup_steps = get_int(j["lr"], "train.lr", "warmup_steps", train->lr.warmup_steps);
    train->lr.total_steps = get_int(j["lr"], "train.lr", "total_steps", train->lr.total_steps);
  }
  if (j.contains("adamw")) {
    check_keys(j["adamw"], "train.adamw", {"beta1", "beta2", "eps", "weight_decay"});
    train->adamw.beta1 = get_num(j["adamw"], "train.adamw", "beta1", train->adamw.beta1);
    train->adamw.beta2 = get_num(j["adamw"], "train.adamw", "beta2", train->adamw.beta2);
    train->adamw.eps = get_num(j["adamw"], "train.adamw", "eps", train->adamw.eps);
    train->adamw.weight_decay =
        get_num(j["adamw"], "train.adamw", "weight_decay", train->adamw.weight_decay);
  }
}

void parse_meta(const nlohmann::json& j, TrainConfig* train) {
  check_keys(j, "meta",
             {"n_way", "k_shot", "n_query", "inner_steps", "inner_lr", "rho", "head_hidden",
              "max_doc_frac", "grad_transport"});
  MetaConfig* m = &train->meta;
  m->n_way = get_int(j, "meta", "n_way", m->n_way);
  m->k_shot = get_int(j, "meta", "k_shot", m->k_shot);
  m->n_query = get_int(j, "meta", "n_query", m->n_query);
  m->inner_steps = get_int(j, "meta", "inner_steps", m->inner_steps);
  m->inner_lr = get_num(j, "meta", "inner_lr", m->inner_lr);
  m->head_hidden = get_int(j, "meta", "head_hidden", m->head_hidden);
  m->max_doc_frac = get_num(j, "meta", "max_doc_frac", m->max_doc_frac);
  m->grad_transport = get_bool(j, "meta", "grad_transport", m->grad_transport);
  train->meta_mix = get_num(j, "meta", "rho", train->meta_mix);
}

void parse_data(const nlohmann::json& j, DataConfig* data) {
  check_keys(j, "data", {"corpus", "vocab", "synthetic"});
  data->corpus = get_str(j, "data", "corpus", data->corpus.string());
  data->vocab = get_str(j, "data", "vocab", data->vocab.string());
  if (j.contains("synthetic")) {
    check_keys(j["synthetic"], "data.synthetic", {"vocab_size", "n_sequences", "seq_len", "seed"});
    auto& s = data->synthetic;
    s.vocab_size = get_int(j["synthetic"], "data.synthetic", "vocab_size", s.vocab_size);
    s.n_sequences = get_int(j["synthetic"], "data.synthetic", "n_sequences", s.n_sequences);
    s.seq_len = get_int(j["synthetic"], "data.synthetic", "seq_len", s.seq_len);
    s.seed = get_uint(j["synthetic"], "data.synthetic", "seed", s.seed);
  }
}

void parse_finetune(const nlohmann::json& j, FinetuneConfig* ft) {
  check_keys(j, "finetune",
             {"regime", "lr", "max_epochs", "patience", "batch_size", "seed", "source"});
  ft->regime = regime_from_string(get_str(j, "finetune", "regime", to_string(ft->regime)));
  ft->lr = get_num(j, "finetune", "lr", ft->lr);
  ft->max_epochs = get_int(j, "finetune", "max_epochs", ft->max_epochs);
  ft->patience = get_int(j, "finetune", "patience", ft->patience);
  ft->batch_size = get_int(j, "finetune", "batch_size", ft->batch_size);
  ft->seed = get_uint(j, "finetune", "seed", ft->seed);
  ft->source = get_str(j, "finetune", "source", ft->source);
}

void parse_analysis(const nlohmann::json& j, AnalysisConfig* a) {
  check_keys(j, "analysis", {"particles", "top_n", "slope_k"});
  if (j.contains("particles")) {
    require(j["particles"].is_array(), ErrorKind::config,
            "'analysis.particles' must be an array of strings");
    a->particles.clear();
    for (const auto& p : j["particles"]) {
      require(p.is_string(), ErrorKind::config,
              "'analysis.particles' must be an array of strings");
      a->particles.insert(p.get<std::string>());
    }
  }
  a->top_n = get_int(j, "analysis", "top_n", a->top_n);
  a->slope_k = get_int(j, "analysis", "slope_k", a->slope_k);
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  check_keys(j, "run", {"model", "train", "meta", "data", "finetune", "analysis", "model_tier"});
  RunConfig cfg;
  cfg.tier = get_str(j, "run", "model_tier", "");
  if (j.contains("model")) cfg.train.model = parse_model(j["model"], &cfg.tier);
  if (j.contains("train")) parse_train(j["train"], &cfg.train);
  if (j.contains("meta")) parse_meta(j["meta"], &cfg.train);
  if (j.contains("data")) parse_data(j["data"], &cfg.data);
  if (j.contains("finetune")) parse_finetune(j["finetune"], &cfg.finetune);
  if (j.contains("analysis")) parse_analysis(j["analysis"], &cfg.analysis);
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open '" + path.string() + "'");
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  require(!j.is_discarded(), ErrorKind::parse, "'" + path.string() + "' is not valid JSON");
  return from_json(j);
}

void RunConfig::validate() const {
  train.validate();
  finetune.validate();
  require(analysis.top_n >= 1, ErrorKind::config, "'analysis.top_n' must be positive");
  require(analysis.slope_k >= 2, ErrorKind::config, "'analysis.slope_k' must be at least 2");
  require(data.corpus.empty() == data.vocab.empty(), ErrorKind::config,
          "'data.corpus' and 'data.vocab' must be given together");
}

nlohmann::json RunConfig::to_json() const {
  const ModelConfig& m = train.model;
  nlohmann::json model = {{"d_model", m.d_model},         {"n_layers", m.n_layers},
                          {"n_heads", m.n_heads},         {"n_kv_heads", m.n_kv_heads},
                          {"d_ff", m.d_ff},               {"vocab_size", m.vocab_size},
                          {"max_seq_len", m.max_seq_len}, {"norm_eps", m.norm_eps},
                          {"rope_theta", m.rope_theta}};
  nlohmann::json out = {
      {"model", model},
      {"train",
       {{"world_size", train.world_size},
        {"total_steps", train.total_steps},
        {"checkpoint_every", train.checkpoint_every},
        {"batch_size", train.batch_size},
        {"accum_steps", train.accum_steps},
        {"dropout", train.dropout},
        {"seed", train.seed},
        {"heldout_rows", train.heldout_rows},
        {"lr",
         {{"kind", train.lr.kind},
          {"peak", train.lr.peak},
          {"warmup_steps", train.lr.warmup_steps},
          {"total_steps", train.lr.total_steps}}},
        {"adamw",
         {{"beta1", train.adamw.beta1},
          {"beta2", train.adamw.beta2},
          {"eps", train.adamw.eps},
          {"weight_decay", train.adamw.weight_decay}}}}},
      {"meta",
       {{"n_way", train.meta.n_way},
        {"k_shot", train.meta.k_shot},
        {"n_query", train.meta.n_query},
        {"inner_steps", train.meta.inner_steps},
        {"inner_lr", train.meta.inner_lr},
        {"rho", train.meta_mix},
        {"head_hidden", train.meta.head_hidden},
        {"max_doc_frac", train.meta.max_doc_frac},
        {"grad_transport", train.meta.grad_transport}}},
      {"data",
       {{"corpus", data.corpus.string()},
        {"vocab", data.vocab.string()},
        {"synthetic",
         {{"vocab_size", data.synthetic.vocab_size},
          {"n_sequences", data.synthetic.n_sequences},
          {"seq_len", data.synthetic.seq_len},
          {"seed", data.synthetic.seed}}}}},
      {"finetune",
       {{"regime", to_string(finetune.regime)},
        {"lr", finetune.lr},
        {"max_epochs", finetune.max_epochs},
        {"patience", finetune.patience},
        {"batch_size", finetune.batch_size},
        {"seed", finetune.seed},
        {"source", finetune.source}}},
      {"analysis",
       {{"particles", analysis.particles},
        {"top_n", analysis.top_n},
        {"slope_k", analysis.slope_k}}}};
  if (!tier.empty()) out["model_tier"] = tier;
  return out;
}

}  // namespace metalm
