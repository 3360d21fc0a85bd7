#include "metalm/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "metalm/errors.hpp"

namespace metalm {

namespace {

void check_curve(const LossCurve& curve, size_t min_points) {
  require(curve.points.size() >= min_points, ErrorKind::data,
          "curve needs at least " + std::to_string(min_points) + " logged points, has " +
              std::to_string(curve.points.size()));
  for (size_t i = 1; i < curve.points.size(); ++i)
    require(curve.points[i].first > curve.points[i - 1].first, ErrorKind::data,
            "curve steps must be strictly increasing");
}

}  // namespace

int64_t t90(const LossCurve& curve) {
  check_curve(curve, 2);
  double init = curve.points.front().second;
  double final = curve.points.back().second;
  if (init == final) return curve.points.front().first;
  double threshold = final + 0.10 * (init - final);
  for (const auto& [step, value] : curve.points)
    if (value <= threshold) return step;
  return curve.points.back().first;  // unreachable: the last value qualifies
}

double normalized_auc(const LossCurve& curve) {
  check_curve(curve, 2);
  double lo = curve.points[0].second, hi = lo;
  for (const auto& [step, value] : curve.points) {
    lo = std::min(lo, value);
    hi = std::max(hi, value);
  }
  if (lo == hi) return 0.0;
  double s0 = static_cast<double>(curve.points.front().first);
  double s1 = static_cast<double>(curve.points.back().first);
  double area = 0.0;
  for (size_t i = 1; i < curve.points.size(); ++i) {
    double x0 = (static_cast<double>(curve.points[i - 1].first) - s0) / (s1 - s0);
    double x1 = (static_cast<double>(curve.points[i].first) - s0) / (s1 - s0);
    double y0 = (curve.points[i - 1].second - lo) / (hi - lo);
    double y1 = (curve.points[i].second - lo) / (hi - lo);
    area += 0.5 * (y0 + y1) * (x1 - x0);
  }
  return area;
}

double initial_slope(const LossCurve& curve, int64_t k) {
  require(k >= 2, ErrorKind::config, "slope needs at least 2 points");
  check_curve(curve, 2);
  size_t n = std::min(static_cast<size_t>(k), curve.points.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += static_cast<double>(curve.points[i].first);
    my += curve.points[i].second;
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double dx = static_cast<double>(curve.points[i].first) - mx;
    num += dx * (curve.points[i].second - my);
    den += dx * dx;
  }
  return num / den;
}

LossCurve curve_from_metrics_jsonl(const std::filesystem::path& path, const std::string& field) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open '" + path.string() + "'");
  LossCurve curve;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    require(!j.is_discarded(), ErrorKind::parse,
            path.string() + ":" + std::to_string(line_no) + ": not valid JSON");
    if (!j.contains(field)) continue;
    require(j.contains("step") && j["step"].is_number(), ErrorKind::parse,
            path.string() + ":" + std::to_string(line_no) + ": missing step");
    curve.points.emplace_back(j["step"].get<int64_t>(), j[field].get<double>());
  }
  return curve;
}

EffectiveRank effective_rank_proportional(const TensorD& matrix) {
  require(matrix.ndim() == 2, ErrorKind::shape, "effective rank needs a 2-d matrix");
  int64_t m = matrix.dim(0), n = matrix.dim(1);
  Eigen::MatrixXd mat(m, n);
  auto data = matrix.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) mat(i, j) = data[static_cast<size_t>(i * n + j)];
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(mat);
  const auto& sigma = svd.singularValues();

  EffectiveRank out;
  double top = sigma.size() > 0 ? sigma(0) : 0.0;
  if (top <= 0.0) return out;  // all-zero matrix: undefined
  std::vector<double> kept;
  for (Eigen::Index i = 0; i < sigma.size(); ++i)
    if (sigma(i) > 1e-12 * top) kept.push_back(sigma(i));
  double total = 0.0;
  for (double s : kept) total += s;
  double entropy = 0.0;
  for (double s : kept) {
    double p = s / total;
    entropy -= p * std::log(p);
  }
  out.er = std::exp(entropy);
  out.per = out.er / static_cast<double>(std::min(m, n));
  out.defined = true;
  return out;
}

EffectiveRank effective_rank_proportional(const Tensor& matrix) {
  require(matrix.ndim() == 2, ErrorKind::shape, "effective rank needs a 2-d matrix");
  auto wide = TensorD::zeros(matrix.shape());
  auto src = matrix.data();
  auto dst = wide.mutable_data();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(src[i]);
  return effective_rank_proportional(wide);
}

namespace {

std::string lowercased(const std::string& s) {
  std::string out = s;
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

ParticleRecall particle_recall(const NerDataset& data, const std::set<std::string>& particles) {
  ParticleRecall out;
  for (const auto& s : data.sentences) {
    for (const auto& span : spans_from_bio(s.tags)) {
      if (span.entity != 0) continue;  // persons only
      ++out.n_per;
      if (span.start > 0 &&
          particles.count(lowercased(s.words[static_cast<size_t>(span.start - 1)])))
        ++out.n_matched;
    }
  }
  if (out.n_per == 0) return out;
  out.value = static_cast<double>(out.n_matched) / static_cast<double>(out.n_per);
  out.defined = true;
  return out;
}

double oov_rate(const NerDataset& data, const Vocab& vocab) {
  int64_t total = 0, missing = 0;
  for (const auto& s : data.sentences)
    for (const auto& w : s.words) {
      ++total;
      if (vocab.id_of(w) == Vocab::kUnk) ++missing;
    }
  require(total > 0, ErrorKind::data, "dataset has no tokens");
  return static_cast<double>(missing) / static_cast<double>(total);
}

std::vector<ConfidenceSeries> token_confidence_series(const std::vector<TunedModel>& models,
                                                      const Vocab& vocab, const NerDataset& data,
                                                      int64_t top_n) {
  require(!models.empty(), ErrorKind::data, "no model snapshots to probe");
  require(!data.sentences.empty(), ErrorKind::data, "empty dataset");
  require(top_n >= 1, ErrorKind::config, "top_n must be positive");

  int64_t window = models.front().params.config.max_seq_len;
  for (const auto& m : models) window = std::min(window, m.params.config.max_seq_len);

  // Frequencies over the positions the models can actually score.
  std::map<std::string, int64_t> freq;
  std::set<std::string> in_entity;
  for (const auto& s : data.sentences) {
    require(s.words.size() == s.tags.size(), ErrorKind::data,
            "sentence has mismatched words and tags");
    size_t limit = std::min(s.words.size(), static_cast<size_t>(window));
    for (size_t p = 0; p < limit; ++p) {
      ++freq[s.words[p]];
      if (s.tags[p] != TagScheme::kO) in_entity.insert(s.words[p]);
    }
  }

  auto top_words = [&](bool entity) {
    std::vector<std::pair<std::string, int64_t>> pool;
    for (const auto& [word, count] : freq)
      if (in_entity.count(word) == static_cast<size_t>(entity)) pool.push_back({word, count});
    std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (pool.size() > static_cast<size_t>(top_n)) pool.resize(static_cast<size_t>(top_n));
    return pool;
  };

  std::vector<ConfidenceSeries> series;
  std::map<std::string, size_t> slot;
  for (bool entity : {true, false}) {
    for (const auto& [word, count] : top_words(entity)) {
      slot[word] = series.size();
      ConfidenceSeries cs;
      cs.word = word;
      cs.entity = entity;
      cs.occurrences = count;
      series.push_back(std::move(cs));
    }
  }

  for (const auto& model : models) {
    std::vector<double> acc(series.size(), 0.0);
    std::vector<int64_t> cnt(series.size(), 0);
    for (const auto& s : data.sentences) {
      auto ids = vocab.encode(s.words);
      if (static_cast<int64_t>(ids.size()) > window) ids.resize(static_cast<size_t>(window));
      bool wanted = false;
      for (size_t p = 0; p < ids.size(); ++p)
        if (slot.count(s.words[p])) wanted = true;
      if (!wanted) continue;
      auto hidden = decoder_hidden(static_cast<Tape*>(nullptr), model.params, ids);
      auto em = crf_emissions(static_cast<Tape*>(nullptr), hidden, model.head);
      auto marginals = tag_marginals(em, model.head);
      for (size_t p = 0; p < ids.size(); ++p) {
        auto it = slot.find(s.words[p]);
        if (it == slot.end()) continue;
        acc[it->second] += marginals[p][static_cast<size_t>(s.tags[p])];
        ++cnt[it->second];
      }
    }
    for (size_t i = 0; i < series.size(); ++i)
      series[i].points.push_back(
          {model.step, cnt[i] > 0 ? acc[i] / static_cast<double>(cnt[i]) : 0.0});
  }
  return series;
}

void write_confidence_csv(const std::vector<ConfidenceSeries>& series,
                          const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::io, "cannot write '" + path.string() + "'");
  out << "word,checkpoint_step,split,confidence\n";
  for (const auto& cs : series) {
    require(cs.word.find(',') == std::string::npos, ErrorKind::data,
            "word '" + cs.word + "' cannot appear in a CSV field");
    for (const auto& pt : cs.points) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%lld,%s,%.17g", static_cast<long long>(pt.checkpoint_step),
                    cs.entity ? "entity" : "non-entity", pt.confidence);
      out << cs.word << ',' << buf << '\n';
    }
  }
  require(out.good(), ErrorKind::io, "short write to '" + path.string() + "'");
}

std::vector<double> gold_tag_surprisal(const TensorD& emissions, const CrfParamsD& crf,
                                       std::span<const int> tags) {
  require(emissions.ndim() == 2 && emissions.dim(0) == static_cast<int64_t>(tags.size()),
          ErrorKind::shape, "one emission row per tag is required");
  auto marginals = tag_marginals(emissions, crf);
  std::vector<double> out(tags.size());
  for (size_t t = 0; t < tags.size(); ++t) {
    int y = tags[t];
    require(y >= 0 && y < TagScheme::kCount, ErrorKind::vocab,
            "tag id " + std::to_string(y) + " out of range");
    out[t] = -std::log(marginals[t][static_cast<size_t>(y)]);
  }
  return out;
}

namespace {

std::vector<double> model_surprisals(const DecoderParams& params, const CrfParams& head,
                                     const Vocab& vocab, const TaggedSentence& sentence,
                                     int64_t window) {
  auto ids = vocab.encode(sentence.words);
  if (static_cast<int64_t>(ids.size()) > window) ids.resize(static_cast<size_t>(window));
  auto hidden = decoder_hidden(static_cast<Tape*>(nullptr), params, ids);
  auto em = crf_emissions(static_cast<Tape*>(nullptr), hidden, head);
  auto marginals = tag_marginals(em, head);
  std::vector<double> out(ids.size());
  for (size_t t = 0; t < ids.size(); ++t)
    out[t] = -std::log(marginals[t][static_cast<size_t>(sentence.tags[t])]);
  return out;
}

}  // namespace

std::vector<double> delta_logprob(const DecoderParams& params_a, const CrfParams& head_a,
                                  const DecoderParams& params_b, const CrfParams& head_b,
                                  const Vocab& vocab, const TaggedSentence& sentence) {
  require(head_a.trans.ndim() == 2 && head_b.trans.ndim() == 2 &&
              head_a.trans.dim(0) == head_b.trans.dim(0),
          ErrorKind::config, "the two heads tag with different schemes");
  require(sentence.words.size() == sentence.tags.size(), ErrorKind::data,
          "sentence has mismatched words and tags");
  require(!sentence.words.empty(), ErrorKind::data, "empty sentence");
  for (int y : sentence.tags)
    require(y >= 0 && y < TagScheme::kCount, ErrorKind::vocab,
            "tag id " + std::to_string(y) + " out of range");
  int64_t window = std::min(params_a.config.max_seq_len, params_b.config.max_seq_len);
  auto a = model_surprisals(params_a, head_a, vocab, sentence, window);
  auto b = model_surprisals(params_b, head_b, vocab, sentence, window);
  std::vector<double> delta(a.size());
  for (size_t t = 0; t < a.size(); ++t) delta[t] = b[t] - a[t];
  return delta;
}

void export_metrics_csv(const std::vector<MetricRecord>& records,
                        const std::filesystem::path& path) {
  require(!records.empty(), ErrorKind::data, "nothing to export");
  std::ofstream out(path);
  require(out.good(), ErrorKind::io, "cannot write '" + path.string() + "'");
  out << "step,dataset,metric,value\n";
  for (const auto& r : records) {
    require(r.dataset.find(',') == std::string::npos && r.metric.find(',') == std::string::npos,
            ErrorKind::data, "dataset and metric names cannot contain commas");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", r.value);
    out << r.step << ',' << r.dataset << ',' << r.metric << ',' << buf << '\n';
  }
  require(out.good(), ErrorKind::io, "short write to '" + path.string() + "'");
}

void export_metrics_jsonl(const std::vector<MetricRecord>& records,
                          const std::filesystem::path& path) {
  require(!records.empty(), ErrorKind::data, "nothing to export");
  std::ofstream out(path);
  require(out.good(), ErrorKind::io, "cannot write '" + path.string() + "'");
  for (const auto& r : records) {
    nlohmann::json j = {
        {"step", r.step}, {"dataset", r.dataset}, {"metric", r.metric}, {"value", r.value}};
    out << j.dump() << '\n';
  }
  require(out.good(), ErrorKind::io, "short write to '" + path.string() + "'");
}

std::vector<MetricRecord> load_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open '" + path.string() + "'");
  std::vector<MetricRecord> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      require(line == "step,dataset,metric,value", ErrorKind::parse,
              path.string() + ":1: unexpected header '" + line + "'");
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    require(f.size() == 4, ErrorKind::parse,
            path.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
    try {
      out.push_back({std::stoll(f[0]), f[1], f[2], std::stod(f[3])});
    } catch (const std::exception&) {
      fail(ErrorKind::parse,
           path.string() + ":" + std::to_string(line_no) + ": malformed numeric field");
    }
  }
  return out;
}

}  // namespace metalm
