#include "metalm/crf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "metalm/errors.hpp"

namespace metalm {

template <class T>
CrfParamsT<T> CrfParamsT<T>::init(int64_t d_model, Rng& rng) {
  require(d_model >= 1, ErrorKind::config, "emission projection needs a positive input width");
  CrfParamsT crf;
  crf.proj = TensorT<T>::randn({d_model, TagScheme::kCount}, rng, static_cast<T>(0.02));
  crf.trans = TensorT<T>::zeros({TagScheme::kCount, TagScheme::kCount});
  crf.start = TensorT<T>::zeros({TagScheme::kCount});
  crf.end = TensorT<T>::zeros({TagScheme::kCount});
  return crf;
}

template <class T>
std::vector<std::pair<std::string, TensorT<T>>> CrfParamsT<T>::named_tensors() const {
  return {{"crf.proj", proj}, {"crf.trans", trans}, {"crf.start", start}, {"crf.end", end}};
}

template <class T>
CrfParamsT<T>& CrfParamsT<T>::set_requires_grad(bool v) {
  proj.set_requires_grad(v);
  trans.set_requires_grad(v);
  start.set_requires_grad(v);
  end.set_requires_grad(v);
  return *this;
}

namespace {

// K comes from the transition matrix so the path math works for any tag set;
// only constrained decoding and span logic assume the 7-tag scheme.
template <class T>
int64_t checked_width(const TensorT<T>& emissions, const CrfParamsT<T>& crf, const char* what) {
  require(emissions.ndim() == 2 && emissions.dim(0) >= 1, ErrorKind::shape,
          std::string(what) + ": emissions must be [T, K] with T >= 1");
  require(crf.trans.ndim() == 2 && crf.trans.dim(0) == crf.trans.dim(1), ErrorKind::shape,
          std::string(what) + ": transition matrix must be square");
  int64_t k = crf.trans.dim(0);
  require(emissions.dim(1) == k, ErrorKind::shape,
          std::string(what) + ": emissions have " + std::to_string(emissions.dim(1)) +
              " columns but the transition matrix is " + std::to_string(k) + " wide");
  require(crf.start.numel() == k && crf.end.numel() == k, ErrorKind::shape,
          std::string(what) + ": start/end scores must have one entry per tag");
  return k;
}

double lse(const std::vector<double>& v) {
  double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - m);
  return m + std::log(acc);
}

}  // namespace

template <class T>
TensorT<T> crf_emissions(TapeT<T>* tape, const TensorT<T>& hidden, const CrfParamsT<T>& crf) {
  return matmul(tape, hidden, crf.proj);
}

template <class T>
TensorT<T> log_partition(TapeT<T>* tape, const TensorT<T>& emissions, const CrfParamsT<T>& crf) {
  int64_t t_len = emissions.dim(0);
  int64_t k = checked_width(emissions, crf, "log_partition");
  TensorT<T> alpha = add(tape, row(tape, emissions, 0), crf.start);
  for (int64_t t = 1; t < t_len; ++t) {
    auto scores = add(tape, broadcast_col(tape, alpha, k), crf.trans);  // [i, j]
    alpha = add(tape, logsumexp_rows(tape, transpose(tape, scores)), row(tape, emissions, t));
  }
  auto final_scores = add(tape, alpha, crf.end);
  return logsumexp_rows(tape, reshape(tape, final_scores, {1, k}));
}

template <class T>
TensorT<T> crf_nll(TapeT<T>* tape, const TensorT<T>& emissions, std::span<const int> labels,
                   const CrfParamsT<T>& crf) {
  int64_t t_len = emissions.dim(0);
  int64_t k = checked_width(emissions, crf, "crf_nll");
  require(static_cast<int64_t>(labels.size()) == t_len, ErrorKind::shape,
          "crf_nll: " + std::to_string(labels.size()) + " labels for " + std::to_string(t_len) +
              " positions");
  for (int label : labels)
    require(label >= 0 && label < k, ErrorKind::vocab,
            "crf_nll: label index " + std::to_string(label) + " outside [0, " +
                std::to_string(k) + ")");

  std::vector<std::pair<int64_t, int64_t>> em_picks, tr_picks;
  for (int64_t t = 0; t < t_len; ++t) em_picks.emplace_back(t, labels[static_cast<size_t>(t)]);
  for (int64_t t = 1; t < t_len; ++t)
    tr_picks.emplace_back(labels[static_cast<size_t>(t - 1)], labels[static_cast<size_t>(t)]);

  TensorT<T> gold = add(tape, pick_sum(tape, emissions, em_picks),
                        pick_sum1d(tape, crf.start, {labels.front()}));
  if (!tr_picks.empty()) gold = add(tape, gold, pick_sum(tape, crf.trans, tr_picks));
  gold = add(tape, gold, pick_sum1d(tape, crf.end, {labels.back()}));
  return sub(tape, log_partition(tape, emissions, crf), gold);
}

template <class T>
std::vector<int> viterbi_decode(const TensorT<T>& emissions, const CrfParamsT<T>& crf,
                                bool constrained) {
  int64_t t_len = emissions.dim(0);
  int64_t k = checked_width(emissions, crf, "viterbi_decode");
  require(!constrained || k == TagScheme::kCount, ErrorKind::config,
          "constrained decoding is defined for the 7-tag scheme only");
  auto em = emissions.data();
  auto tr = crf.trans.data();
  auto s = crf.start.data();
  auto e = crf.end.data();
  const double kNegInf = -std::numeric_limits<double>::infinity();

  auto at = [k](std::span<const T> span2d, int64_t r, int64_t c) {
    return static_cast<double>(span2d[static_cast<size_t>(r * k + c)]);
  };

  std::vector<double> delta(static_cast<size_t>(k));
  std::vector<std::vector<int>> back(static_cast<size_t>(t_len),
                                     std::vector<int>(static_cast<size_t>(k), -1));
  for (int64_t j = 0; j < k; ++j)
    delta[static_cast<size_t>(j)] =
        constrained && !TagScheme::valid_start(static_cast<int>(j))
            ? kNegInf
            : static_cast<double>(s[static_cast<size_t>(j)]) + at(em, 0, j);

  std::vector<double> next(static_cast<size_t>(k));
  for (int64_t t = 1; t < t_len; ++t) {
    for (int64_t j = 0; j < k; ++j) {
      double best = kNegInf;
      int arg = -1;
      for (int64_t i = 0; i < k; ++i) {
        if (constrained &&
            !TagScheme::valid_transition(static_cast<int>(i), static_cast<int>(j)))
          continue;
        double cand = delta[static_cast<size_t>(i)] + at(tr, i, j);
        if (cand > best) {  // ascending scan keeps the lowest index on ties
          best = cand;
          arg = static_cast<int>(i);
        }
      }
      next[static_cast<size_t>(j)] = best + at(em, t, j);
      back[static_cast<size_t>(t)][static_cast<size_t>(j)] = arg;
    }
    delta = next;
  }

  double best = kNegInf;
  int arg = 0;
  for (int64_t j = 0; j < k; ++j) {
    double cand = delta[static_cast<size_t>(j)] + static_cast<double>(e[static_cast<size_t>(j)]);
    if (cand > best) {
      best = cand;
      arg = static_cast<int>(j);
    }
  }

  std::vector<int> path(static_cast<size_t>(t_len));
  path.back() = arg;
  for (int64_t t = t_len - 1; t > 0; --t)
    path[static_cast<size_t>(t - 1)] =
        back[static_cast<size_t>(t)][static_cast<size_t>(path[static_cast<size_t>(t)])];
  return path;
}

template <class T>
std::vector<std::array<double, TagScheme::kCount>> tag_marginals(const TensorT<T>& emissions,
                                                                 const CrfParamsT<T>& crf) {
  int64_t t_len = emissions.dim(0);
  int64_t k = checked_width(emissions, crf, "tag_marginals");
  require(k == TagScheme::kCount, ErrorKind::shape,
          "tag_marginals is defined for the 7-tag scheme only");
  auto em = emissions.data();
  auto tr = crf.trans.data();
  auto s = crf.start.data();
  auto e = crf.end.data();
  auto at = [k](std::span<const T> span2d, int64_t r, int64_t c) {
    return static_cast<double>(span2d[static_cast<size_t>(r * k + c)]);
  };

  std::vector<std::vector<double>> alpha(static_cast<size_t>(t_len),
                                         std::vector<double>(static_cast<size_t>(k)));
  std::vector<std::vector<double>> beta = alpha;
  for (int64_t j = 0; j < k; ++j)
    alpha[0][static_cast<size_t>(j)] =
        static_cast<double>(s[static_cast<size_t>(j)]) + at(em, 0, j);
  std::vector<double> terms(static_cast<size_t>(k));
  for (int64_t t = 1; t < t_len; ++t)
    for (int64_t j = 0; j < k; ++j) {
      for (int64_t i = 0; i < k; ++i)
        terms[static_cast<size_t>(i)] =
            alpha[static_cast<size_t>(t - 1)][static_cast<size_t>(i)] + at(tr, i, j);
      alpha[static_cast<size_t>(t)][static_cast<size_t>(j)] = lse(terms) + at(em, t, j);
    }
  for (int64_t i = 0; i < k; ++i)
    beta[static_cast<size_t>(t_len - 1)][static_cast<size_t>(i)] =
        static_cast<double>(e[static_cast<size_t>(i)]);
  for (int64_t t = t_len - 2; t >= 0; --t)
    for (int64_t i = 0; i < k; ++i) {
      for (int64_t j = 0; j < k; ++j)
        terms[static_cast<size_t>(j)] = at(tr, i, j) + at(em, t + 1, j) +
                                        beta[static_cast<size_t>(t + 1)][static_cast<size_t>(j)];
      beta[static_cast<size_t>(t)][static_cast<size_t>(i)] = lse(terms);
    }

  for (int64_t j = 0; j < k; ++j)
    terms[static_cast<size_t>(j)] = alpha[static_cast<size_t>(t_len - 1)][static_cast<size_t>(j)] +
                                    static_cast<double>(e[static_cast<size_t>(j)]);
  double log_z = lse(terms);

  std::vector<std::array<double, TagScheme::kCount>> out(static_cast<size_t>(t_len));
  for (int64_t t = 0; t < t_len; ++t)
    for (int64_t j = 0; j < k; ++j)
      out[static_cast<size_t>(t)][static_cast<size_t>(j)] =
          std::exp(alpha[static_cast<size_t>(t)][static_cast<size_t>(j)] +
                   beta[static_cast<size_t>(t)][static_cast<size_t>(j)] - log_z);
  return out;
}

std::vector<Span> spans_from_bio(std::span<const int> tags) {
  std::vector<Span> out;
  int open = -1;  // entity type of the span being built, -1 when none
  int64_t open_start = 0;
  auto close = [&](int64_t end) {
    if (open >= 0) out.push_back({open_start, end, open});
    open = -1;
  };
  for (int64_t t = 0; t < static_cast<int64_t>(tags.size()); ++t) {
    int id = tags[static_cast<size_t>(t)];
    require(id >= 0 && id < TagScheme::kCount, ErrorKind::parse,
            "unknown tag id " + std::to_string(id));
    if (TagScheme::is_begin(id)) {
      close(t - 1);
      open = TagScheme::entity_type(id);
      open_start = t;
    } else if (TagScheme::is_inside(id)) {
      int entity = TagScheme::entity_type(id);
      if (open != entity) {  // orphan continuation: treat as a new span
        close(t - 1);
        open = entity;
        open_start = t;
      }
    } else {
      close(t - 1);
    }
  }
  close(static_cast<int64_t>(tags.size()) - 1);
  return out;
}

std::vector<Span> spans_from_bio(const std::vector<std::string>& tags) {
  std::vector<int> ids;
  ids.reserve(tags.size());
  for (const auto& t : tags) ids.push_back(TagScheme::index_of(t));
  return spans_from_bio(ids);
}

namespace {

F1Stats assemble(int64_t tp, int64_t n_pred, int64_t n_gold) {
  F1Stats f;
  f.tp = tp;
  f.n_pred = n_pred;
  f.n_gold = n_gold;
  f.undefined = n_pred == 0 && n_gold == 0;
  f.precision = n_pred > 0 ? static_cast<double>(tp) / static_cast<double>(n_pred) : 0.0;
  f.recall = n_gold > 0 ? static_cast<double>(tp) / static_cast<double>(n_gold) : 0.0;
  double pr = f.precision + f.recall;
  f.f1 = pr > 0.0 ? 2.0 * f.precision * f.recall / pr : 0.0;
  return f;
}

int64_t matched(std::vector<Span> a, std::vector<Span> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  int64_t tp = 0;
  size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++tp;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return tp;
}

}  // namespace

F1Stats micro_f1(const std::vector<std::vector<Span>>& pred,
                 const std::vector<std::vector<Span>>& gold) {
  require(pred.size() == gold.size(), ErrorKind::data,
          "micro_f1: " + std::to_string(pred.size()) + " predicted sentences vs " +
              std::to_string(gold.size()) + " gold");
  int64_t tp = 0, n_pred = 0, n_gold = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    tp += matched(pred[i], gold[i]);
    n_pred += static_cast<int64_t>(pred[i].size());
    n_gold += static_cast<int64_t>(gold[i].size());
  }
  return assemble(tp, n_pred, n_gold);
}

std::array<F1Stats, 3> per_type_f1(const std::vector<std::vector<Span>>& pred,
                                   const std::vector<std::vector<Span>>& gold) {
  require(pred.size() == gold.size(), ErrorKind::data,
          "per_type_f1: sentence lists differ in length");
  std::array<F1Stats, 3> out;
  for (int entity = 0; entity < 3; ++entity) {
    auto filter = [entity](const std::vector<std::vector<Span>>& all) {
      std::vector<std::vector<Span>> kept(all.size());
      for (size_t i = 0; i < all.size(); ++i)
        for (const Span& s : all[i])
          if (s.entity == entity) kept[i].push_back(s);
      return kept;
    };
    out[static_cast<size_t>(entity)] = micro_f1(filter(pred), filter(gold));
  }
  return out;
}

F1Stats token_micro_f1(const std::vector<std::vector<int>>& pred,
                       const std::vector<std::vector<int>>& gold) {
  require(pred.size() == gold.size(), ErrorKind::data,
          "token_micro_f1: sentence lists differ in length");
  int64_t tp = 0, n_pred = 0, n_gold = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    require(pred[i].size() == gold[i].size(), ErrorKind::data,
            "token_micro_f1: sentence " + std::to_string(i) + " length mismatch");
    for (size_t t = 0; t < pred[i].size(); ++t) {
      int p = pred[i][t], g = gold[i][t];
      require(p >= 0 && p < TagScheme::kCount && g >= 0 && g < TagScheme::kCount,
              ErrorKind::parse, "unknown tag id");
      if (p != TagScheme::kO) ++n_pred;
      if (g != TagScheme::kO) ++n_gold;
      if (p == g && g != TagScheme::kO) ++tp;
    }
  }
  return assemble(tp, n_pred, n_gold);
}

#define METALM_INSTANTIATE_CRF(T)                                                              \
  template struct CrfParamsT<T>;                                                               \
  template TensorT<T> crf_emissions<T>(TapeT<T>*, const TensorT<T>&, const CrfParamsT<T>&);    \
  template TensorT<T> log_partition<T>(TapeT<T>*, const TensorT<T>&, const CrfParamsT<T>&);    \
  template TensorT<T> crf_nll<T>(TapeT<T>*, const TensorT<T>&, std::span<const int>,           \
                                 const CrfParamsT<T>&);                                        \
  template std::vector<int> viterbi_decode<T>(const TensorT<T>&, const CrfParamsT<T>&, bool);  \
  template std::vector<std::array<double, TagScheme::kCount>> tag_marginals<T>(               \
      const TensorT<T>&, const CrfParamsT<T>&);

METALM_INSTANTIATE_CRF(float)
METALM_INSTANTIATE_CRF(double)

#undef METALM_INSTANTIATE_CRF

}  // namespace metalm
