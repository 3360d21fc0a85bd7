#include "metalm/optimizer.hpp"

#include <cmath>

#include "metalm/errors.hpp"

namespace metalm {

void LrSchedule::validate() const {
  require(kind == "cosine" || kind == "linear", ErrorKind::config,
          "unknown lr schedule '" + kind + "'");
  require(peak > 0.0, ErrorKind::config, "peak learning rate must be positive");
  require(warmup_steps >= 0, ErrorKind::config, "warmup_steps must be non-negative");
  require(total_steps > warmup_steps, ErrorKind::config,
          "total_steps must exceed warmup_steps");
}

double LrSchedule::at(int64_t step) const {
  validate();
  require(step >= 0, ErrorKind::config, "schedule step must be non-negative");
  if (step < warmup_steps)
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step >= total_steps) return 0.0;
  double frac = static_cast<double>(step - warmup_steps) /
                static_cast<double>(total_steps - warmup_steps);
  if (kind == "linear") return peak * (1.0 - frac);
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor*>> params, AdamWOptions opt)
    : params_(std::move(params)), opt_(opt) {
  require(!params_.empty(), ErrorKind::config, "optimizer needs at least one parameter");
  require(opt_.beta1 >= 0 && opt_.beta1 < 1 && opt_.beta2 >= 0 && opt_.beta2 < 1,
          ErrorKind::config, "betas must lie in [0,1)");
  require(opt_.eps > 0, ErrorKind::config, "eps must be positive");
  require(opt_.weight_decay >= 0, ErrorKind::config, "weight_decay must be non-negative");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& [name, p] : params_) {
    require(p != nullptr && p->defined(), ErrorKind::config,
            "optimizer parameter '" + name + "' is undefined");
    require(p->requires_grad(), ErrorKind::config,
            "optimizer parameter '" + name + "' does not accumulate gradients");
    m_.emplace_back(static_cast<size_t>(p->numel()), 0.0f);
    v_.emplace_back(static_cast<size_t>(p->numel()), 0.0f);
  }
}

void AdamW::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& [name, p] = params_[i];
    std::span<float> w = p->mutable_data();
    std::span<float> g = p->mutable_grad();
    bool decay = opt_.weight_decay > 0.0 && p->ndim() > 1;
    for (size_t j = 0; j < w.size(); ++j) {
      double gj = static_cast<double>(g[j]);
      double wj = static_cast<double>(w[j]);
      if (!std::isfinite(gj))
        fail(ErrorKind::numeric, "non-finite gradient in '" + name + "'");
      double mj = opt_.beta1 * static_cast<double>(m_[i][j]) + (1.0 - opt_.beta1) * gj;
      double vj = opt_.beta2 * static_cast<double>(v_[i][j]) + (1.0 - opt_.beta2) * gj * gj;
      m_[i][j] = static_cast<float>(mj);
      v_[i][j] = static_cast<float>(vj);
      double update = (mj / bc1) / (std::sqrt(vj / bc2) + opt_.eps);
      if (decay) update += opt_.weight_decay * wj;
      wj -= lr * update;
      if (!std::isfinite(wj))
        fail(ErrorKind::numeric, "non-finite parameter in '" + name + "' after update");
      w[j] = static_cast<float>(wj);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& [name, p] : params_) p->zero_grad();
}

void AdamW::set_steps_taken(int64_t t) {
  require(t >= 0, ErrorKind::config, "optimizer step count must be non-negative");
  t_ = t;
}

std::vector<std::pair<std::string, std::vector<float>*>> AdamW::state() {
  std::vector<std::pair<std::string, std::vector<float>*>> out;
  out.reserve(params_.size() * 2);
  for (size_t i = 0; i < params_.size(); ++i) out.emplace_back("opt.m." + params_[i].first, &m_[i]);
  for (size_t i = 0; i < params_.size(); ++i) out.emplace_back("opt.v." + params_[i].first, &v_[i]);
  return out;
}

}  // namespace metalm
