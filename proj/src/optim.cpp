// optim.cpp — see optim.hpp.
#include "regseg/optim.hpp"

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace regseg::nn {

AdamW::AdamW(std::vector<NodePtr> params, OptimConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (cfg_.t_total < 1)
    throw std::invalid_argument("AdamW: t_total must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(Arr::Zero(p->value.size()));
    v_.push_back(Arr::Zero(p->value.size()));
  }
}

double AdamW::current_lr() const {
  const double frac =
      std::min(1.0, static_cast<double>(t_) / cfg_.t_total);
  return cfg_.lr * std::pow(1.0 - frac, cfg_.poly_power);
}

void AdamW::step() {
  const double lr = current_lr();
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_ + 1));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_ + 1));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Node& p = *params_[i];
    p.ensure_grad();
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p.grad;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * p.grad.square();
    const Arr mhat = m_[i] / bc1;
    const Arr vhat = v_[i] / bc2;
    p.value -= lr * (mhat / (vhat.sqrt() + cfg_.eps) +
                     cfg_.weight_decay * p.value);
  }
  ++t_;
}

void AdamW::save_state(std::ostream& out) const {
  const std::uint64_t n = params_.size();
  const std::int64_t t = t_;
  out.write(reinterpret_cast<const char*>(&t), sizeof t);
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::uint64_t len = m_[i].size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(reinterpret_cast<const char*>(m_[i].data()),
              static_cast<std::streamsize>(len * sizeof(double)));
    out.write(reinterpret_cast<const char*>(v_[i].data()),
              static_cast<std::streamsize>(len * sizeof(double)));
  }
}

void AdamW::load_state(std::istream& in) {
  std::int64_t t = 0;
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&t), sizeof t);
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || n != params_.size())
    throw std::runtime_error("AdamW: state does not match parameter list");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len != static_cast<std::uint64_t>(m_[i].size()))
      throw std::runtime_error("AdamW: state tensor size mismatch");
    in.read(reinterpret_cast<char*>(m_[i].data()),
            static_cast<std::streamsize>(len * sizeof(double)));
    in.read(reinterpret_cast<char*>(v_[i].data()),
            static_cast<std::streamsize>(len * sizeof(double)));
  }
  if (!in) throw std::runtime_error("AdamW: truncated state");
  t_ = t;
}

}  // namespace regseg::nn
