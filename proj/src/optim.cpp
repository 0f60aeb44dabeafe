#include "ikdmil/optim.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "ikdmil/common.hpp"

namespace ikdmil {

void AdamConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0,1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0,1)");
  if (!(epsilon > 0.0)) throw ConfigError("optimizer epsilon must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
}

Adam::Adam(const AdamConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

void Adam::step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
  if (params.size() != grads.size()) {
    throw PreconditionError("optimizer got " + std::to_string(params.size()) +
                            " parameters but " + std::to_string(grads.size()) + " gradients");
  }
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->size(), 0.0f);
      v_[i].assign(params[i]->size(), 0.0f);
    }
  } else if (m_.size() != params.size()) {
    throw PreconditionError("optimizer state tracks " + std::to_string(m_.size()) +
                            " slots but step received " + std::to_string(params.size()));
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (p.size() != g.size() || p.size() != m_[i].size()) {
      throw PreconditionError("optimizer slot " + std::to_string(i) +
                              " changed size between steps");
    }
    for (size_t k = 0; k < p.size(); ++k) {
      const double grad = double(g[k]) + cfg_.weight_decay * double(p[k]);
      const double m = cfg_.beta1 * double(m_[i][k]) + (1.0 - cfg_.beta1) * grad;
      const double v = cfg_.beta2 * double(v_[i][k]) + (1.0 - cfg_.beta2) * grad * grad;
      m_[i][k] = static_cast<float>(m);
      v_[i][k] = static_cast<float>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.epsilon);
      p[k] = static_cast<float>(double(p[k]) - cfg_.learning_rate * update);
    }
  }
}

void Adam::reset() {
  step_ = 0;
  m_.clear();
  v_.clear();
}

namespace {
constexpr char kOptMagic[8] = {'I', 'K', 'D', 'M', 'I', 'L', 'A', 'D'};
}

void Adam::serialize(std::ostream& out) const {
  out.write(kOptMagic, sizeof(kOptMagic));
  const uint64_t step = static_cast<uint64_t>(step_);
  out.write(reinterpret_cast<const char*>(&step), sizeof(step));
  const uint64_t slots = m_.size();
  out.write(reinterpret_cast<const char*>(&slots), sizeof(slots));
  for (size_t i = 0; i < m_.size(); ++i) {
    const uint64_t n = m_[i].size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(reinterpret_cast<const char*>(m_[i].data()),
              static_cast<std::streamsize>(n * sizeof(float)));
    out.write(reinterpret_cast<const char*>(v_[i].data()),
              static_cast<std::streamsize>(n * sizeof(float)));
  }
  if (!out.good()) throw IoError("failed while writing optimizer state");
}

void Adam::deserialize(std::istream& in) {
  char magic[sizeof(kOptMagic)] = {};
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kOptMagic, sizeof(magic)) != 0) {
    throw IoError("stream does not hold optimizer state (bad magic)");
  }
  uint64_t step = 0, slots = 0;
  if (!in.read(reinterpret_cast<char*>(&step), sizeof(step)) ||
      !in.read(reinterpret_cast<char*>(&slots), sizeof(slots))) {
    throw IoError("optimizer state truncated");
  }
  if (slots > (1u << 16)) throw IoError("implausible optimizer slot count");
  step_ = static_cast<int64_t>(step);
  m_.assign(slots, {});
  v_.assign(slots, {});
  for (size_t i = 0; i < slots; ++i) {
    uint64_t n = 0;
    if (!in.read(reinterpret_cast<char*>(&n), sizeof(n))) {
      throw IoError("optimizer state truncated");
    }
    m_[i].resize(n);
    v_[i].resize(n);
    if (!in.read(reinterpret_cast<char*>(m_[i].data()),
                 static_cast<std::streamsize>(n * sizeof(float))) ||
        !in.read(reinterpret_cast<char*>(v_[i].data()),
                 static_cast<std::streamsize>(n * sizeof(float)))) {
      throw IoError("optimizer state truncated");
    }
  }
}

}  // namespace ikdmil
