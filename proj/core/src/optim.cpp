#include "hulm/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace hulm {

void Adam::step(const std::vector<std::pair<Matrix*, const Matrix*>>& params_and_grads) {
  if (m_.empty()) {
    for (const auto& [p, g] : params_and_grads) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (m_.size() != params_and_grads.size()) throw std::logic_error("Adam parameter list changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_and_grads.size(); ++i) {
    auto& [p, g] = params_and_grads[i];
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * *g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g->cwiseProduct(*g);
    p->array() -= config_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.epsilon);
  }
}

}  // namespace hulm
