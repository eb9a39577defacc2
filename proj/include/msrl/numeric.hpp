#pragma once

#include <Eigen/Dense>

namespace msrl {

// Numerically stable log-softmax of a logit vector expression.
template <typename Derived>
Eigen::VectorXd log_softmax(const Eigen::MatrixBase<Derived>& logits) {
  const Eigen::VectorXd z = logits;
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return z.array() - lse;
}

template <typename Derived>
Eigen::VectorXd softmax(const Eigen::MatrixBase<Derived>& logits) {
  return log_softmax(logits).array().exp();
}

// KL(p || q) between two categorical distributions given by logit vectors.
// Computed from log-softmax so identical logits give exactly zero.
template <typename DerivedP, typename DerivedQ>
double categorical_kl_from_logits(const Eigen::MatrixBase<DerivedP>& logits_p,
                                  const Eigen::MatrixBase<DerivedQ>& logits_q) {
  const Eigen::VectorXd lp = log_softmax(logits_p);
  const Eigen::VectorXd lq = log_softmax(logits_q);
  const Eigen::VectorXd p = lp.array().exp();
  return (p.array() * (lp - lq).array()).sum();
}

inline double sigmoid(double z) {
  if (z >= 0.0) {
    return 1.0 / (1.0 + std::exp(-z));
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// -log(sigmoid(z)) without catastrophic cancellation.
inline double neg_log_sigmoid(double z) {
  if (z >= 0.0) {
    return std::log1p(std::exp(-z));
  }
  return -z + std::log1p(std::exp(z));
}

}  // namespace msrl
