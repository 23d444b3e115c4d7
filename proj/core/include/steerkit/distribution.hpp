#pragma once

#include <Eigen/Core>
#include <string>

namespace steerkit {

/// Next-token probability vector plus a tag saying which pass produced it.
struct TokenDistribution {
  Eigen::VectorXd probs;
  // "baseline" or "intervened:<feature>:<alpha>"
  std::string source = "baseline";

  Eigen::Index vocab() const { return probs.size(); }
  void validate(double tol = 1e-9) const;
};

}  // namespace steerkit
