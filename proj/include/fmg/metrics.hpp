#pragma once

#include <span>

#include <Eigen/Dense>

#include "fmg/model.hpp"

namespace fmg::metrics {

// sqrt(sum (y - yhat)^2 / n)
double rmse(std::span<const double> predictions, std::span<const double> labels);
double rmse(const Eigen::VectorXd& predictions, const Eigen::VectorXd& labels);

// Entries of w and V with |v| > tol over d + d*K; the bias is not counted.
double nnz_ratio(const model::FmParams& p, double tol = 1e-10);

}  // namespace fmg::metrics
