#include "fmg/metrics.hpp"

#include <cmath>

#include "fmg/error.hpp"

namespace fmg::metrics {

double rmse(std::span<const double> predictions, std::span<const double> labels) {
    if (predictions.size() != labels.size()) throw ArgumentError("rmse: prediction and label counts differ");
    if (predictions.empty()) throw ArgumentError("rmse of an empty set");
    double sum = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double e = labels[i] - predictions[i];
        sum += e * e;
    }
    return std::sqrt(sum / static_cast<double>(predictions.size()));
}

double rmse(const Eigen::VectorXd& predictions, const Eigen::VectorXd& labels) {
    return rmse(std::span<const double>(predictions.data(), static_cast<std::size_t>(predictions.size())),
                std::span<const double>(labels.data(), static_cast<std::size_t>(labels.size())));
}

double nnz_ratio(const model::FmParams& p, double tol) {
    const auto total = static_cast<double>(p.w.size() + p.V.size());
    if (total == 0) return 0.0;
    const auto nz = (p.w.array().abs() > tol).count() + (p.V.array().abs() > tol).count();
    return static_cast<double>(nz) / total;
}

}  // namespace fmg::metrics
