#pragma once

#include <functional>
#include <random>

#include "fmg/model.hpp"

namespace fmg::testing {

// Literal double sum over feature pairs, O(d^2 K).
double literal_predict(const model::FmParams& p, const Eigen::VectorXd& x);

// (1/N) sum (y - literal_predict)^2 + g, with g summed group by group from
// the layout ranges. Shares no code with the library objective.
double literal_augmented_loss(const model::FmParams& p, const model::RegConfig& cfg, const model::GroupLayout& layout,
                              const model::RowMatrix& X, const Eigen::VectorXd& y);

// Central differences of f over every parameter (b, w, V).
model::FmParams finite_difference(const std::function<double(const model::FmParams&)>& f, const model::FmParams& p,
                                  double eps);

double relative_error(const model::FmParams& a, const model::FmParams& b);

// Numerical argmin of 1/2||x - z||^2 + tau ||x||_2: damped Newton on a smoothed
// norm from a random start, then compared against the origin.
Eigen::VectorXd numeric_group_prox(const Eigen::VectorXd& z, double tau, std::mt19937_64& rng);

struct RandomFmInstance {
    model::GroupLayout layout;
    model::FmParams params;
    model::RegConfig reg;
    model::RowMatrix X;
    Eigen::VectorXd y;
};

// Layout with 1..max_metagraphs metagraphs whose total width stays <= max_d.
// zero_group_prob zeroes whole w/V blocks to exercise the t = 0 branch.
RandomFmInstance random_fm_instance(std::mt19937_64& rng, model::RegMode mode, model::Index max_d, model::Index max_k,
                                    model::Index n, double zero_group_prob = 0.0);

}  // namespace fmg::testing
