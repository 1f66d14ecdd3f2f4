#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fmg/sparse.hpp"

namespace fmg::latent {

using Index = sparse::Index;

// Observed entries of an m x n matrix; the mask is the set of entry positions.
struct ObservedMatrix {
    Index rows = 0;
    Index cols = 0;
    std::vector<sparse::Triplet> entries;

    // Observations are exactly the stored nonzeros of the similarity matrix.
    static ObservedMatrix from_similarity(const sparse::CsrMatrix& sim);
    static ObservedMatrix from_dense(const Eigen::MatrixXd& dense);  // every cell observed

    std::size_t size() const { return entries.size(); }
};

struct FactorPair {
    Eigen::MatrixXd U;  // m x F
    Eigen::MatrixXd B;  // n x F
    std::string metagraph;
    std::string method;  // "mf" or "nnr"

    Index rank() const { return U.cols(); }
};

// ---- regularized matrix factorization --------------------------------------

struct MfOptions {
    Index rank = 10;
    double mu = 0.01;
    double tol = 1e-5;  // relative objective change
    int max_iter = 2000;
    std::uint64_t seed = 0;
    double armijo = 1e-4;
    double initial_step = 1.0;
};

struct MfResult {
    FactorPair factors;
    std::vector<double> objective_history;  // index 0 is the initial point
    int iterations = 0;
};

// 1/2 ||P_Omega(U B^T - R)||^2 + mu/2 (||U||^2 + ||B||^2)
double mf_objective(const ObservedMatrix& r, const Eigen::MatrixXd& U, const Eigen::MatrixXd& B, double mu);
void mf_gradient(const ObservedMatrix& r, const Eigen::MatrixXd& U, const Eigen::MatrixXd& B, double mu,
                 Eigen::MatrixXd& grad_u, Eigen::MatrixXd& grad_b);

// Full-batch gradient descent with backtracking. Rows and columns with no
// observation get zero factors.
MfResult factorize_mf(const ObservedMatrix& r, const MfOptions& opts);

// ---- nuclear-norm regularized completion ------------------------------------

// Singular value thresholding: prox of tau * ||.||_* at X.
Eigen::MatrixXd svt(const Eigen::MatrixXd& X, double tau);

struct NnrOptions {
    double mu = 0.01;
    Index max_rank = 10;  // cap on emitted feature width; 0 disables
    double tol = 1e-5;
    int max_iter = 500;
    Index oversampling = 10;
    int power_iters = 2;
    Index initial_rank = 5;
    std::uint64_t seed = 0;
};

// X = P diag(sigma) Q^T, sigma strictly positive and nonincreasing.
struct NnrState {
    Eigen::MatrixXd P;
    Eigen::VectorXd sigma;
    Eigen::MatrixXd Q;
    double mu = 0.0;
    std::vector<double> objective_history;

    Index rank() const { return sigma.size(); }
    Eigen::MatrixXd dense() const;
};

struct NnrResult {
    FactorPair factors;
    NnrState state;
    Index uncapped_rank = 0;
    int iterations = 0;
    int restarts = 0;
};

// 1/2 ||P_Omega(X - R)||^2 + mu ||X||_*
double nnr_objective(const ObservedMatrix& r, const NnrState& x);

// Accelerated proximal gradient with svt as the prox and a restart whenever
// the objective goes up. Throws ConvergenceError if every singular value is
// thresholded away.
NnrResult factorize_nnr(const ObservedMatrix& r, const NnrOptions& opts);

// ---- persistence --------------------------------------------------------------

// Writes <stem>.U.txt and <stem>.B.txt. Values round-trip exactly.
void write_factors(const std::filesystem::path& stem, const FactorPair& f);
FactorPair read_factors(const std::filesystem::path& stem);

}  // namespace fmg::latent
