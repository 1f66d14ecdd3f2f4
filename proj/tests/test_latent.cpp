#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <random>
#include <set>

#include <Eigen/Eigenvalues>
#include <Eigen/Sparse>

#include "fmg/error.hpp"
#include "fmg/latent.hpp"

using namespace fmg;
using namespace fmg::latent;

namespace {

Eigen::MatrixXd random_matrix(std::mt19937_64& rng, Index rows, Index cols) {
    std::normal_distribution<double> nd;
    Eigen::MatrixXd m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = nd(rng);
    return m;
}

ObservedMatrix random_mask(std::mt19937_64& rng, const Eigen::MatrixXd& full, double fraction) {
    std::bernoulli_distribution keep(fraction);
    ObservedMatrix r{full.rows(), full.cols(), {}};
    for (Index i = 0; i < full.rows(); ++i)
        for (Index j = 0; j < full.cols(); ++j)
            if (keep(rng)) r.entries.push_back({i, j, full(i, j)});
    return r;
}

// Prox of tau*||.||_* from the eigen-decomposition of X^T X, independent of
// the SVD path: Z = X V diag(max(s - tau, 0) / s) V^T.
Eigen::MatrixXd svt_by_eigen(const Eigen::MatrixXd& X, double tau) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X.transpose() * X);
    const Eigen::VectorXd s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Eigen::VectorXd scale(s.size());
    for (Index i = 0; i < s.size(); ++i) scale[i] = s[i] > 1e-14 ? std::max(s[i] - tau, 0.0) / s[i] : 0.0;
    return X * es.eigenvectors() * scale.asDiagonal() * es.eigenvectors().transpose();
}

double nuclear_norm(const Eigen::MatrixXd& X) {
    return Eigen::JacobiSVD<Eigen::MatrixXd>(X).singularValues().sum();
}

Index numerical_rank(const Eigen::MatrixXd& X, double rel = 1e-6) {
    const Eigen::VectorXd s = Eigen::JacobiSVD<Eigen::MatrixXd>(X).singularValues();
    Index r = 0;
    while (r < s.size() && s[r] > rel * s[0]) ++r;
    return r;
}

double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).norm() / b.norm(); }

}  // namespace

TEST_CASE("MF recovers a fully observed rank-1 matrix") {
    Eigen::MatrixXd r(2, 2);
    r << 2, 4, 1, 2;
    MfOptions opts;
    opts.rank = 1;
    opts.mu = 1e-6;
    const auto res = factorize_mf(ObservedMatrix::from_dense(r), opts);
    CHECK(rel_err(res.factors.U * res.factors.B.transpose(), r) <= 1e-2);
    CHECK(res.objective_history.back() <= res.objective_history.front());
    CHECK(res.factors.method == "mf");
}

TEST_CASE("MF on all-zero observations shrinks factors to zero") {
    MfOptions opts;
    opts.rank = 2;
    opts.mu = 0.1;
    const auto res = factorize_mf(ObservedMatrix::from_dense(Eigen::MatrixXd::Zero(4, 5)), opts);
    CHECK(res.factors.U.norm() <= 1e-3);
    CHECK(res.factors.B.norm() <= 1e-3);
}

TEST_CASE("MF argument errors") {
    const auto r = ObservedMatrix::from_dense(Eigen::MatrixXd::Ones(4, 4));
    MfOptions opts;
    opts.rank = 0;
    CHECK_THROWS_AS(factorize_mf(r, opts), ArgumentError);
    opts.rank = 3;
    CHECK_THROWS_AS(factorize_mf(r, opts), ArgumentError);
    opts.rank = 2;
    CHECK_THROWS_AS(factorize_mf(ObservedMatrix{4, 4, {}}, opts), ArgumentError);
}

TEST_CASE("MF objective is nonincreasing and unobserved rows stay zero") {
    std::mt19937_64 rng(3);
    const Eigen::MatrixXd full = random_matrix(rng, 12, 9);
    auto r = random_mask(rng, full, 0.5);
    std::erase_if(r.entries, [](const sparse::Triplet& t) { return t.row == 4 || t.col == 2; });
    MfOptions opts;
    opts.rank = 3;
    opts.mu = 0.05;
    const auto res = factorize_mf(r, opts);
    for (std::size_t i = 1; i < res.objective_history.size(); ++i)
        CHECK(res.objective_history[i] <= res.objective_history[i - 1]);
    CHECK(res.factors.U.row(4).norm() == 0.0);
    CHECK(res.factors.B.row(2).norm() == 0.0);
    CHECK(mf_objective(r, res.factors.U, res.factors.B, opts.mu) ==
          doctest::Approx(res.objective_history.back()).epsilon(1e-12));
}

TEST_CASE("MF gradient matches central finite differences (property)") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const Eigen::MatrixXd full = random_matrix(rng, 6, 5);
        const auto r = random_mask(rng, full, 0.6);
        if (r.entries.empty()) continue;
        const Eigen::MatrixXd U = random_matrix(rng, 6, 2);
        const Eigen::MatrixXd B = random_matrix(rng, 5, 2);
        const double mu = 0.3;
        Eigen::MatrixXd gu, gb;
        mf_gradient(r, U, B, mu, gu, gb);
        const double eps = 1e-6;
        Eigen::MatrixXd fu(U.rows(), U.cols()), fb(B.rows(), B.cols());
        for (Index i = 0; i < U.size(); ++i) {
            Eigen::MatrixXd up = U, dn = U;
            up.data()[i] += eps;
            dn.data()[i] -= eps;
            fu.data()[i] = (mf_objective(r, up, B, mu) - mf_objective(r, dn, B, mu)) / (2 * eps);
        }
        for (Index i = 0; i < B.size(); ++i) {
            Eigen::MatrixXd up = B, dn = B;
            up.data()[i] += eps;
            dn.data()[i] -= eps;
            fb.data()[i] = (mf_objective(r, U, up, mu) - mf_objective(r, U, dn, mu)) / (2 * eps);
        }
        CHECK(rel_err(gu, fu) <= 1e-5);
        CHECK(rel_err(gb, fb) <= 1e-5);
    }
}

TEST_CASE("svt examples") {
    std::mt19937_64 rng(1);
    const Eigen::MatrixXd X = random_matrix(rng, 4, 3);
    CHECK((svt(X, 0.0) - X).norm() <= 1e-12 * X.norm());
    const double smax = Eigen::JacobiSVD<Eigen::MatrixXd>(X).singularValues()[0];
    CHECK(svt(X, smax).norm() <= 1e-12);
    CHECK(svt(X, smax * 2).norm() == 0.0);

    Eigen::MatrixXd d = Eigen::Vector2d(3, 1).asDiagonal();
    Eigen::MatrixXd expect = Eigen::Vector2d(1, 0).asDiagonal();
    CHECK((svt(d, 2.0) - expect).norm() <= 1e-12);
    CHECK_THROWS_AS(svt(d, -1.0), ArgumentError);
}

TEST_CASE("svt agrees with an independent minimizer on random 3x3 matrices (property)") {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> tau_dist(0.0, 2.0);
    for (int trial = 0; trial < 200; ++trial) {
        const Eigen::MatrixXd X = random_matrix(rng, 3, 3);
        const double tau = tau_dist(rng);
        const Eigen::MatrixXd z = svt(X, tau);
        CHECK((z - svt_by_eigen(X, tau)).norm() <= 1e-8);

        // And it is no worse than nearby points for 1/2||Z - X||^2 + tau ||Z||_*.
        auto obj = [&](const Eigen::MatrixXd& y) { return 0.5 * (y - X).squaredNorm() + tau * nuclear_norm(y); };
        const double best = obj(z);
        for (int p = 0; p < 5; ++p) CHECK(best <= obj(z + 1e-3 * random_matrix(rng, 3, 3)) + 1e-12);
    }
}

TEST_CASE("NNR recovers a planted rank-2 5x5 matrix") {
    std::mt19937_64 rng(8);
    const Eigen::MatrixXd x = random_matrix(rng, 5, 2) * random_matrix(rng, 2, 5);
    NnrOptions opts;
    opts.mu = 1e-3;
    const auto res = factorize_nnr(ObservedMatrix::from_dense(x), opts);
    CHECK(rel_err(res.state.dense(), x) <= 1e-2);
    CHECK(res.state.rank() == 2);
    CHECK(res.factors.rank() == 2);
    CHECK(res.factors.method == "nnr");
    const Eigen::MatrixXd xf = res.state.dense();
    CHECK((res.factors.U * res.factors.B.transpose() - xf).norm() <= 1e-10 * xf.norm());
}

TEST_CASE("NNR errors") {
    const auto r = ObservedMatrix::from_dense(Eigen::MatrixXd::Ones(4, 4));
    NnrOptions opts;
    opts.mu = 0.0;
    CHECK_THROWS_AS(factorize_nnr(r, opts), ArgumentError);
    opts.mu = -1.0;
    CHECK_THROWS_AS(factorize_nnr(r, opts), ArgumentError);
    opts.mu = 100.0;  // sigma_max of the all-ones 4x4 is 4
    CHECK_THROWS_AS(factorize_nnr(r, opts), ConvergenceError);
    opts.mu = 0.1;
    CHECK_THROWS_AS(factorize_nnr(ObservedMatrix{4, 4, {}}, opts), ArgumentError);
}

TEST_CASE("NNR on partial observations: monotone objective, exact split, invariants") {
    std::mt19937_64 rng(21);
    const Eigen::MatrixXd x = random_matrix(rng, 30, 3) * random_matrix(rng, 3, 25);
    const auto r = random_mask(rng, x, 0.5);
    NnrOptions opts;
    opts.mu = 0.5;
    opts.max_rank = 0;
    const auto res = factorize_nnr(r, opts);
    const auto& hist = res.state.objective_history;
    REQUIRE(hist.size() >= 2);
    for (std::size_t i = 1; i < hist.size(); ++i) CHECK(hist[i] <= hist[i - 1]);
    CHECK(nnr_objective(r, res.state) == doctest::Approx(hist.back()).epsilon(1e-12));
    for (Index i = 0; i < res.state.sigma.size(); ++i) {
        CHECK(res.state.sigma[i] > 0.0);
        if (i > 0) CHECK(res.state.sigma[i] <= res.state.sigma[i - 1]);
    }
    // Emitted rank is capped at min(m,n)/2 even when the user cap is off.
    CHECK(res.factors.rank() == std::min<Index>(res.state.rank(), 12));
    if (res.state.rank() <= 12) {
        const Eigen::MatrixXd xf = res.state.dense();
        CHECK((res.factors.U * res.factors.B.transpose() - xf).norm() <= 1e-10 * xf.norm());
    }
    CHECK(rel_err(res.state.dense(), x) <= 0.5);
}

TEST_CASE("NNR rank cap keeps the leading singular directions") {
    std::mt19937_64 rng(4);
    const Eigen::MatrixXd x = random_matrix(rng, 20, 6) * random_matrix(rng, 6, 20);
    NnrOptions opts;
    opts.mu = 1e-3;
    opts.max_rank = 4;
    const auto res = factorize_nnr(ObservedMatrix::from_dense(x), opts);
    CHECK(res.uncapped_rank == 6);
    CHECK(res.factors.rank() == 4);
}

TEST_CASE("NNR recovered rank is at least MF's effective rank at matched accuracy") {
    // Measurement on planted instances; asserted only in direction.
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 3; ++trial) {
        const Eigen::MatrixXd x = random_matrix(rng, 24, 3) * random_matrix(rng, 3, 20);
        const auto r = random_mask(rng, x, 0.6);
        MfOptions mf;
        mf.rank = 3;
        mf.mu = 1e-3;
        mf.seed = static_cast<std::uint64_t>(trial);
        const auto m = factorize_mf(r, mf);
        NnrOptions nn;
        nn.mu = 0.05;
        nn.max_rank = 0;
        const auto n = factorize_nnr(r, nn);
        const Index mf_rank = numerical_rank(m.factors.U * m.factors.B.transpose());
        MESSAGE("trial " << trial << ": mf effective rank " << mf_rank << ", nnr rank " << n.uncapped_rank
                         << ", mf err " << rel_err(m.factors.U * m.factors.B.transpose(), x) << ", nnr err "
                         << rel_err(n.state.dense(), x));
        CHECK(n.uncapped_rank >= mf_rank);
    }
}

TEST_CASE("per-iteration cost grows at most linearly in observed entries") {
    const Index m = 4000, n = 4000;
    // All observed values equal: the sampling noise in P_Omega(R) stays well
    // below mu, so the iterates remain rank one at both sizes.
    auto build = [&](std::size_t count, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<Index> ri(0, m - 1), ci(0, n - 1);
        std::set<std::pair<Index, Index>> seen;
        ObservedMatrix r{m, n, {}};
        while (r.entries.size() < count) {
            const Index i = ri(rng), j = ci(rng);
            if (seen.insert({i, j}).second) r.entries.push_back({i, j, 1.0});
        }
        return r;
    };
    // Top singular value of P_Omega(R) by power iteration.
    auto sigma_max = [](const ObservedMatrix& r) {
        Eigen::SparseMatrix<double> s(r.rows, r.cols);
        std::vector<Eigen::Triplet<double>> t;
        for (const auto& e : r.entries) t.emplace_back(static_cast<int>(e.row), static_cast<int>(e.col), e.value);
        s.setFromTriplets(t.begin(), t.end());
        Eigen::VectorXd x = Eigen::VectorXd::Ones(r.cols);
        double sv = 0;
        for (int it = 0; it < 100; ++it) {
            x = s.transpose() * (s * x);
            sv = std::sqrt(x.norm());
            x.normalize();
        }
        return sv;
    };
    const auto small = build(150000, 1);
    const auto large = build(300000, 2);
    // Marginal cost of extra iterations, so one-time setup is excluded.
    auto marginal = [](auto&& run) {
        const auto t0 = std::chrono::steady_clock::now();
        const int short_iters = run(2);
        const auto t1 = std::chrono::steady_clock::now();
        const int long_iters = run(8);
        const auto t2 = std::chrono::steady_clock::now();
        REQUIRE(long_iters > short_iters);
        const double dt = std::chrono::duration<double>((t2 - t1) - (t1 - t0)).count();
        return dt / (long_iters - short_iters);
    };
    auto per_iter_mf = [&](const ObservedMatrix& r) {
        return marginal([&](int iters) {
            MfOptions opts;
            opts.rank = 10;
            opts.tol = 0.0;
            opts.max_iter = iters;
            return factorize_mf(r, opts).iterations;
        });
    };
    auto per_iter_nnr = [&](const ObservedMatrix& r) {
        const double mu = 0.5 * sigma_max(r);
        return marginal([&](int iters) {
            NnrOptions opts;
            opts.mu = mu;
            opts.tol = 0.0;
            opts.max_iter = iters;
            const auto res = factorize_nnr(r, opts);
            REQUIRE(res.uncapped_rank == 1);
            return res.iterations;
        });
    };
    const double mf_ratio = per_iter_mf(large) / per_iter_mf(small);
    const double nnr_ratio = per_iter_nnr(large) / per_iter_nnr(small);
    MESSAGE("per-iteration time ratio for 2x observations: mf " << mf_ratio << ", nnr " << nnr_ratio);
    CHECK(mf_ratio <= 3.0);
    CHECK(nnr_ratio <= 3.0);
}

TEST_CASE("factor files round-trip exactly") {
    std::mt19937_64 rng(2);
    FactorPair f{random_matrix(rng, 7, 3), random_matrix(rng, 5, 3), "M3", "nnr"};
    const auto stem = std::filesystem::temp_directory_path() / "fmg_factor_roundtrip";
    write_factors(stem, f);
    const auto back = read_factors(stem);
    CHECK(back.U == f.U);
    CHECK(back.B == f.B);
    CHECK(back.metagraph == "M3");
    CHECK(back.method == "nnr");
    std::filesystem::remove(stem.string() + ".U.txt");
    std::filesystem::remove(stem.string() + ".B.txt");
}
