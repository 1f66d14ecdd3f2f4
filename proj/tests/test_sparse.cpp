#include <doctest.h>

#include <random>

#include "fmg/error.hpp"
#include "fmg/sparse.hpp"

using fmg::sparse::CsrMatrix;
using fmg::sparse::Triplet;

namespace {

Eigen::MatrixXd random_sparse_dense(std::mt19937_64& rng, int rows, int cols, double density) {
    std::bernoulli_distribution keep(density);
    std::uniform_int_distribution<int> value(1, 4);
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            if (keep(rng)) m(r, c) = value(rng);
    return m;
}

}  // namespace

TEST_CASE("from_triplets sums duplicates and drops zeros") {
    const std::vector<Triplet> t{{1, 2, 1.0}, {0, 0, 2.0}, {1, 2, 3.0}, {0, 1, 0.0}};
    const auto m = CsrMatrix::from_triplets(2, 3, t);
    CHECK(m.nnz() == 2);
    CHECK(m.at(1, 2) == 4.0);
    CHECK(m.at(0, 0) == 2.0);
    CHECK(m.at(0, 1) == 0.0);
    CHECK_THROWS_AS(CsrMatrix::from_triplets(2, 3, std::vector<Triplet>{{2, 0, 1.0}}), fmg::ArgumentError);
}

TEST_CASE("products agree with dense Eigen arithmetic") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const auto a = random_sparse_dense(rng, 7, 5, 0.3);
        const auto b = random_sparse_dense(rng, 5, 6, 0.3);
        const auto c = random_sparse_dense(rng, 7, 6, 0.5);
        const auto sa = CsrMatrix::from_dense(a);
        const auto sb = CsrMatrix::from_dense(b);
        const auto sc = CsrMatrix::from_dense(c);
        CHECK(sa.multiply(sb).to_dense() == a * b);
        CHECK(sa.transpose().to_dense() == a.transpose());
        CHECK(sa.multiply(sb).hadamard(sc).to_dense() == (a * b).cwiseProduct(c));
    }
}

TEST_CASE("shape and budget errors") {
    const CsrMatrix a(2, 3), b(2, 3);
    CHECK_THROWS_AS(a.multiply(b), fmg::ArgumentError);
    CHECK_THROWS_AS(a.hadamard(CsrMatrix(3, 2)), fmg::ArgumentError);
    const auto full = CsrMatrix::from_dense(Eigen::MatrixXd::Ones(4, 4));
    CHECK_THROWS_AS(full.multiply(full, 8), fmg::ResourceError);
    CHECK_THROWS_AS(full.to_dense(15), fmg::ResourceError);
    CHECK(full.to_dense(16).sum() == 16.0);
}

TEST_CASE("pruned keeps entries strictly above the floor") {
    Eigen::MatrixXd d(1, 3);
    d << 0.5, 1.0, 2.0;
    const auto m = CsrMatrix::from_dense(d).pruned(1.0);
    CHECK(m.nnz() == 1);
    CHECK(m.at(0, 2) == 2.0);
}
