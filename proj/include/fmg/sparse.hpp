#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace fmg::sparse {

using Index = std::int64_t;

struct Triplet {
    Index row = 0;
    Index col = 0;
    double value = 0.0;
};

// Row-compressed sparse matrix with sorted, unique column indices per row.
class CsrMatrix {
public:
    CsrMatrix() : row_ptr_(1, 0) {}
    CsrMatrix(Index rows, Index cols);

    // Duplicate (row, col) entries are summed. Explicit zeros are kept only
    // if keep_zeros is set.
    static CsrMatrix from_triplets(Index rows, Index cols, std::span<const Triplet> triplets,
                                   bool keep_zeros = false);
    static CsrMatrix from_dense(const Eigen::MatrixXd& dense);

    Index rows() const { return rows_; }
    Index cols() const { return cols_; }
    std::size_t nnz() const { return col_idx_.size(); }

    const std::vector<std::size_t>& row_ptr() const { return row_ptr_; }
    const std::vector<Index>& col_idx() const { return col_idx_; }
    const std::vector<double>& values() const { return values_; }

    // Value at (row, col); zero when not stored. O(log row_nnz).
    double at(Index row, Index col) const;

    CsrMatrix transpose() const;

    // Gustavson row-by-row product. Throws ResourceError when the result would
    // hold more than nnz_budget entries.
    CsrMatrix multiply(const CsrMatrix& rhs, std::size_t nnz_budget = SIZE_MAX) const;

    // Element-wise product; shapes must match.
    CsrMatrix hadamard(const CsrMatrix& rhs) const;

    // Drops entries whose magnitude is <= floor (floor = 0 drops exact zeros).
    CsrMatrix pruned(double floor) const;

    template <typename F>
    CsrMatrix map_values(F&& fn) const {
        CsrMatrix out = *this;
        for (double& v : out.values_) v = fn(v);
        return out;
    }

    // Fails with ResourceError when nnz exceeds nnz_budget.
    Eigen::MatrixXd to_dense(std::size_t nnz_budget = SIZE_MAX) const;
    std::vector<Triplet> to_triplets() const;

    bool operator==(const CsrMatrix& other) const = default;

private:
    Index rows_ = 0;
    Index cols_ = 0;
    std::vector<std::size_t> row_ptr_;
    std::vector<Index> col_idx_;
    std::vector<double> values_;
};

}  // namespace fmg::sparse
