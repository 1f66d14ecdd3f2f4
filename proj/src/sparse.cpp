#include "fmg/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fmg/error.hpp"

namespace fmg::sparse {

CsrMatrix::CsrMatrix(Index rows, Index cols)
    : rows_(rows), cols_(cols), row_ptr_(static_cast<std::size_t>(rows) + 1, 0) {
    if (rows < 0 || cols < 0) throw ArgumentError("negative matrix dimension");
}

CsrMatrix CsrMatrix::from_triplets(Index rows, Index cols, std::span<const Triplet> triplets,
                                   bool keep_zeros) {
    CsrMatrix m(rows, cols);
    std::vector<Triplet> sorted(triplets.begin(), triplets.end());
    for (const auto& t : sorted) {
        if (t.row < 0 || t.row >= rows || t.col < 0 || t.col >= cols)
            throw ArgumentError("triplet (" + std::to_string(t.row) + ", " + std::to_string(t.col) +
                                ") outside " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    std::stable_sort(sorted.begin(), sorted.end(), [](const Triplet& a, const Triplet& b) {
        return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
    m.col_idx_.reserve(sorted.size());
    m.values_.reserve(sorted.size());
    std::size_t i = 0;
    while (i < sorted.size()) {
        const Index r = sorted[i].row;
        const Index c = sorted[i].col;
        double sum = 0.0;
        while (i < sorted.size() && sorted[i].row == r && sorted[i].col == c) sum += sorted[i++].value;
        if (sum == 0.0 && !keep_zeros) continue;
        m.col_idx_.push_back(c);
        m.values_.push_back(sum);
        ++m.row_ptr_[static_cast<std::size_t>(r) + 1];
    }
    std::partial_sum(m.row_ptr_.begin(), m.row_ptr_.end(), m.row_ptr_.begin());
    return m;
}

CsrMatrix CsrMatrix::from_dense(const Eigen::MatrixXd& dense) {
    CsrMatrix m(dense.rows(), dense.cols());
    for (Index r = 0; r < dense.rows(); ++r) {
        for (Index c = 0; c < dense.cols(); ++c) {
            if (dense(r, c) != 0.0) {
                m.col_idx_.push_back(c);
                m.values_.push_back(dense(r, c));
            }
        }
        m.row_ptr_[static_cast<std::size_t>(r) + 1] = m.col_idx_.size();
    }
    return m;
}

double CsrMatrix::at(Index row, Index col) const {
    const auto begin = col_idx_.begin() + static_cast<std::ptrdiff_t>(row_ptr_[row]);
    const auto end = col_idx_.begin() + static_cast<std::ptrdiff_t>(row_ptr_[row + 1]);
    const auto it = std::lower_bound(begin, end, col);
    if (it == end || *it != col) return 0.0;
    return values_[static_cast<std::size_t>(it - col_idx_.begin())];
}

CsrMatrix CsrMatrix::transpose() const {
    CsrMatrix t(cols_, rows_);
    t.col_idx_.resize(nnz());
    t.values_.resize(nnz());
    for (Index c : col_idx_) ++t.row_ptr_[static_cast<std::size_t>(c) + 1];
    std::partial_sum(t.row_ptr_.begin(), t.row_ptr_.end(), t.row_ptr_.begin());
    std::vector<std::size_t> cursor(t.row_ptr_.begin(), t.row_ptr_.end() - 1);
    // Rows are visited in order, so each transposed row comes out sorted.
    for (Index r = 0; r < rows_; ++r) {
        for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
            const std::size_t dst = cursor[static_cast<std::size_t>(col_idx_[k])]++;
            t.col_idx_[dst] = r;
            t.values_[dst] = values_[k];
        }
    }
    return t;
}

CsrMatrix CsrMatrix::multiply(const CsrMatrix& rhs, std::size_t nnz_budget) const {
    if (cols_ != rhs.rows_)
        throw ArgumentError("multiply: inner dimensions differ (" + std::to_string(cols_) + " vs " +
                            std::to_string(rhs.rows_) + ")");
    CsrMatrix out(rows_, rhs.cols_);
    std::vector<double> accum(static_cast<std::size_t>(rhs.cols_), 0.0);
    std::vector<char> occupied(static_cast<std::size_t>(rhs.cols_), 0);
    std::vector<Index> touched;
    for (Index r = 0; r < rows_; ++r) {
        touched.clear();
        for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
            const Index mid = col_idx_[k];
            const double a = values_[k];
            for (std::size_t q = rhs.row_ptr_[mid]; q < rhs.row_ptr_[mid + 1]; ++q) {
                const auto c = static_cast<std::size_t>(rhs.col_idx_[q]);
                if (!occupied[c]) {
                    occupied[c] = 1;
                    touched.push_back(rhs.col_idx_[q]);
                }
                accum[c] += a * rhs.values_[q];
            }
        }
        std::sort(touched.begin(), touched.end());
        for (Index c : touched) {
            const auto ci = static_cast<std::size_t>(c);
            if (accum[ci] != 0.0) {
                out.col_idx_.push_back(c);
                out.values_.push_back(accum[ci]);
            }
            accum[ci] = 0.0;
            occupied[ci] = 0;
        }
        if (out.col_idx_.size() > nnz_budget)
            throw ResourceError("sparse product exceeds nonzero budget of " + std::to_string(nnz_budget));
        out.row_ptr_[static_cast<std::size_t>(r) + 1] = out.col_idx_.size();
    }
    return out;
}

CsrMatrix CsrMatrix::hadamard(const CsrMatrix& rhs) const {
    if (rows_ != rhs.rows_ || cols_ != rhs.cols_)
        throw ArgumentError("hadamard: shapes differ");
    CsrMatrix out(rows_, cols_);
    for (Index r = 0; r < rows_; ++r) {
        std::size_t a = row_ptr_[r];
        std::size_t b = rhs.row_ptr_[r];
        while (a < row_ptr_[r + 1] && b < rhs.row_ptr_[r + 1]) {
            if (col_idx_[a] < rhs.col_idx_[b]) {
                ++a;
            } else if (col_idx_[a] > rhs.col_idx_[b]) {
                ++b;
            } else {
                const double v = values_[a] * rhs.values_[b];
                if (v != 0.0) {
                    out.col_idx_.push_back(col_idx_[a]);
                    out.values_.push_back(v);
                }
                ++a;
                ++b;
            }
        }
        out.row_ptr_[static_cast<std::size_t>(r) + 1] = out.col_idx_.size();
    }
    return out;
}

CsrMatrix CsrMatrix::pruned(double floor) const {
    CsrMatrix out(rows_, cols_);
    for (Index r = 0; r < rows_; ++r) {
        for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
            if (std::abs(values_[k]) > floor) {
                out.col_idx_.push_back(col_idx_[k]);
                out.values_.push_back(values_[k]);
            }
        }
        out.row_ptr_[static_cast<std::size_t>(r) + 1] = out.col_idx_.size();
    }
    return out;
}

Eigen::MatrixXd CsrMatrix::to_dense(std::size_t nnz_budget) const {
    if (nnz() > nnz_budget)
        throw ResourceError("refusing to densify a matrix with " + std::to_string(nnz()) +
                            " nonzeros (budget " + std::to_string(nnz_budget) + ")");
    Eigen::MatrixXd dense = Eigen::MatrixXd::Zero(rows_, cols_);
    for (Index r = 0; r < rows_; ++r)
        for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) dense(r, col_idx_[k]) = values_[k];
    return dense;
}

std::vector<Triplet> CsrMatrix::to_triplets() const {
    std::vector<Triplet> out;
    out.reserve(nnz());
    for (Index r = 0; r < rows_; ++r)
        for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) out.push_back({r, col_idx_[k], values_[k]});
    return out;
}

}  // namespace fmg::sparse
