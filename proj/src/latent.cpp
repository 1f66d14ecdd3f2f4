#include "fmg/latent.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <Eigen/SVD>
#include <Eigen/Sparse>
#include <spdlog/spdlog.h>

#include "fmg/error.hpp"

namespace fmg::latent {

namespace {

using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Observation pattern in storage order; values are the observed R entries.
struct Mask {
    SpMat r;
    std::vector<int> row_of;
    std::vector<int> col_of;

    explicit Mask(const ObservedMatrix& obs) : r(obs.rows, obs.cols) {
        std::vector<Eigen::Triplet<double>> trips;
        trips.reserve(obs.entries.size());
        for (const auto& t : obs.entries) {
            if (t.row < 0 || t.row >= obs.rows || t.col < 0 || t.col >= obs.cols)
                throw ArgumentError("observed entry outside matrix shape");
            trips.emplace_back(static_cast<int>(t.row), static_cast<int>(t.col), t.value);
        }
        r.setFromTriplets(trips.begin(), trips.end());
        r.makeCompressed();
        row_of.reserve(static_cast<std::size_t>(r.nonZeros()));
        col_of.reserve(static_cast<std::size_t>(r.nonZeros()));
        for (int i = 0; i < r.outerSize(); ++i)
            for (SpMat::InnerIterator it(r, i); it; ++it) {
                row_of.push_back(i);
                col_of.push_back(static_cast<int>(it.col()));
            }
    }

    std::size_t size() const { return row_of.size(); }
    const double* values() const { return r.valuePtr(); }

    // (L R^T)_ij at every observed position.
    template <typename ML, typename MR>
    Eigen::VectorXd sample(const ML& L, const MR& R) const {
        Eigen::VectorXd out(static_cast<Eigen::Index>(size()));
        for (std::size_t k = 0; k < size(); ++k) out[static_cast<Eigen::Index>(k)] = L.row(row_of[k]).dot(R.row(col_of[k]));
        return out;
    }

    SpMat with_values(const Eigen::VectorXd& v) const {
        SpMat out = r;
        std::copy(v.data(), v.data() + v.size(), out.valuePtr());
        return out;
    }

    Eigen::Map<const Eigen::VectorXd> observed() const {
        return {values(), static_cast<Eigen::Index>(size())};
    }
};

void check_observed(const ObservedMatrix& r) {
    if (r.rows <= 0 || r.cols <= 0) throw ArgumentError("observed matrix has an empty dimension");
    if (r.entries.empty()) throw ArgumentError("observed matrix has no observations");
}

Eigen::MatrixXd gaussian(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, stddev);
    Eigen::MatrixXd m(rows, cols);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) m(i, j) = nd(rng);
    return m;
}

Eigen::MatrixXd orthonormalize(const Eigen::MatrixXd& y) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(y);
    return qr.householderQ() * Eigen::MatrixXd::Identity(y.rows(), y.cols());
}

// Z = L R^T + S, applied without forming Z.
struct Operator {
    const Eigen::MatrixXd& L;
    const Eigen::MatrixXd& R;
    const SpMat& S;

    Eigen::MatrixXd apply(const Eigen::MatrixXd& g) const { return L * (R.transpose() * g) + S * g; }
    Eigen::MatrixXd apply_t(const Eigen::MatrixXd& h) const { return R * (L.transpose() * h) + S.transpose() * h; }
};

struct PartialSvd {
    Eigen::MatrixXd U;
    Eigen::VectorXd s;
    Eigen::MatrixXd V;
};

// Randomized subspace iteration for the top-k singular triplets.
PartialSvd top_svd(const Operator& op, Index n, Index k, const Eigen::MatrixXd& warm, int power,
                   std::mt19937_64& rng) {
    Eigen::MatrixXd g = gaussian(n, k, 1.0, rng);
    const Index reuse = std::min(k, static_cast<Index>(warm.cols()));
    if (reuse > 0 && warm.rows() == n) g.leftCols(reuse) = warm.leftCols(reuse);
    Eigen::MatrixXd q = orthonormalize(op.apply(g));
    for (int p = 0; p < power; ++p) {
        const Eigen::MatrixXd w = orthonormalize(op.apply_t(q));
        q = orthonormalize(op.apply(w));
    }
    const Eigen::MatrixXd small = op.apply_t(q).transpose();  // k x n
    Eigen::BDCSVD<Eigen::MatrixXd> svd(small, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return {q * svd.matrixU(), svd.singularValues(), svd.matrixV()};
}

double nuclear(const NnrState& x) { return x.sigma.sum(); }

Eigen::MatrixXd scaled_left(const NnrState& x) { return x.P * x.sigma.asDiagonal(); }

double nnr_objective_on(const Mask& mask, const NnrState& x) {
    double loss = 0.0;
    if (x.rank() > 0) {
        const Eigen::VectorXd fit = mask.sample(scaled_left(x), x.Q);
        loss = 0.5 * (fit - mask.observed()).squaredNorm();
    } else {
        loss = 0.5 * mask.observed().squaredNorm();
    }
    return loss + x.mu * nuclear(x);
}

NnrState empty_state(Index m, Index n, double mu) {
    NnrState s;
    s.P = Eigen::MatrixXd::Zero(m, 0);
    s.Q = Eigen::MatrixXd::Zero(n, 0);
    s.sigma = Eigen::VectorXd::Zero(0);
    s.mu = mu;
    return s;
}

class NnrSolver {
public:
    NnrSolver(const ObservedMatrix& obs, const NnrOptions& opts)
        : mask_(obs), opts_(opts), m_(obs.rows), n_(obs.cols), rng_(opts.seed) {}

    // svt(Y - P_Omega(Y - R), mu) with Y = beta-extrapolation of (x, prev).
    NnrState prox_step(const NnrState& x, const NnrState& prev, double beta) {
        Eigen::MatrixXd L(m_, x.rank() + (beta != 0.0 ? prev.rank() : 0));
        Eigen::MatrixXd R(n_, L.cols());
        L.leftCols(x.rank()) = (1.0 + beta) * scaled_left(x);
        R.leftCols(x.rank()) = x.Q;
        if (beta != 0.0 && prev.rank() > 0) {
            L.rightCols(prev.rank()) = -beta * scaled_left(prev);
            R.rightCols(prev.rank()) = prev.Q;
        }
        const Eigen::VectorXd y_obs =
            L.cols() > 0 ? mask_.sample(L, R) : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mask_.size()));
        const SpMat S = mask_.with_values(mask_.observed() - y_obs);
        const Operator op{L, R, S};

        const Index full = std::min(m_, n_);
        Index k = std::min(full, std::max(x.rank(), opts_.initial_rank) + opts_.oversampling);
        PartialSvd svd;
        Index keep = 0;
        for (;;) {
            svd = top_svd(op, n_, k, x.Q, opts_.power_iters, rng_);
            keep = 0;
            while (keep < svd.s.size() && svd.s[keep] > opts_.mu) ++keep;
            if (keep < k || k == full) break;
            k = std::min(full, 2 * k);
        }
        NnrState out;
        out.mu = opts_.mu;
        out.P = svd.U.leftCols(keep);
        out.Q = svd.V.leftCols(keep);
        out.sigma = svd.s.head(keep).array() - opts_.mu;
        return out;
    }

    double objective(const NnrState& x) const { return nnr_objective_on(mask_, x); }

private:
    Mask mask_;
    NnrOptions opts_;
    Index m_;
    Index n_;
    std::mt19937_64 rng_;
};

void write_matrix(std::ostream& out, const Eigen::MatrixXd& m) {
    char buf[64];
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            const auto res = std::to_chars(buf, buf + sizeof buf, m(i, j));
            if (j) out << '\t';
            out.write(buf, res.ptr - buf);
        }
        out << '\n';
    }
}

void write_side(const std::filesystem::path& path, const std::string& side, const FactorPair& f,
                const Eigen::MatrixXd& m) {
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write factor file " + path.string());
    out << "# side=" << side << " rows=" << m.rows() << " rank=" << m.cols() << " metagraph=" << f.metagraph
        << " method=" << f.method << '\n';
    write_matrix(out, m);
    if (!out) throw ArgumentError("failed writing factor file " + path.string());
}

Eigen::MatrixXd read_side(const std::filesystem::path& path, FactorPair& f) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot read factor file " + path.string());
    std::string header;
    std::getline(in, header);
    if (header.rfind("# ", 0) != 0) throw ParseError(path.string() + ": missing factor header", 1);
    std::istringstream hs(header.substr(2));
    std::string kv;
    Index rows = -1, rank = -1;
    while (hs >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        if (key == "rows") rows = std::stoll(val);
        else if (key == "rank") rank = std::stoll(val);
        else if (key == "metagraph") f.metagraph = val;
        else if (key == "method") f.method = val;
    }
    if (rows < 0 || rank < 0) throw ParseError(path.string() + ": header lacks rows/rank", 1);
    Eigen::MatrixXd m(rows, rank);
    std::string line;
    for (Index i = 0; i < rows; ++i) {
        if (!std::getline(in, line)) throw ParseError(path.string() + ": truncated factor file", static_cast<std::size_t>(i + 2));
        const char* p = line.data();
        const char* end = line.data() + line.size();
        for (Index j = 0; j < rank; ++j) {
            while (p < end && (*p == '\t' || *p == ' ')) ++p;
            double v = 0;
            const auto res = std::from_chars(p, end, v);
            if (res.ec != std::errc()) throw ParseError(path.string() + ": bad number", static_cast<std::size_t>(i + 2));
            m(i, j) = v;
            p = res.ptr;
        }
    }
    return m;
}

}  // namespace

ObservedMatrix ObservedMatrix::from_similarity(const sparse::CsrMatrix& sim) {
    ObservedMatrix out{sim.rows(), sim.cols(), {}};
    for (const auto& t : sim.to_triplets())
        if (t.value != 0.0) out.entries.push_back(t);
    return out;
}

ObservedMatrix ObservedMatrix::from_dense(const Eigen::MatrixXd& dense) {
    ObservedMatrix out{dense.rows(), dense.cols(), {}};
    for (Index i = 0; i < dense.rows(); ++i)
        for (Index j = 0; j < dense.cols(); ++j) out.entries.push_back({i, j, dense(i, j)});
    return out;
}

double mf_objective(const ObservedMatrix& r, const Eigen::MatrixXd& U, const Eigen::MatrixXd& B, double mu) {
    const Mask mask(r);
    const Eigen::VectorXd res = mask.sample(U, B) - mask.observed();
    return 0.5 * res.squaredNorm() + 0.5 * mu * (U.squaredNorm() + B.squaredNorm());
}

void mf_gradient(const ObservedMatrix& r, const Eigen::MatrixXd& U, const Eigen::MatrixXd& B, double mu,
                 Eigen::MatrixXd& grad_u, Eigen::MatrixXd& grad_b) {
    const Mask mask(r);
    const SpMat e = mask.with_values(mask.sample(U, B) - mask.observed());
    grad_u = e * B + mu * U;
    grad_b = e.transpose() * U + mu * B;
}

MfResult factorize_mf(const ObservedMatrix& r, const MfOptions& opts) {
    if (opts.rank < 1) throw ArgumentError("factorization rank must be at least 1");
    if (opts.rank > std::min(r.rows, r.cols) / 2)
        throw ArgumentError("factorization rank " + std::to_string(opts.rank) + " exceeds min(m, n)/2 for a " +
                            std::to_string(r.rows) + "x" + std::to_string(r.cols) + " matrix");
    if (opts.mu < 0) throw ArgumentError("mu must be nonnegative");
    check_observed(r);

    const Mask mask(r);
    std::mt19937_64 rng(opts.seed);
    const double init_std = 0.1 / std::sqrt(static_cast<double>(opts.rank));
    RowMat U = gaussian(r.rows, opts.rank, init_std, rng);
    RowMat B = gaussian(r.cols, opts.rank, init_std, rng);

    // Rows/columns without observations only feel the ridge term; pin them at zero.
    std::vector<char> row_seen(static_cast<std::size_t>(r.rows), 0), col_seen(static_cast<std::size_t>(r.cols), 0);
    for (std::size_t k = 0; k < mask.size(); ++k) {
        row_seen[static_cast<std::size_t>(mask.row_of[k])] = 1;
        col_seen[static_cast<std::size_t>(mask.col_of[k])] = 1;
    }
    for (Index i = 0; i < r.rows; ++i)
        if (!row_seen[static_cast<std::size_t>(i)]) U.row(i).setZero();
    for (Index j = 0; j < r.cols; ++j)
        if (!col_seen[static_cast<std::size_t>(j)]) B.row(j).setZero();

    auto objective = [&](const RowMat& u, const RowMat& b, Eigen::VectorXd& res) {
        res = mask.sample(u, b) - mask.observed();
        return 0.5 * res.squaredNorm() + 0.5 * opts.mu * (u.squaredNorm() + b.squaredNorm());
    };

    MfResult out;
    Eigen::VectorXd res;
    double f = objective(U, B, res);
    out.objective_history.push_back(f);
    double step = opts.initial_step;
    RowMat Un, Bn;
    Eigen::VectorXd res_n;
    for (int it = 0; it < opts.max_iter; ++it) {
        const SpMat e = mask.with_values(res);
        const RowMat gu = e * B + opts.mu * U;
        const RowMat gb = e.transpose() * U + opts.mu * B;
        const double gnorm2 = gu.squaredNorm() + gb.squaredNorm();
        if (gnorm2 == 0.0) break;
        double fn = 0;
        for (;;) {
            Un = U - step * gu;
            Bn = B - step * gb;
            fn = objective(Un, Bn, res_n);
            if (fn <= f - opts.armijo * step * gnorm2) break;
            step *= 0.5;
            if (step < 1e-20) break;
        }
        if (!(fn <= f)) break;  // no descent possible at machine precision
        U.swap(Un);
        B.swap(Bn);
        res.swap(res_n);
        const double rel = (f - fn) / std::max(f, std::numeric_limits<double>::min());
        f = fn;
        out.objective_history.push_back(f);
        out.iterations = it + 1;
        step *= 2.0;
        if (rel < opts.tol) break;
    }
    if (!std::isfinite(f)) throw DivergenceError("matrix factorization objective is not finite");
    out.factors = {Eigen::MatrixXd(U), Eigen::MatrixXd(B), "", "mf"};
    return out;
}

Eigen::MatrixXd svt(const Eigen::MatrixXd& X, double tau) {
    if (tau < 0) throw ArgumentError("svt threshold must be nonnegative");
    if (X.size() == 0) return X;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd s = (svd.singularValues().array() - tau).max(0.0);
    return svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
}

Eigen::MatrixXd NnrState::dense() const { return P * sigma.asDiagonal() * Q.transpose(); }

double nnr_objective(const ObservedMatrix& r, const NnrState& x) { return nnr_objective_on(Mask(r), x); }

NnrResult factorize_nnr(const ObservedMatrix& r, const NnrOptions& opts) {
    if (!(opts.mu > 0)) throw ArgumentError("nuclear-norm weight mu must be positive");
    check_observed(r);
    NnrSolver solver(r, opts);

    NnrResult out;
    NnrState x = empty_state(r.rows, r.cols, opts.mu);
    NnrState prev = x;
    double f = solver.objective(x);
    x.objective_history.push_back(f);
    double t_prev = 1.0, t = 1.0;
    for (int it = 0; it < opts.max_iter; ++it) {
        const double beta = (t_prev - 1.0) / t;
        NnrState cand = solver.prox_step(x, prev, beta);
        double fc = solver.objective(cand);
        if (fc > f) {
            // Restart from a plain proximal-gradient step, which cannot increase the objective.
            ++out.restarts;
            cand = solver.prox_step(x, x, 0.0);
            fc = solver.objective(cand);
            t_prev = t = 1.0;
            if (fc > f) break;
        } else {
            t_prev = t;
            t = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        }
        cand.objective_history = std::move(x.objective_history);
        cand.objective_history.push_back(fc);
        prev = std::move(x);
        x = std::move(cand);
        const double rel = (f - fc) / std::max(f, std::numeric_limits<double>::min());
        f = fc;
        out.iterations = it + 1;
        if (rel < opts.tol) break;
    }
    if (!std::isfinite(f)) throw DivergenceError("nuclear-norm objective is not finite");
    if (x.rank() == 0)
        throw ConvergenceError("nuclear-norm completion thresholded every singular value (mu=" + std::to_string(opts.mu) +
                               "); decrease mu");

    out.uncapped_rank = x.rank();
    Index cap = std::max<Index>(1, std::min(r.rows, r.cols) / 2);
    if (opts.max_rank > 0) cap = std::min(cap, opts.max_rank);
    const Index keep = std::min(cap, x.rank());
    if (keep < x.rank())
        spdlog::debug("nnr: rank {} capped to {}", x.rank(), keep);
    const Eigen::VectorXd root = x.sigma.head(keep).cwiseSqrt();
    out.factors.U = x.P.leftCols(keep) * root.asDiagonal();
    out.factors.B = x.Q.leftCols(keep) * root.asDiagonal();
    out.factors.method = "nnr";
    out.state = std::move(x);
    return out;
}

void write_factors(const std::filesystem::path& stem, const FactorPair& f) {
    write_side(stem.string() + ".U.txt", "U", f, f.U);
    write_side(stem.string() + ".B.txt", "B", f, f.B);
}

FactorPair read_factors(const std::filesystem::path& stem) {
    FactorPair f;
    f.U = read_side(stem.string() + ".U.txt", f);
    f.B = read_side(stem.string() + ".B.txt", f);
    if (f.U.cols() != f.B.cols()) throw ValidationError("factor files disagree on rank");
    return f;
}

}  // namespace fmg::latent
