#include "support/fm_oracles.hpp"

#include <cmath>

namespace fmg::testing {

using model::Index;

double literal_predict(const model::FmParams& p, const Eigen::VectorXd& x) {
    double y = p.b;
    const Index d = x.size();
    for (Index i = 0; i < d; ++i) y += p.w[i] * x[i];
    for (Index i = 0; i < d; ++i)
        for (Index j = i + 1; j < d; ++j) {
            double dot = 0;
            for (Index f = 0; f < p.V.cols(); ++f) dot += p.V(i, f) * p.V(j, f);
            y += dot * x[i] * x[j];
        }
    return y;
}

double literal_augmented_loss(const model::FmParams& p, const model::RegConfig& cfg, const model::GroupLayout& layout,
                              const model::RowMatrix& X, const Eigen::VectorXd& y) {
    double loss = 0;
    for (Index n = 0; n < X.rows(); ++n) {
        const double e = y[n] - literal_predict(p, X.row(n).transpose());
        loss += e * e;
    }
    loss /= static_cast<double>(X.rows());
    if (cfg.mode == model::RegMode::convex) return loss;
    double g = 0;
    for (std::size_t gi = 0; gi < layout.groups.size(); ++gi) {
        const auto& grp = layout.groups[gi];
        double sw = 0, sv = 0;
        for (Index i = grp.begin; i < grp.end; ++i) {
            sw += p.w[i] * p.w[i];
            for (Index f = 0; f < p.V.cols(); ++f) sv += p.V(i, f) * p.V(i, f);
        }
        const double tw = std::sqrt(sw), tv = std::sqrt(sv);
        g += cfg.lambda_w * cfg.eta_w[static_cast<Index>(gi)] * (std::log(1.0 + tw) - tw);
        g += cfg.lambda_v * cfg.eta_v[static_cast<Index>(gi)] * (std::log(1.0 + tv) - tv);
    }
    return loss + g;
}

model::FmParams finite_difference(const std::function<double(const model::FmParams&)>& f, const model::FmParams& p,
                                  double eps) {
    model::FmParams g = model::FmParams::zeros(p.d(), p.k());
    model::FmParams q = p;
    {
        q.b = p.b + eps;
        const double up = f(q);
        q.b = p.b - eps;
        const double dn = f(q);
        q.b = p.b;
        g.b = (up - dn) / (2 * eps);
    }
    for (Index i = 0; i < p.w.size(); ++i) {
        q.w[i] = p.w[i] + eps;
        const double up = f(q);
        q.w[i] = p.w[i] - eps;
        const double dn = f(q);
        q.w[i] = p.w[i];
        g.w[i] = (up - dn) / (2 * eps);
    }
    for (Index i = 0; i < p.V.size(); ++i) {
        q.V.data()[i] = p.V.data()[i] + eps;
        const double up = f(q);
        q.V.data()[i] = p.V.data()[i] - eps;
        const double dn = f(q);
        q.V.data()[i] = p.V.data()[i];
        g.V.data()[i] = (up - dn) / (2 * eps);
    }
    return g;
}

double relative_error(const model::FmParams& a, const model::FmParams& b) {
    const double diff = (a - b).squared_norm();
    const double scale = std::max(b.squared_norm(), 1e-300);
    return std::sqrt(diff / scale);
}

Eigen::VectorXd numeric_group_prox(const Eigen::VectorXd& z, double tau, std::mt19937_64& rng) {
    const Index n = z.size();
    auto obj = [&](const Eigen::VectorXd& x) { return 0.5 * (x - z).squaredNorm() + tau * x.norm(); };
    std::normal_distribution<double> nd;
    Eigen::VectorXd x(n);
    for (Index i = 0; i < n; ++i) x[i] = nd(rng);
    // Damped Newton on 1/2||x - z||^2 + tau sqrt(||x||^2 + eps^2), shrinking eps.
    for (double eps = 1e-1; eps >= 1e-15; eps *= 0.1) {
        auto smooth = [&](const Eigen::VectorXd& v) {
            return 0.5 * (v - z).squaredNorm() + tau * std::sqrt(v.squaredNorm() + eps * eps);
        };
        for (int it = 0; it < 100; ++it) {
            const double r = std::sqrt(x.squaredNorm() + eps * eps);
            const Eigen::VectorXd g = x - z + (tau / r) * x;
            if (g.norm() <= 1e-15 * std::max(1.0, z.norm())) break;
            const Eigen::MatrixXd hess = (1.0 + tau / r) * Eigen::MatrixXd::Identity(n, n) -
                                         (tau / (r * r * r)) * x * x.transpose();
            const Eigen::VectorXd dx = hess.ldlt().solve(-g);
            double t = 1.0;
            const double f0 = smooth(x);
            while (t > 1e-12 && smooth(x + t * dx) > f0 + 1e-4 * t * g.dot(dx)) t *= 0.5;
            x += t * dx;
        }
    }
    if (obj(Eigen::VectorXd::Zero(n)) <= obj(x)) x.setZero();
    return x;
}

RandomFmInstance random_fm_instance(std::mt19937_64& rng, model::RegMode mode, Index max_d, Index max_k, Index n,
                                    double zero_group_prob) {
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> unit(0.2, 1.5);
    std::bernoulli_distribution zero(zero_group_prob);
    const Index max_rank_total = std::max<Index>(1, max_d / 2);
    std::uniform_int_distribution<Index> lcount(1, std::min<Index>(3, max_rank_total));
    const Index L = lcount(rng);
    std::vector<std::string> names;
    std::vector<Index> ranks;
    Index budget = max_rank_total;
    for (Index l = 0; l < L; ++l) {
        const Index remaining_groups = L - l - 1;
        std::uniform_int_distribution<Index> rd(1, std::max<Index>(1, budget - remaining_groups));
        const Index r = rd(rng);
        ranks.push_back(r);
        budget -= r;
        names.push_back("M" + std::to_string(l + 1));
    }
    RandomFmInstance inst;
    inst.layout = model::GroupLayout::from_ranks(names, ranks);
    const Index d = inst.layout.d;
    const Index k = std::uniform_int_distribution<Index>(1, max_k)(rng);
    inst.params = model::FmParams::zeros(d, k);
    inst.params.b = nd(rng);
    for (Index i = 0; i < d; ++i) {
        inst.params.w[i] = nd(rng);
        for (Index f = 0; f < k; ++f) inst.params.V(i, f) = 0.5 * nd(rng);
    }
    for (const auto& g : inst.layout.groups) {
        if (zero(rng)) inst.params.w.segment(g.begin, g.width()).setZero();
        if (zero(rng)) inst.params.V.middleRows(g.begin, g.width()).setZero();
    }
    inst.reg = model::RegConfig::uniform(inst.layout, mode, unit(rng));
    inst.reg.lambda_v = unit(rng);
    for (Index g = 0; g < inst.reg.eta_w.size(); ++g) {
        inst.reg.eta_w[g] = unit(rng);
        inst.reg.eta_v[g] = unit(rng);
    }
    inst.X.resize(n, d);
    inst.y.resize(n);
    for (Index r = 0; r < n; ++r) {
        for (Index i = 0; i < d; ++i) inst.X(r, i) = nd(rng);
        inst.y[r] = 3.0 + nd(rng);
    }
    return inst;
}

}  // namespace fmg::testing
