#include "fmg/solvers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>

#include "fmg/metrics.hpp"

namespace fmg::solvers {

namespace {

using Clock = std::chrono::steady_clock;

double h_bar(const FmParams& x, const Problem& pr) {
    return model::split_objective(x, pr.train, pr.layout, pr.reg);
}

double distance_sq(const FmParams& a, const FmParams& b) { return (a - b).squared_norm(); }

void freeze_mask(FmParams& g, const SolverConfig& cfg) {
    if (cfg.freeze_b) g.b = 0.0;
    if (cfg.freeze_w) g.w.setZero();
    if (cfg.freeze_v) g.V.setZero();
}

// prox(x - step * grad) with frozen blocks copied through unchanged.
FmParams prox_step(const FmParams& x, FmParams grad, double step, const Problem& pr, const SolverConfig& cfg) {
    freeze_mask(grad, cfg);
    FmParams out = model::prox_params(x - step * grad, pr.layout, pr.reg, step);
    if (cfg.freeze_b) out.b = x.b;
    if (cfg.freeze_w) out.w = x.w;
    if (cfg.freeze_v) out.V = x.V;
    return out;
}

class Tracer {
public:
    Tracer(const Problem& pr) : pr_(pr), start_(Clock::now()) {}

    TraceRecord record(int iter, double evals, double objective, const FmParams& x) const {
        TraceRecord r;
        r.iter = iter;
        r.grad_evals_over_n = evals;
        r.objective = objective;
        r.nnz = metrics::nnz_ratio(x);
        r.seconds = std::chrono::duration<double>(Clock::now() - start_).count();
        if (pr_.valid && pr_.valid->size() > 0) {
            Eigen::VectorXd pred = model::predict_batch(x, pr_.valid->X);
            if (pr_.clip) pred = pred.cwiseMax(pr_.clip->min).cwiseMin(pr_.clip->max);
            r.rmse_valid = metrics::rmse(pred, pr_.valid->y);
        }
        return r;
    }

private:
    const Problem& pr_;
    Clock::time_point start_;
};

bool small_change(double before, double after, double tol) {
    return std::abs(before - after) <= tol * std::max(1.0, std::abs(before));
}

void check_problem(const Problem& pr, const SolverConfig& cfg) {
    if (pr.train.size() == 0) throw ArgumentError("training table is empty");
    pr.layout.validate();
    pr.reg.validate(pr.layout);
    if (pr.train.width() != pr.layout.d) throw ArgumentError("training features do not match the layout width");
    cfg.validate(pr.train.size());
}

std::vector<Index> iota_indices(Index n) {
    std::vector<Index> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), Index{0});
    return v;
}

}  // namespace

std::string to_string(Algorithm a) {
    switch (a) {
        case Algorithm::nmapg: return "nmapg";
        case Algorithm::svrg: return "svrg";
        case Algorithm::sgd: return "sgd";
    }
    return "?";
}

Algorithm algorithm_from_string(const std::string& s) {
    if (s == "nmapg") return Algorithm::nmapg;
    if (s == "svrg") return Algorithm::svrg;
    if (s == "sgd") return Algorithm::sgd;
    throw ArgumentError("unknown solver '" + s + "' (expected nmapg, svrg or sgd)");
}

void SolverConfig::validate(Index n) const {
    if (!(step > 0)) throw ArgumentError("step size must be positive");
    if (!(delta > 0)) throw ArgumentError("nmAPG sufficient-decrease delta must be positive");
    if (!(history_decay >= 0 && history_decay <= 1)) throw ArgumentError("history decay must lie in [0, 1]");
    if (max_iter < 0) throw ArgumentError("max_iter must be nonnegative");
    if (batch_size < 0 || inner_steps < 0) throw ArgumentError("mini-batch settings must be nonnegative");
    if (sgd_decay < 0) throw ArgumentError("SGD decay must be nonnegative");
    if (batch_size > 0 && inner_steps > 0 && batch_size * inner_steps != n)
        throw ArgumentError("mini-batch size times inner steps must equal N (" + std::to_string(batch_size) + " x " +
                            std::to_string(inner_steps) + " != " + std::to_string(n) + ")");
    if (batch_size > n) throw ArgumentError("mini-batch size exceeds the number of samples");
}

nlohmann::json SolverConfig::to_json() const {
    return {{"algorithm", solvers::to_string(algorithm)},
            {"step", step},
            {"max_iter", max_iter},
            {"tol", tol},
            {"seed", seed},
            {"init_std", init_std},
            {"delta", delta},
            {"history_decay", history_decay},
            {"extrapolated_prox", extrapolated_prox},
            {"batch_size", batch_size},
            {"inner_steps", inner_steps},
            {"sgd_decay", sgd_decay}};
}

SolverConfig SolverConfig::from_json(const nlohmann::json& j) {
    SolverConfig c;
    if (j.contains("algorithm")) c.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
    c.step = j.value("step", c.step);
    c.max_iter = j.value("max_iter", c.max_iter);
    c.tol = j.value("tol", c.tol);
    c.seed = j.value("seed", c.seed);
    c.init_std = j.value("init_std", c.init_std);
    c.delta = j.value("delta", c.delta);
    c.history_decay = j.value("history_decay", c.history_decay);
    c.extrapolated_prox = j.value("extrapolated_prox", c.extrapolated_prox);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.inner_steps = j.value("inner_steps", c.inner_steps);
    c.sgd_decay = j.value("sgd_decay", c.sgd_decay);
    return c;
}

std::pair<Index, Index> minibatch_shape(const SolverConfig& cfg, Index n) {
    const Index mb = cfg.batch_size > 0 ? cfg.batch_size : std::max<Index>(1, std::min<Index>(128, n / 10));
    const Index b = cfg.inner_steps > 0 ? cfg.inner_steps : std::max<Index>(1, n / mb);
    return {mb, b};
}

// ---- trace IO ---------------------------------------------------------------------

namespace {

const char* acceptance_name(Acceptance a) {
    switch (a) {
        case Acceptance::none: return "none";
        case Acceptance::extrapolated: return "extrapolated";
        case Acceptance::fallback: return "fallback";
        case Acceptance::extrapolated_after_fallback: return "extrapolated_after_fallback";
    }
    return "none";
}

Acceptance acceptance_from(const std::string& s) {
    for (Acceptance a : {Acceptance::none, Acceptance::extrapolated, Acceptance::fallback,
                         Acceptance::extrapolated_after_fallback})
        if (s == acceptance_name(a)) return a;
    throw ParseError("unknown acceptance tag '" + s + "'");
}

}  // namespace

void TrainTrace::write_jsonl(std::ostream& out) const {
    for (const TraceRecord& r : records) {
        nlohmann::json j = {{"iter", r.iter},
                            {"grad_evals_over_N", r.grad_evals_over_n},
                            {"objective", r.objective},
                            {"rmse_valid", std::isnan(r.rmse_valid) ? nlohmann::json(nullptr) : nlohmann::json(r.rmse_valid)},
                            {"nnz", r.nnz},
                            {"seconds", r.seconds}};
        if (r.accepted != Acceptance::none) {
            j["accepted"] = acceptance_name(r.accepted);
            j["c"] = r.c;
            j["delta_sq"] = r.delta_sq;
            j["candidate"] = r.candidate;
        }
        out << j.dump() << '\n';
    }
}

TrainTrace TrainTrace::read_jsonl(std::istream& in) {
    TrainTrace t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("trace: ") + e.what(), lineno);
        }
        TraceRecord r;
        r.iter = j.at("iter").get<int>();
        r.grad_evals_over_n = j.at("grad_evals_over_N").get<double>();
        r.objective = j.at("objective").get<double>();
        if (!j.at("rmse_valid").is_null()) r.rmse_valid = j.at("rmse_valid").get<double>();
        r.nnz = j.at("nnz").get<double>();
        r.seconds = j.at("seconds").get<double>();
        if (j.contains("accepted")) {
            r.accepted = acceptance_from(j.at("accepted").get<std::string>());
            r.c = j.at("c").get<double>();
            r.delta_sq = j.at("delta_sq").get<double>();
            r.candidate = j.at("candidate").get<double>();
        }
        t.records.push_back(r);
    }
    return t;
}

// ---- shared pieces ---------------------------------------------------------------------

FmParams initial_params(const Problem& problem, const SolverConfig& cfg, Index k) {
    FmParams p = FmParams::zeros(problem.layout.d, k);
    p.b = problem.train.size() > 0 ? problem.train.y.mean() : 0.0;
    if (!cfg.freeze_v) {
        std::mt19937_64 rng(cfg.seed);
        std::normal_distribution<double> nd(0.0, cfg.init_std);
        for (Index j = 0; j < p.V.cols(); ++j)
            for (Index i = 0; i < p.V.rows(); ++i) p.V(i, j) = nd(rng);
    }
    return p;
}

double prox_grad_residual(const FmParams& x, const Problem& problem, double step) {
    const FmParams g = model::augmented_grad(x, problem.layout, problem.reg, problem.train);
    const FmParams p = model::prox_params(x - step * g, problem.layout, problem.reg, step);
    return std::sqrt(distance_sq(x, p)) / step;
}

FmParams svrg_direction(const FmParams& x, const FmParams& snapshot, const FmParams& full_grad,
                        const Problem& problem, std::span<const Index> batch) {
    FmParams d = model::augmented_grad(x, problem.layout, problem.reg, problem.train, batch);
    d -= model::augmented_grad(snapshot, problem.layout, problem.reg, problem.train, batch);
    d += full_grad;
    return d;
}

// ---- nmAPG ---------------------------------------------------------------------------

TrainResult train_nmapg(const Problem& pr, const SolverConfig& cfg, Index k, const std::optional<FmParams>& init) {
    check_problem(pr, cfg);
    const Tracer tracer(pr);
    FmParams x = init ? *init : initial_params(pr, cfg, k);
    double alpha = cfg.step;
    bool halved = false;
    double evals = 0.0;
    TrainResult res;

    for (;;) {
        FmParams x_prev = x, z = x;
        double fx = h_bar(x, pr);
        if (!std::isfinite(fx)) throw TrainingDiverged("nmAPG: objective at the starting point is not finite", x, 0);
        double c = fx, q = 1.0, a_prev = 0.0, a = 1.0;
        res.trace.records.push_back(tracer.record(res.iterations, evals, fx, x));
        bool diverged = false;

        for (int t = res.iterations + 1; t <= cfg.max_iter; ++t) {
            const FmParams y = x + (a_prev / a) * (z - x) + ((a_prev - 1.0) / a) * (x - x_prev);
            const FmParams& base = cfg.extrapolated_prox ? y : x;
            const FmParams g_base = model::augmented_grad(base, pr.layout, pr.reg, pr.train);
            evals += 1.0;
            FmParams z_new = prox_step(base, g_base, alpha, pr, cfg);
            const double fz = h_bar(z_new, pr);
            const double dsq = distance_sq(z_new, y);

            FmParams x_new;
            double fx_new;
            Acceptance how;
            if (std::isfinite(fz) && fz <= c - cfg.delta * dsq) {
                x_new = z_new;
                fx_new = fz;
                how = Acceptance::extrapolated;
            } else {
                FmParams v;
                if (cfg.extrapolated_prox) {
                    const FmParams g_x = model::augmented_grad(x, pr.layout, pr.reg, pr.train);
                    evals += 1.0;
                    v = prox_step(x, g_x, alpha, pr, cfg);
                } else {
                    v = z_new;  // both prox steps are taken at (w_t, V_t)
                }
                const double fv = h_bar(v, pr);
                if (!std::isfinite(fz) || fv < fz) {
                    x_new = std::move(v);
                    fx_new = fv;
                    how = Acceptance::fallback;
                } else {
                    x_new = z_new;
                    fx_new = fz;
                    how = Acceptance::extrapolated_after_fallback;
                }
            }
            if (!std::isfinite(fx_new)) {
                diverged = true;
                break;
            }

            TraceRecord rec = tracer.record(t, evals, fx_new, x_new);
            rec.accepted = how;
            rec.c = c;
            rec.delta_sq = dsq;
            rec.candidate = fz;
            res.trace.records.push_back(rec);

            a_prev = a;
            a = 0.5 * (std::sqrt(4.0 * a * a + 1.0) + 1.0);
            const double q_new = cfg.history_decay * q + 1.0;
            c = (cfg.history_decay * q * c + fx_new) / q_new;
            q = q_new;

            x_prev = std::move(x);
            x = std::move(x_new);
            z = std::move(z_new);
            const double before = fx;
            fx = fx_new;
            res.iterations = t;
            if (small_change(before, fx, cfg.tol)) {
                res.converged = true;
                break;
            }
        }
        if (!diverged) break;
        if (halved)
            throw TrainingDiverged("nmAPG: objective became non-finite at iteration " +
                                       std::to_string(res.iterations + 1) + " after halving the step to " +
                                       std::to_string(alpha),
                                   x, res.iterations + 1);
        halved = true;
        alpha *= 0.5;  // restart from the last finite iterate with momentum reset
    }
    res.params = std::move(x);
    res.step = alpha;
    return res;
}

// ---- SVRG ------------------------------------------------------------------------------

TrainResult train_svrg(const Problem& pr, const SolverConfig& cfg, Index k, const std::optional<FmParams>& init) {
    check_problem(pr, cfg);
    const Tracer tracer(pr);
    const Index n = pr.train.size();
    const auto [mb, inner] = minibatch_shape(cfg, n);
    std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995ULL);

    FmParams snapshot = init ? *init : initial_params(pr, cfg, k);
    FmParams x = snapshot;
    double f = h_bar(snapshot, pr);
    if (!std::isfinite(f)) throw TrainingDiverged("SVRG: objective at the starting point is not finite", snapshot, 0);
    double evals = 0.0;
    TrainResult res;
    res.step = cfg.step;
    res.trace.records.push_back(tracer.record(0, evals, f, snapshot));
    std::vector<Index> order = iota_indices(n);

    for (int epoch = 1; epoch <= cfg.max_iter; ++epoch) {
        FmParams full = model::augmented_grad(snapshot, pr.layout, pr.reg, pr.train);
        evals += 1.0;
        FmParams sum = FmParams::zeros(x.d(), x.k());
        Index cursor = n;
        for (Index b = 0; b < inner; ++b) {
            if (cursor + mb > n) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const std::span<const Index> batch(order.data() + cursor, static_cast<std::size_t>(mb));
            cursor += mb;
            const FmParams d = svrg_direction(x, snapshot, full, pr, batch);
            x = prox_step(x, d, cfg.step, pr, cfg);
            sum += x;
        }
        evals += 2.0 * static_cast<double>(mb * inner) / static_cast<double>(n);
        sum *= 1.0 / static_cast<double>(inner);
        const double f_new = h_bar(sum, pr);
        if (!std::isfinite(f_new))
            throw TrainingDiverged("SVRG: objective became non-finite in epoch " + std::to_string(epoch), snapshot,
                                   epoch);
        snapshot = std::move(sum);
        res.trace.records.push_back(tracer.record(epoch, evals, f_new, snapshot));
        res.iterations = epoch;
        const double before = f;
        f = f_new;
        if (small_change(before, f, cfg.tol)) {
            res.converged = true;
            break;
        }
    }
    res.params = std::move(snapshot);
    return res;
}

// ---- SGD -------------------------------------------------------------------------------

TrainResult train_sgd(const Problem& pr, const SolverConfig& cfg, Index k, const std::optional<FmParams>& init) {
    check_problem(pr, cfg);
    const Tracer tracer(pr);
    const Index n = pr.train.size();
    const auto [mb, inner] = minibatch_shape(cfg, n);
    std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995ULL);

    FmParams x = init ? *init : initial_params(pr, cfg, k);
    double f = h_bar(x, pr);
    if (!std::isfinite(f)) throw TrainingDiverged("SGD: objective at the starting point is not finite", x, 0);
    double evals = 0.0;
    TrainResult res;
    res.step = cfg.step;
    res.trace.records.push_back(tracer.record(0, evals, f, x));
    std::vector<Index> order = iota_indices(n);
    std::uint64_t t = 0;
    Index cursor = n;

    for (int epoch = 1; epoch <= cfg.max_iter; ++epoch) {
        const FmParams last = x;
        for (Index b = 0; b < inner; ++b) {
            if (cursor + mb > n) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const std::span<const Index> batch(order.data() + cursor, static_cast<std::size_t>(mb));
            cursor += mb;
            const FmParams g = model::augmented_grad(x, pr.layout, pr.reg, pr.train, batch);
            const double alpha_t = cfg.step / (1.0 + cfg.sgd_decay * static_cast<double>(t++));
            x = prox_step(x, g, alpha_t, pr, cfg);
        }
        evals += static_cast<double>(mb * inner) / static_cast<double>(n);
        const double f_new = h_bar(x, pr);
        if (!std::isfinite(f_new))
            throw TrainingDiverged("SGD: objective became non-finite in epoch " + std::to_string(epoch), last, epoch);
        res.trace.records.push_back(tracer.record(epoch, evals, f_new, x));
        res.iterations = epoch;
        const double before = f;
        f = f_new;
        if (small_change(before, f, cfg.tol)) {
            res.converged = true;
            break;
        }
    }
    res.params = std::move(x);
    return res;
}

TrainResult train(const Problem& problem, const SolverConfig& cfg, Index k, const std::optional<FmParams>& init) {
    switch (cfg.algorithm) {
        case Algorithm::nmapg: return train_nmapg(problem, cfg, k, init);
        case Algorithm::svrg: return train_svrg(problem, cfg, k, init);
        case Algorithm::sgd: return train_sgd(problem, cfg, k, init);
    }
    throw ArgumentError("unknown solver");
}

}  // namespace fmg::solvers
