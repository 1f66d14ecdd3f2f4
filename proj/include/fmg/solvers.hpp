#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fmg/error.hpp"
#include "fmg/hin.hpp"
#include "fmg/model.hpp"

namespace fmg::solvers {

using model::FeatureTable;
using model::FmParams;
using model::GroupLayout;
using model::Index;
using model::RegConfig;

enum class Algorithm { nmapg, svrg, sgd };

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);

struct SolverConfig {
    Algorithm algorithm = Algorithm::nmapg;
    double step = 0.01;  // alpha
    int max_iter = 500;  // nmAPG iterations, or epochs for SVRG/SGD
    double tol = 1e-9;   // stop on relative objective change below tol
    std::uint64_t seed = 0;
    double init_std = 0.01;  // V entries ~ N(0, init_std^2); w = 0; b = label mean

    // nmAPG
    double delta = 1e-3;
    double history_decay = 0.8;
    bool extrapolated_prox = true;  // false: first prox at (w_t, V_t) as in the printed listing

    // SVRG / SGD; 0 picks m_b = min(128, N/10) and B = N / m_b
    Index batch_size = 0;
    Index inner_steps = 0;
    double sgd_decay = 0.0;  // alpha_t = alpha / (1 + decay * t), t counts mini-batch steps

    bool freeze_b = false;
    bool freeze_w = false;
    bool freeze_v = false;

    void validate(Index n) const;
    nlohmann::json to_json() const;
    static SolverConfig from_json(const nlohmann::json& j);
};

struct Problem {
    const FeatureTable& train;
    const GroupLayout& layout;
    const RegConfig& reg;
    const FeatureTable* valid = nullptr;  // traced when present
    std::optional<hin::RatingRange> clip;  // applied to traced validation predictions
};

enum class Acceptance { none, extrapolated, fallback, extrapolated_after_fallback };

struct TraceRecord {
    int iter = 0;
    double grad_evals_over_n = 0.0;
    double objective = 0.0;
    double rmse_valid = std::numeric_limits<double>::quiet_NaN();
    double nnz = 0.0;
    double seconds = 0.0;
    // nmAPG bookkeeping; unused by the stochastic solvers.
    Acceptance accepted = Acceptance::none;
    double c = 0.0;            // c_t tested against
    double delta_sq = 0.0;     // Delta_t
    double candidate = 0.0;    // h-bar at the extrapolated candidate
};

struct TrainTrace {
    std::vector<TraceRecord> records;

    void write_jsonl(std::ostream& out) const;
    static TrainTrace read_jsonl(std::istream& in);
};

struct TrainResult {
    FmParams params;
    TrainTrace trace;
    double step = 0.0;  // step actually used (nmAPG may halve once)
    int iterations = 0;
    bool converged = false;
};

// Non-finite objective. Carries the last iterate whose objective was finite.
class TrainingDiverged : public DivergenceError {
public:
    TrainingDiverged(const std::string& what, FmParams last_finite, int iteration)
        : DivergenceError(what), last_finite_(std::move(last_finite)), iteration_(iteration) {}
    const FmParams& last_finite() const { return last_finite_; }
    int iteration() const { return iteration_; }

private:
    FmParams last_finite_;
    int iteration_;
};

FmParams initial_params(const Problem& problem, const SolverConfig& cfg, Index k);

TrainResult train_nmapg(const Problem& problem, const SolverConfig& cfg, Index k,
                        const std::optional<FmParams>& init = std::nullopt);
TrainResult train_svrg(const Problem& problem, const SolverConfig& cfg, Index k,
                       const std::optional<FmParams>& init = std::nullopt);
TrainResult train_sgd(const Problem& problem, const SolverConfig& cfg, Index k,
                      const std::optional<FmParams>& init = std::nullopt);
// Dispatches on cfg.algorithm.
TrainResult train(const Problem& problem, const SolverConfig& cfg, Index k,
                  const std::optional<FmParams>& init = std::nullopt);

// ||x - prox(x - step * grad l-bar(x))|| / step over all parameters.
double prox_grad_residual(const FmParams& x, const Problem& problem, double step);

// Variance-reduced mini-batch direction:
// mean_B[grad l-bar_i(x) - grad l-bar_i(snapshot)] + full_grad.
FmParams svrg_direction(const FmParams& x, const FmParams& snapshot, const FmParams& full_grad,
                        const Problem& problem, std::span<const Index> batch);

// Resolved (m_b, B) for a training set of n samples.
std::pair<Index, Index> minibatch_shape(const SolverConfig& cfg, Index n);

}  // namespace fmg::solvers
