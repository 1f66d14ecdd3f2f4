#pragma once

// End-to-end pipeline: ingest -> similarity -> factorize -> assemble ->
// train -> evaluate, with on-disk caching of similarity matrices and factor
// pairs and a JSON metrics report.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fmg/error.hpp"
#include "fmg/hin.hpp"
#include "fmg/latent.hpp"
#include "fmg/metagraph.hpp"
#include "fmg/model.hpp"
#include "fmg/solvers.hpp"

namespace fmg::harness {

using model::Index;

// ---- group selection ------------------------------------------------------------

struct GroupReport {
    std::string metagraph;
    model::Side side = model::Side::user;
    double w_norm = 0.0;
    double v_norm = 0.0;
    bool w_selected = false;  // w_norm > threshold
    bool v_selected = false;

    std::string label() const;
};

std::vector<GroupReport> report_selected(const model::FmParams& params, const model::GroupLayout& layout,
                                         double threshold);

// ---- configuration --------------------------------------------------------------

enum class FeatureMethod { mf, nnr };
std::string to_string(FeatureMethod m);
FeatureMethod feature_method_from_string(const std::string& s);

std::vector<double> default_lambda_grid();

struct ExperimentConfig {
    std::filesystem::path schema;      // HinSchema JSON
    std::filesystem::path metagraphs;  // DSL stanza file
    std::vector<std::string> use_metagraphs;  // empty: every stanza in the file

    // similarity
    double magnitude_floor = 0.0;
    bool log_scale = false;
    bool strict_direction = false;

    // latent features
    FeatureMethod method = FeatureMethod::mf;
    Index rank = 10;  // F
    double mu = 0.01;
    int factor_max_iter = 2000;
    double factor_tol = 1e-5;

    // factorization machine
    Index k = 10;
    std::vector<double> lambdas = default_lambda_grid();  // trained in the listed order
    bool warm_start = true;  // each lambda starts from the previous solution
    model::RegMode mode = model::RegMode::convex;
    bool sqrt_width_weights = false;
    bool standardize = true;
    bool clip = true;
    double select_threshold = 1e-8;
    solvers::SolverConfig solver;

    hin::SplitFractions split;
    std::uint64_t seed = 0;
    std::filesystem::path out_dir = "fmg-out";
    std::filesystem::path cache_dir;  // empty: <out_dir>/cache
    int repeats = 1;

    // Relative paths resolve against base_dir.
    static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
    static ExperimentConfig load(const std::filesystem::path& path);
    nlohmann::json to_json() const;
    // Throws ValidationError (missing files, K < 1, negative lambda, ...).
    void validate() const;
    std::filesystem::path resolved_cache_dir() const;
};

// ---- report ---------------------------------------------------------------------

struct LambdaPoint {
    double lambda = 0.0;
    double rmse_train = 0.0;
    double rmse_valid = 0.0;  // NaN without a validation split
    double nnz = 0.0;
    double objective = 0.0;
    int iterations = 0;
    std::vector<GroupReport> groups;
};

struct StageTiming {
    std::string stage;
    double seconds = 0.0;
    std::size_t cache_hits = 0;
    std::size_t cache_misses = 0;
};

struct MetricsReport {
    std::vector<std::string> metagraphs;
    std::size_t n_train = 0;
    std::size_t n_valid = 0;
    std::size_t n_test = 0;
    double rmse_train = 0.0;
    double rmse_valid = 0.0;
    double rmse_test = 0.0;
    double nnz = 0.0;
    double lambda = 0.0;  // selected
    std::vector<GroupReport> groups;
    std::vector<LambdaPoint> curve;
    std::vector<StageTiming> stages;

    int repeats = 1;
    std::vector<double> rmse_test_runs;
    double rmse_test_mean = 0.0;
    double rmse_test_std = 0.0;

    const StageTiming* stage(const std::string& name) const;
    // Without runtime the JSON holds results only, so equal configs give
    // equal documents.
    nlohmann::json to_json(bool include_runtime = true) const;
    static MetricsReport from_json(const nlohmann::json& j);
    bool same_results(const MetricsReport& other) const;
};

// ---- pipeline -------------------------------------------------------------------

// Tagged with the stage that failed; what() reads "<stage>: <cause>".
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& cause)
        : Error(stage + ": " + cause), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct PipelineHooks {
    std::function<void(const std::string& stage)> on_stage;
    // Called with the current stage every time the sealed test labels are read.
    std::function<void(const std::string& stage)> on_test_labels;
};

// Stages run in order; each call runs any earlier stage that has not run.
class Pipeline {
public:
    explicit Pipeline(ExperimentConfig cfg, PipelineHooks hooks = {});
    ~Pipeline();
    Pipeline(Pipeline&&) noexcept;

    void ingest();
    void similarity();
    void factorize();
    void assemble();
    void train();
    // Uses the trained model, or one installed by load_model.
    void evaluate();
    // Reads model.json written by a previous train; the feature layout must match.
    void load_model(const std::filesystem::path& dir);

    // Artifacts under out_dir.
    void write_ingest_summary() const;
    void write_similarities() const;
    void write_factors() const;
    void write_model() const;
    void write_report() const;

    const ExperimentConfig& config() const;
    const hin::HinStore& hin() const;
    const std::vector<metagraph::MetagraphSpec>& metagraphs() const;
    const std::vector<metagraph::SimilarityMatrix>& similarities() const;
    const std::vector<latent::FactorPair>& factors() const;
    const model::GroupLayout& layout() const;
    const model::FeatureTable& train_table() const;
    const model::FeatureTable& valid_table() const;
    const model::FmParams& params() const;
    const MetricsReport& report() const;

private:
    struct State;
    std::unique_ptr<State> s_;
};

// All stages plus artifacts; with repeats > 1 runs seeds seed .. seed+repeats-1
// and fills the mean/std fields. Artifacts come from the first run.
MetricsReport run_pipeline(const ExperimentConfig& cfg, const PipelineHooks& hooks = {});

// Lowercase hex SHA-256.
std::string sha256_hex(const std::string& data);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace fmg::harness
