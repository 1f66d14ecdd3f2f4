#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fmg/hin.hpp"
#include "fmg/latent.hpp"

namespace fmg::model {

using Index = std::int64_t;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Side { user, item };

struct Group {
    std::string metagraph;
    Side side = Side::user;
    Index begin = 0;
    Index end = 0;

    Index width() const { return end - begin; }
    std::string label() const;  // "M3/user"
    bool operator==(const Group&) const = default;
};

// Feature blocks: user blocks of every metagraph, then item blocks in the
// same metagraph order.
struct GroupLayout {
    std::vector<Group> groups;
    Index d = 0;

    static GroupLayout from_ranks(const std::vector<std::string>& metagraphs, const std::vector<Index>& ranks);
    std::size_t metagraph_count() const { return groups.size() / 2; }
    void validate() const;
    bool operator==(const GroupLayout&) const = default;
};

struct FeatureTable {
    RowMatrix X;  // N x d
    Eigen::VectorXd y;
    std::vector<Index> user;
    std::vector<Index> item;

    Index size() const { return X.rows(); }
    Index width() const { return X.cols(); }
};

// Rows follow the rating order. Users or items outside a factor's row range
// are an error; rows of zeros stand for entities absent from a similarity.
FeatureTable assemble_features(const std::vector<latent::FactorPair>& pairs, const hin::RatingSet& ratings,
                               GroupLayout* layout = nullptr);
GroupLayout layout_of(const std::vector<latent::FactorPair>& pairs);

struct FmParams {
    double b = 0.0;
    Eigen::VectorXd w;
    Eigen::MatrixXd V;  // d x K

    static FmParams zeros(Index d, Index k);
    Index d() const { return w.size(); }
    Index k() const { return V.cols(); }

    FmParams& operator+=(const FmParams& o);
    FmParams& operator-=(const FmParams& o);
    FmParams& operator*=(double s);
    double squared_norm() const;  // includes b
    bool all_finite() const;
    bool operator==(const FmParams&) const;
};

FmParams operator+(FmParams a, const FmParams& b);
FmParams operator-(FmParams a, const FmParams& b);
FmParams operator*(double s, FmParams a);

enum class RegMode { convex, lsp };

struct RegConfig {
    RegMode mode = RegMode::convex;
    double lambda_w = 0.0;  // first order
    double lambda_v = 0.0;  // second order
    Eigen::VectorXd eta_w;  // one weight per group
    Eigen::VectorXd eta_v;

    // lambda_w = lambda_v = lambda; eta = 1, or sqrt(group width).
    static RegConfig uniform(const GroupLayout& layout, RegMode mode, double lambda, bool sqrt_width = false);
    // limit of kappa'(t) as t -> 0+; 1 for both |t| and log(1 + t)
    double kappa0() const { return 1.0; }
    void validate(const GroupLayout& layout) const;
};

std::string to_string(RegMode mode);
RegMode reg_mode_from_string(const std::string& s);

// ---- prediction and loss ------------------------------------------------------

double predict(const FmParams& p, const Eigen::Ref<const Eigen::VectorXd>& x);
Eigen::VectorXd predict_batch(const FmParams& p, const Eigen::Ref<const RowMatrix>& X);

// (1/N) sum (y - yhat)^2
double mse_loss(const FmParams& p, const FeatureTable& t);

// ---- regularizers ---------------------------------------------------------------

struct GroupNorms {
    Eigen::VectorXd w;  // ||w^l||_2
    Eigen::VectorXd v;  // ||V^l||_F
};
GroupNorms group_norms(const FmParams& p, const GroupLayout& layout);

// lambda_w sum eta_l kappa(||w^l||) + lambda_v sum eta_l kappa(||V^l||)
double reg_value(const FmParams& p, const GroupLayout& layout, const RegConfig& cfg);
// Same with kappa(t) = t, i.e. the group lasso part kept in the prox.
double convex_reg_value(const FmParams& p, const GroupLayout& layout, const RegConfig& cfg);
// g = reg_value - kappa0 * convex_reg_value; zero in convex mode.
double g_value(const FmParams& p, const GroupLayout& layout, const RegConfig& cfg);

// Gradient of (1/|B|) sum_{n in B} (y_n - yhat_n)^2 + g. An empty batch
// means every row.
FmParams augmented_grad(const FmParams& p, const GroupLayout& layout, const RegConfig& cfg, const FeatureTable& t,
                        std::span<const Index> batch = {});
// Same quantity on an already gathered batch.
FmParams augmented_grad_rows(const FmParams& p, const GroupLayout& layout, const RegConfig& cfg,
                             const Eigen::Ref<const RowMatrix>& X, const Eigen::Ref<const Eigen::VectorXd>& y);

// ---- objectives -------------------------------------------------------------------

// h = loss + reg_value
double objective(const FmParams& p, const FeatureTable& t, const GroupLayout& layout, const RegConfig& cfg);
// l-bar = loss + g
double smooth_objective(const FmParams& p, const FeatureTable& t, const GroupLayout& layout, const RegConfig& cfg);
// h-bar = l-bar + kappa0 * convex_reg_value; equal to h
double split_objective(const FmParams& p, const FeatureTable& t, const GroupLayout& layout, const RegConfig& cfg);

// ---- proximal operator -------------------------------------------------------------

// Per group: max(1 - threshold / ||z_g||, 0) z_g. Norms are l2 on vector
// blocks and Frobenius on matrix row blocks.
Eigen::VectorXd prox_group(const Eigen::VectorXd& z, const GroupLayout& layout, const Eigen::VectorXd& thresholds);
Eigen::MatrixXd prox_group(const Eigen::MatrixXd& z, const GroupLayout& layout, const Eigen::VectorXd& thresholds);

// prox of step * kappa0 * (lambda_w phi(w) + lambda_v phi(V)); b untouched.
FmParams prox_params(const FmParams& z, const GroupLayout& layout, const RegConfig& cfg, double step);

// ---- feature scaling -----------------------------------------------------------

// Per-column z-scoring fitted on one table and applied unchanged elsewhere.
struct Standardizer {
    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd scale;

    static Standardizer fit(const FeatureTable& t);
    void apply(FeatureTable& t) const;
};

// ---- persistence --------------------------------------------------------------------

nlohmann::json layout_to_json(const GroupLayout& layout);
GroupLayout layout_from_json(const nlohmann::json& j);
nlohmann::json reg_to_json(const RegConfig& cfg);
RegConfig reg_from_json(const nlohmann::json& j);

struct ModelFile {
    GroupLayout layout;
    RegConfig reg;
    FmParams params;
};

void write_model(const std::filesystem::path& path, const ModelFile& m);
ModelFile read_model(const std::filesystem::path& path);

}  // namespace fmg::model
