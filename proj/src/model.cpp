#include "fmg/model.hpp"

#include <cmath>
#include <fstream>

#include "fmg/error.hpp"

namespace fmg::model {

namespace {

double kappa(RegMode mode, double t) { return mode == RegMode::lsp ? std::log1p(t) : t; }

// kappa'(t) - kappa0 for t > 0
double kappa_excess_slope(RegMode mode, double t) { return mode == RegMode::lsp ? 1.0 / (1.0 + t) - 1.0 : 0.0; }

void check_params(const FmParams& p, const GroupLayout& layout) {
    if (p.w.size() != layout.d || p.V.rows() != layout.d)
        throw ArgumentError("parameter width " + std::to_string(p.w.size()) + " does not match layout width " +
                            std::to_string(layout.d));
}

// Pairwise term and its per-factor sums for every row.
struct BatchEval {
    Eigen::VectorXd pred;
    Eigen::MatrixXd q;  // X V
};

BatchEval evaluate(const FmParams& p, const Eigen::Ref<const RowMatrix>& X) {
    if (X.cols() != p.w.size()) throw ArgumentError("feature width does not match parameters");
    BatchEval ev;
    ev.q = X * p.V;
    const Eigen::VectorXd sq_sum = ev.q.rowwise().squaredNorm();
    const Eigen::VectorXd diag = X.array().square().matrix() * p.V.rowwise().squaredNorm();
    ev.pred = (X * p.w).array() + p.b + 0.5 * (sq_sum - diag).array();
    return ev;
}

}  // namespace

std::string Group::label() const { return metagraph + (side == Side::user ? "/user" : "/item"); }

GroupLayout GroupLayout::from_ranks(const std::vector<std::string>& metagraphs, const std::vector<Index>& ranks) {
    if (metagraphs.size() != ranks.size()) throw ArgumentError("one rank per metagraph is required");
    GroupLayout layout;
    for (Side side : {Side::user, Side::item})
        for (std::size_t l = 0; l < metagraphs.size(); ++l) {
            if (ranks[l] < 1) throw ArgumentError("metagraph " + metagraphs[l] + " has rank < 1");
            layout.groups.push_back({metagraphs[l], side, layout.d, layout.d + ranks[l]});
            layout.d += ranks[l];
        }
    return layout;
}

void GroupLayout::validate() const {
    Index at = 0;
    for (const Group& g : groups) {
        if (g.begin != at || g.end <= g.begin) throw ValidationError("layout groups must be contiguous and non-empty");
        at = g.end;
    }
    if (at != d) throw ValidationError("layout groups do not cover the feature width");
    if (groups.size() % 2 != 0) throw ValidationError("layout needs a user and an item group per metagraph");
    const std::size_t L = groups.size() / 2;
    for (std::size_t l = 0; l < L; ++l) {
        const Group& u = groups[l];
        const Group& it = groups[l + L];
        if (u.side != Side::user || it.side != Side::item || u.metagraph != it.metagraph || u.width() != it.width())
            throw ValidationError("layout must list user blocks then matching item blocks");
    }
}

GroupLayout layout_of(const std::vector<latent::FactorPair>& pairs) {
    std::vector<std::string> names;
    std::vector<Index> ranks;
    for (const auto& p : pairs) {
        names.push_back(p.metagraph);
        ranks.push_back(p.rank());
    }
    return GroupLayout::from_ranks(names, ranks);
}

FeatureTable assemble_features(const std::vector<latent::FactorPair>& pairs, const hin::RatingSet& ratings,
                               GroupLayout* layout_out) {
    const GroupLayout layout = layout_of(pairs);
    for (const auto& p : pairs) {
        if (p.U.cols() != p.B.cols()) throw ArgumentError("factor pair " + p.metagraph + " has mismatched ranks");
        if (p.U.rows() != pairs.front().U.rows() || p.B.rows() != pairs.front().B.rows())
            throw ArgumentError("factor pairs do not share the same user/item entity sets");
    }
    const std::size_t L = pairs.size();
    FeatureTable t;
    const auto n = static_cast<Index>(ratings.size());
    t.X.resize(n, layout.d);
    t.y.resize(n);
    t.user.reserve(ratings.size());
    t.item.reserve(ratings.size());
    for (Index r = 0; r < n; ++r) {
        const hin::Rating& rt = ratings.triples[static_cast<std::size_t>(r)];
        for (std::size_t l = 0; l < L; ++l) {
            const auto& p = pairs[l];
            if (rt.user < 0 || rt.user >= p.U.rows() || rt.item < 0 || rt.item >= p.B.rows())
                throw ArgumentError("rating (" + std::to_string(rt.user) + ", " + std::to_string(rt.item) +
                                    ") is outside the factor matrices of " + p.metagraph);
            const Group& gu = layout.groups[l];
            const Group& gi = layout.groups[l + L];
            t.X.row(r).segment(gu.begin, gu.width()) = p.U.row(rt.user);
            t.X.row(r).segment(gi.begin, gi.width()) = p.B.row(rt.item);
        }
        t.y[r] = rt.value;
        t.user.push_back(rt.user);
        t.item.push_back(rt.item);
    }
    if (layout_out) *layout_out = layout;
    return t;
}

// ---- parameters ---------------------------------------------------------------

FmParams FmParams::zeros(Index d, Index k) {
    if (k < 1) throw ArgumentError("factor rank K must be at least 1");
    return {0.0, Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Zero(d, k)};
}

FmParams& FmParams::operator+=(const FmParams& o) {
    b += o.b;
    w += o.w;
    V += o.V;
    return *this;
}

FmParams& FmParams::operator-=(const FmParams& o) {
    b -= o.b;
    w -= o.w;
    V -= o.V;
    return *this;
}

FmParams& FmParams::operator*=(double s) {
    b *= s;
    w *= s;
    V *= s;
    return *this;
}

double FmParams::squared_norm() const { return b * b + w.squaredNorm() + V.squaredNorm(); }

bool FmParams::all_finite() const { return std::isfinite(b) && w.allFinite() && V.allFinite(); }

bool FmParams::operator==(const FmParams& o) const {
    return b == o.b && w.size() == o.w.size() && V.rows() == o.V.rows() && V.cols() == o.V.cols() && w == o.w &&
           V == o.V;
}

FmParams operator+(FmParams a, const FmParams& b) { return a += b; }
FmParams operator-(FmParams a, const FmParams& b) { return a -= b; }
FmParams operator*(double s, FmParams a) { return a *= s; }

RegConfig RegConfig::uniform(const GroupLayout& layout, RegMode mode, double lambda, bool sqrt_width) {
    RegConfig cfg;
    cfg.mode = mode;
    cfg.lambda_w = cfg.lambda_v = lambda;
    const auto G = static_cast<Index>(layout.groups.size());
    cfg.eta_w.resize(G);
    for (Index g = 0; g < G; ++g)
        cfg.eta_w[g] = sqrt_width ? std::sqrt(static_cast<double>(layout.groups[static_cast<std::size_t>(g)].width())) : 1.0;
    cfg.eta_v = cfg.eta_w;
    return cfg;
}

void RegConfig::validate(const GroupLayout& layout) const {
    if (!(lambda_w >= 0) || !(lambda_v >= 0)) throw ArgumentError("regularization weights must be nonnegative");
    const auto G = static_cast<Index>(layout.groups.size());
    if (eta_w.size() != G || eta_v.size() != G) throw ArgumentError("one group weight per layout group is required");
    if ((eta_w.array() <= 0).any() || (eta_v.array() <= 0).any()) throw ArgumentError("group weights must be positive");
}

std::string to_string(RegMode mode) { return mode == RegMode::lsp ? "lsp" : "convex"; }

RegMode reg_mode_from_string(const std::string& s) {
    if (s == "convex") return RegMode::convex;
    if (s == "lsp") return RegMode::lsp;
    throw ArgumentError("unknown regularizer mode '" + s + "' (expected convex or lsp)");
}

// ---- prediction ----------------------------------------------------------------

double predict(const FmParams& p, const Eigen::Ref<const Eigen::VectorXd>& x) {
    if (x.size() != p.w.size()) throw ArgumentError("feature width does not match parameters");
    const Eigen::RowVectorXd q = x.transpose() * p.V;
    const double diag = x.array().square().matrix().dot(p.V.rowwise().squaredNorm());
    return p.b + p.w.dot(x) + 0.5 * (q.squaredNorm() - diag);
}

Eigen::VectorXd predict_batch(const FmParams& p, const Eigen::Ref<const RowMatrix>& X) { return evaluate(p, X).pred; }

double mse_loss(const FmParams& p, const FeatureTable& t) {
    if (t.size() == 0) throw ArgumentError("mean square loss of an empty table");
    return (predict_batch(p, t.X) - t.y).squaredNorm() / static_cast<double>(t.size());
}

// ---- regularizers ----------------------------------------------------------------

GroupNorms group_norms(const FmParams& p, const GroupLayout& layout) {
    check_params(p, layout);
    const auto G = static_cast<Index>(layout.groups.size());
    GroupNorms n{Eigen::VectorXd(G), Eigen::VectorXd(G)};
    for (Index g = 0; g < G; ++g) {
        const Group& grp = layout.groups[static_cast<std::size_t>(g)];
        n.w[g] = p.w.segment(grp.begin, grp.width()).norm();
        n.v[g] = p.V.middleRows(grp.begin, grp.width()).norm();
    }
    return n;
}

double reg_value(const FmParams& p, const GroupLayout& layout, const RegConfig& cfg) {
    const GroupNorms n = group_norms(p, layout);
    double rw = 0, rv = 0;
    for (Index g = 0; g < n.w.size(); ++g) {
        rw += cfg.eta_w[g] * kappa(cfg.mode, n.w[g]);
        rv += cfg.eta_v[g] * kappa(cfg.mode, n.v[g]);
    }
    return cfg.lambda_w * rw + cfg.lambda_v * rv;
}

double convex_reg_value(const FmParams& p, const GroupLayout& layout, const RegConfig& cfg) {
    const GroupNorms n = group_norms(p, layout);
    return cfg.lambda_w * cfg.eta_w.dot(n.w) + cfg.lambda_v * cfg.eta_v.dot(n.v);
}

double g_value(const FmParams& p, const GroupLayout& layout, const RegConfig& cfg) {
    if (cfg.mode == RegMode::convex) return 0.0;
    const GroupNorms n = group_norms(p, layout);
    double gw = 0, gv = 0;
    for (Index g = 0; g < n.w.size(); ++g) {
        gw += cfg.eta_w[g] * (kappa(cfg.mode, n.w[g]) - cfg.kappa0() * n.w[g]);
        gv += cfg.eta_v[g] * (kappa(cfg.mode, n.v[g]) - cfg.kappa0() * n.v[g]);
    }
    return cfg.lambda_w * gw + cfg.lambda_v * gv;
}

FmParams augmented_grad_rows(const FmParams& p, const GroupLayout& layout, const RegConfig& cfg,
                             const Eigen::Ref<const RowMatrix>& X, const Eigen::Ref<const Eigen::VectorXd>& y) {
    check_params(p, layout);
    if (X.rows() == 0) throw ArgumentError("gradient of an empty batch");
    const BatchEval ev = evaluate(p, X);
    const Eigen::VectorXd r = (2.0 / static_cast<double>(X.rows())) * (ev.pred - y);

    FmParams grad;
    grad.b = r.sum();
    grad.w = X.transpose() * r;
    const Eigen::VectorXd x2r = X.array().square().matrix().transpose() * r;
    grad.V = X.transpose() * (ev.q.array().colwise() * r.array()).matrix() - (p.V.array().colwise() * x2r.array()).matrix();

    if (cfg.mode != RegMode::convex) {
        for (std::size_t gi = 0; gi < layout.groups.size(); ++gi) {
            const Group& grp = layout.groups[gi];
            const auto g = static_cast<Index>(gi);
            const double tw = p.w.segment(grp.begin, grp.width()).norm();
            if (tw > 0)
                grad.w.segment(grp.begin, grp.width()) += cfg.lambda_w * cfg.eta_w[g] *
                                                          kappa_excess_slope(cfg.mode, tw) / tw *
                                                          p.w.segment(grp.begin, grp.width());
            const double tv = p.V.middleRows(grp.begin, grp.width()).norm();
            if (tv > 0)
                grad.V.middleRows(grp.begin, grp.width()) += cfg.lambda_v * cfg.eta_v[g] *
                                                             kappa_excess_slope(cfg.mode, tv) / tv *
                                                             p.V.middleRows(grp.begin, grp.width());
        }
    }
    return grad;
}

FmParams augmented_grad(const FmParams& p, const GroupLayout& layout, const RegConfig& cfg, const FeatureTable& t,
                        std::span<const Index> batch) {
    if (batch.empty()) return augmented_grad_rows(p, layout, cfg, t.X, t.y);
    RowMatrix Xb(static_cast<Index>(batch.size()), t.width());
    Eigen::VectorXd yb(static_cast<Index>(batch.size()));
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Xb.row(static_cast<Index>(i)) = t.X.row(batch[i]);
        yb[static_cast<Index>(i)] = t.y[batch[i]];
    }
    return augmented_grad_rows(p, layout, cfg, Xb, yb);
}

// ---- objectives -------------------------------------------------------------------

double objective(const FmParams& p, const FeatureTable& t, const GroupLayout& layout, const RegConfig& cfg) {
    const double loss = t.size() == 0 ? 0.0 : mse_loss(p, t);
    return loss + reg_value(p, layout, cfg);
}

double smooth_objective(const FmParams& p, const FeatureTable& t, const GroupLayout& layout, const RegConfig& cfg) {
    const double loss = t.size() == 0 ? 0.0 : mse_loss(p, t);
    return loss + g_value(p, layout, cfg);
}

double split_objective(const FmParams& p, const FeatureTable& t, const GroupLayout& layout, const RegConfig& cfg) {
    return smooth_objective(p, t, layout, cfg) + cfg.kappa0() * convex_reg_value(p, layout, cfg);
}

// ---- prox ---------------------------------------------------------------------------

Eigen::VectorXd prox_group(const Eigen::VectorXd& z, const GroupLayout& layout, const Eigen::VectorXd& thresholds) {
    if (z.size() != layout.d) throw ArgumentError("prox input width does not match layout");
    Eigen::VectorXd out = z;
    for (std::size_t gi = 0; gi < layout.groups.size(); ++gi) {
        const Group& g = layout.groups[gi];
        const double tau = thresholds[static_cast<Index>(gi)];
        if (tau < 0) throw ArgumentError("prox threshold must be nonnegative");
        auto block = out.segment(g.begin, g.width());
        const double norm = block.norm();
        block *= norm > tau ? 1.0 - tau / norm : 0.0;
    }
    return out;
}

Eigen::MatrixXd prox_group(const Eigen::MatrixXd& z, const GroupLayout& layout, const Eigen::VectorXd& thresholds) {
    if (z.rows() != layout.d) throw ArgumentError("prox input width does not match layout");
    Eigen::MatrixXd out = z;
    for (std::size_t gi = 0; gi < layout.groups.size(); ++gi) {
        const Group& g = layout.groups[gi];
        const double tau = thresholds[static_cast<Index>(gi)];
        if (tau < 0) throw ArgumentError("prox threshold must be nonnegative");
        auto block = out.middleRows(g.begin, g.width());
        const double norm = block.norm();
        block *= norm > tau ? 1.0 - tau / norm : 0.0;
    }
    return out;
}

FmParams prox_params(const FmParams& z, const GroupLayout& layout, const RegConfig& cfg, double step) {
    FmParams out;
    out.b = z.b;
    out.w = prox_group(z.w, layout, (step * cfg.kappa0() * cfg.lambda_w) * cfg.eta_w);
    out.V = prox_group(z.V, layout, (step * cfg.kappa0() * cfg.lambda_v) * cfg.eta_v);
    return out;
}

// ---- scaling ---------------------------------------------------------------------------

Standardizer Standardizer::fit(const FeatureTable& t) {
    Standardizer s;
    const auto n = static_cast<double>(std::max<Index>(t.size(), 1));
    s.mean = t.X.colwise().sum() / n;
    s.scale = ((t.X.rowwise() - s.mean).array().square().colwise().sum() / n).sqrt();
    for (Index j = 0; j < s.scale.size(); ++j)
        if (s.scale[j] == 0.0) s.scale[j] = 1.0;
    return s;
}

void Standardizer::apply(FeatureTable& t) const {
    if (t.width() != mean.size()) throw ArgumentError("standardizer width does not match table");
    t.X = ((t.X.rowwise() - mean).array().rowwise() / scale.array()).matrix();
}

// ---- persistence ----------------------------------------------------------------------

nlohmann::json layout_to_json(const GroupLayout& layout) {
    nlohmann::json groups = nlohmann::json::array();
    for (const Group& g : layout.groups)
        groups.push_back({{"metagraph", g.metagraph},
                          {"side", g.side == Side::user ? "user" : "item"},
                          {"begin", g.begin},
                          {"end", g.end}});
    return {{"d", layout.d}, {"groups", groups}};
}

GroupLayout layout_from_json(const nlohmann::json& j) {
    GroupLayout layout;
    layout.d = j.at("d").get<Index>();
    for (const auto& g : j.at("groups")) {
        const std::string side = g.at("side").get<std::string>();
        if (side != "user" && side != "item") throw ValidationError("group side must be user or item");
        layout.groups.push_back({g.at("metagraph").get<std::string>(), side == "user" ? Side::user : Side::item,
                                 g.at("begin").get<Index>(), g.at("end").get<Index>()});
    }
    layout.validate();
    return layout;
}

namespace {

nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vec(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size()));
}

}  // namespace

nlohmann::json reg_to_json(const RegConfig& cfg) {
    return {{"mode", to_string(cfg.mode)},
            {"lambda_w", cfg.lambda_w},
            {"lambda_v", cfg.lambda_v},
            {"eta_w", vec_json(cfg.eta_w)},
            {"eta_v", vec_json(cfg.eta_v)}};
}

RegConfig reg_from_json(const nlohmann::json& j) {
    RegConfig cfg;
    cfg.mode = reg_mode_from_string(j.at("mode").get<std::string>());
    cfg.lambda_w = j.at("lambda_w").get<double>();
    cfg.lambda_v = j.at("lambda_v").get<double>();
    cfg.eta_w = json_vec(j.at("eta_w"));
    cfg.eta_v = json_vec(j.at("eta_v"));
    return cfg;
}

void write_model(const std::filesystem::path& path, const ModelFile& m) {
    check_params(m.params, m.layout);
    nlohmann::json V = nlohmann::json::array();
    for (Index i = 0; i < m.params.V.rows(); ++i) V.push_back(vec_json(m.params.V.row(i).transpose()));
    const nlohmann::json doc = {{"format", "fmg-model/1"},
                                {"d", m.layout.d},
                                {"K", m.params.k()},
                                {"layout", layout_to_json(m.layout)},
                                {"reg", reg_to_json(m.reg)},
                                {"b", m.params.b},
                                {"w", vec_json(m.params.w)},
                                {"V", V}};
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write model file " + path.string());
    out << doc.dump(1) << '\n';
}

ModelFile read_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot read model file " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    ModelFile m;
    m.layout = layout_from_json(doc.at("layout"));
    m.reg = reg_from_json(doc.at("reg"));
    const Index d = doc.at("d").get<Index>(), k = doc.at("K").get<Index>();
    m.params = FmParams::zeros(d, k);
    m.params.b = doc.at("b").get<double>();
    m.params.w = json_vec(doc.at("w"));
    const auto& V = doc.at("V");
    if (static_cast<Index>(V.size()) != d) throw ValidationError("model V has the wrong number of rows");
    for (Index i = 0; i < d; ++i) {
        const Eigen::VectorXd row = json_vec(V.at(static_cast<std::size_t>(i)));
        if (row.size() != k) throw ValidationError("model V row has the wrong width");
        m.params.V.row(i) = row.transpose();
    }
    check_params(m.params, m.layout);
    return m;
}

}  // namespace fmg::model
