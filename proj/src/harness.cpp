#include "fmg/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "fmg/metrics.hpp"

namespace fmg::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double number_from(const json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

std::string hex(const unsigned char* data, unsigned len) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned i = 0; i < len; ++i) {
        out.push_back(digits[data[i] >> 4]);
        out.push_back(digits[data[i] & 0xF]);
    }
    return out;
}

void write_json(const fs::path& path, const json& j) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ResourceError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

// Write to a sibling temp file, then rename, so a crash never leaves a
// truncated cache entry behind.
template <class Writer>
void atomic_write(const fs::path& final_path, Writer&& write) {
    const fs::path tmp = final_path.string() + ".tmp";
    write(tmp);
    fs::rename(tmp, final_path);
}

}  // namespace

std::string sha256_hex(const std::string& data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw ResourceError("SHA-256 digest failed");
    return hex(md, len);
}

std::string file_sha256(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ResourceError("cannot read " + path.string());
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw ResourceError("SHA-256 init failed");
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    return hex(md, len);
}

// ---- group selection ------------------------------------------------------------------

std::string GroupReport::label() const { return metagraph + (side == model::Side::user ? "/user" : "/item"); }

std::vector<GroupReport> report_selected(const model::FmParams& params, const model::GroupLayout& layout,
                                         double threshold) {
    if (!(threshold >= 0)) throw ArgumentError("selection threshold must be nonnegative");
    const model::GroupNorms norms = model::group_norms(params, layout);
    std::vector<GroupReport> out;
    for (std::size_t g = 0; g < layout.groups.size(); ++g) {
        GroupReport r;
        r.metagraph = layout.groups[g].metagraph;
        r.side = layout.groups[g].side;
        r.w_norm = norms.w(static_cast<Index>(g));
        r.v_norm = norms.v(static_cast<Index>(g));
        r.w_selected = r.w_norm > threshold;
        r.v_selected = r.v_norm > threshold;
        out.push_back(std::move(r));
    }
    return out;
}

// ---- configuration ------------------------------------------------------------------

std::string to_string(FeatureMethod m) { return m == FeatureMethod::mf ? "mf" : "nnr"; }

FeatureMethod feature_method_from_string(const std::string& s) {
    if (s == "mf") return FeatureMethod::mf;
    if (s == "nnr") return FeatureMethod::nnr;
    throw ArgumentError("unknown feature method '" + s + "' (expected mf or nnr)");
}

std::vector<double> default_lambda_grid() { return {0.0, 1e-3, 5e-3, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0}; }

ExperimentConfig ExperimentConfig::from_json(const json& j, const fs::path& base_dir) {
    auto resolve = [&](const std::string& p) -> fs::path {
        if (p.empty()) return {};
        fs::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    };
    ExperimentConfig c;
    try {
        c.schema = resolve(j.at("schema").get<std::string>());
        c.metagraphs = resolve(j.at("metagraphs").get<std::string>());
        c.use_metagraphs = j.value("use_metagraphs", c.use_metagraphs);
        if (j.contains("similarity")) {
            const json& s = j.at("similarity");
            c.magnitude_floor = s.value("magnitude_floor", c.magnitude_floor);
            c.log_scale = s.value("log_scale", c.log_scale);
            c.strict_direction = s.value("strict_direction", c.strict_direction);
        }
        if (j.contains("features")) {
            const json& f = j.at("features");
            if (f.contains("method")) c.method = feature_method_from_string(f.at("method").get<std::string>());
            c.rank = f.value("rank", c.rank);
            c.mu = f.value("mu", c.mu);
            c.factor_max_iter = f.value("max_iter", c.factor_max_iter);
            c.factor_tol = f.value("tol", c.factor_tol);
        }
        if (j.contains("fm")) {
            const json& f = j.at("fm");
            c.k = f.value("k", c.k);
            if (f.contains("lambdas")) c.lambdas = f.at("lambdas").get<std::vector<double>>();
            if (f.contains("lambda")) c.lambdas = {f.at("lambda").get<double>()};
            if (f.contains("mode")) c.mode = model::reg_mode_from_string(f.at("mode").get<std::string>());
            c.warm_start = f.value("warm_start", c.warm_start);
            c.sqrt_width_weights = f.value("sqrt_width_weights", c.sqrt_width_weights);
            c.standardize = f.value("standardize", c.standardize);
            c.clip = f.value("clip", c.clip);
            c.select_threshold = f.value("select_threshold", c.select_threshold);
        }
        if (j.contains("solver")) c.solver = solvers::SolverConfig::from_json(j.at("solver"));
        if (j.contains("split")) {
            const json& s = j.at("split");
            c.split.train = s.value("train", c.split.train);
            c.split.valid = s.value("valid", c.split.valid);
            c.split.test = s.value("test", c.split.test);
        }
        c.seed = j.value("seed", c.seed);
        if (j.contains("out_dir")) c.out_dir = resolve(j.at("out_dir").get<std::string>());
        if (j.contains("cache_dir")) c.cache_dir = resolve(j.at("cache_dir").get<std::string>());
        c.repeats = j.value("repeats", c.repeats);
    } catch (const json::exception& e) {
        throw ParseError(std::string("experiment config: ") + e.what());
    }
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("config file not found: " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return from_json(j, path.parent_path());
}

json ExperimentConfig::to_json() const {
    return {{"schema", schema.string()},
            {"metagraphs", metagraphs.string()},
            {"use_metagraphs", use_metagraphs},
            {"similarity",
             {{"magnitude_floor", magnitude_floor}, {"log_scale", log_scale}, {"strict_direction", strict_direction}}},
            {"features",
             {{"method", to_string(method)},
              {"rank", rank},
              {"mu", mu},
              {"max_iter", factor_max_iter},
              {"tol", factor_tol}}},
            {"fm",
             {{"k", k},
              {"lambdas", lambdas},
              {"mode", model::to_string(mode)},
              {"warm_start", warm_start},
              {"sqrt_width_weights", sqrt_width_weights},
              {"standardize", standardize},
              {"clip", clip},
              {"select_threshold", select_threshold}}},
            {"solver", solver.to_json()},
            {"split", {{"train", split.train}, {"valid", split.valid}, {"test", split.test}}},
            {"seed", seed},
            {"out_dir", out_dir.string()},
            {"cache_dir", cache_dir.string()},
            {"repeats", repeats}};
}

void ExperimentConfig::validate() const {
    if (!fs::exists(schema)) throw ValidationError("schema file not found: " + schema.string());
    if (!fs::exists(metagraphs)) throw ValidationError("metagraph file not found: " + metagraphs.string());
    if (k < 1) throw ValidationError("K must be at least 1");
    if (rank < 1) throw ValidationError("feature rank F must be at least 1");
    if (!(mu >= 0)) throw ValidationError("mu must be nonnegative");
    if (lambdas.empty()) throw ValidationError("lambda list is empty");
    for (double l : lambdas)
        if (!(l >= 0) || !std::isfinite(l)) throw ValidationError("lambda must be a finite nonnegative number");
    if (repeats < 1) throw ValidationError("repeats must be at least 1");
    if (!(select_threshold >= 0)) throw ValidationError("selection threshold must be nonnegative");
    for (double f : {split.train, split.valid, split.test})
        if (!(f >= 0)) throw ValidationError("split fractions must be nonnegative");
    if (std::abs(split.train + split.valid + split.test - 1.0) > 1e-9)
        throw ValidationError("split fractions must sum to 1");
    if (!(split.train > 0)) throw ValidationError("training fraction must be positive");
    try {
        const Index n = solver.batch_size > 0 && solver.inner_steps > 0 ? solver.batch_size * solver.inner_steps
                                                                         : std::numeric_limits<Index>::max();
        solver.validate(n);
    } catch (const ArgumentError& e) {
        throw ValidationError(std::string("solver: ") + e.what());
    }
}

fs::path ExperimentConfig::resolved_cache_dir() const { return cache_dir.empty() ? out_dir / "cache" : cache_dir; }

// ---- report -----------------------------------------------------------------------------

namespace {

json groups_to_json(const std::vector<GroupReport>& groups) {
    json out = json::array();
    for (const GroupReport& g : groups)
        out.push_back({{"group", g.label()},
                       {"metagraph", g.metagraph},
                       {"side", g.side == model::Side::user ? "user" : "item"},
                       {"w_norm", g.w_norm},
                       {"v_norm", g.v_norm},
                       {"w_selected", g.w_selected},
                       {"v_selected", g.v_selected}});
    return out;
}

std::vector<GroupReport> groups_from_json(const json& j) {
    std::vector<GroupReport> out;
    for (const json& g : j) {
        GroupReport gr;
        gr.metagraph = g.at("metagraph").get<std::string>();
        gr.side = g.at("side").get<std::string>() == "user" ? model::Side::user : model::Side::item;
        gr.w_norm = g.at("w_norm").get<double>();
        gr.v_norm = g.at("v_norm").get<double>();
        gr.w_selected = g.at("w_selected").get<bool>();
        gr.v_selected = g.at("v_selected").get<bool>();
        out.push_back(std::move(gr));
    }
    return out;
}

}  // namespace

const StageTiming* MetricsReport::stage(const std::string& name) const {
    for (const StageTiming& s : stages)
        if (s.stage == name) return &s;
    return nullptr;
}

json MetricsReport::to_json(bool include_runtime) const {
    const json groups_j = groups_to_json(groups);
    json curve_j = json::array();
    for (const LambdaPoint& p : curve)
        curve_j.push_back({{"lambda", p.lambda},
                           {"groups", groups_to_json(p.groups)},
                           {"rmse_train", number_or_null(p.rmse_train)},
                           {"rmse_valid", number_or_null(p.rmse_valid)},
                           {"nnz", p.nnz},
                           {"objective", number_or_null(p.objective)},
                           {"iterations", p.iterations}});
    json j = {{"metagraphs", metagraphs},
              {"n", {{"train", n_train}, {"valid", n_valid}, {"test", n_test}}},
              {"rmse",
               {{"train", number_or_null(rmse_train)},
                {"valid", number_or_null(rmse_valid)},
                {"test", number_or_null(rmse_test)}}},
              {"nnz", nnz},
              {"lambda", lambda},
              {"groups", groups_j},
              {"curve", curve_j},
              {"repeats",
               {{"count", repeats},
                {"rmse_test", rmse_test_runs},
                {"mean", number_or_null(rmse_test_mean)},
                {"std", number_or_null(rmse_test_std)}}}};
    if (include_runtime) {
        json stages_j = json::array();
        for (const StageTiming& s : stages)
            stages_j.push_back({{"stage", s.stage},
                                {"seconds", s.seconds},
                                {"cache_hits", s.cache_hits},
                                {"cache_misses", s.cache_misses}});
        j["runtime"] = stages_j;
    }
    return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
    MetricsReport r;
    try {
        r.metagraphs = j.at("metagraphs").get<std::vector<std::string>>();
        r.n_train = j.at("n").at("train").get<std::size_t>();
        r.n_valid = j.at("n").at("valid").get<std::size_t>();
        r.n_test = j.at("n").at("test").get<std::size_t>();
        r.rmse_train = number_from(j.at("rmse").at("train"));
        r.rmse_valid = number_from(j.at("rmse").at("valid"));
        r.rmse_test = number_from(j.at("rmse").at("test"));
        r.nnz = j.at("nnz").get<double>();
        r.lambda = j.at("lambda").get<double>();
        r.groups = groups_from_json(j.at("groups"));
        for (const json& p : j.at("curve")) {
            LambdaPoint lp;
            lp.lambda = p.at("lambda").get<double>();
            lp.rmse_train = number_from(p.at("rmse_train"));
            lp.rmse_valid = number_from(p.at("rmse_valid"));
            lp.nnz = p.at("nnz").get<double>();
            lp.objective = number_from(p.at("objective"));
            lp.iterations = p.at("iterations").get<int>();
            lp.groups = groups_from_json(p.at("groups"));
            r.curve.push_back(lp);
        }
        const json& rep = j.at("repeats");
        r.repeats = rep.at("count").get<int>();
        r.rmse_test_runs = rep.at("rmse_test").get<std::vector<double>>();
        r.rmse_test_mean = number_from(rep.at("mean"));
        r.rmse_test_std = number_from(rep.at("std"));
        if (j.contains("runtime"))
            for (const json& s : j.at("runtime"))
                r.stages.push_back({s.at("stage").get<std::string>(), s.at("seconds").get<double>(),
                                    s.at("cache_hits").get<std::size_t>(), s.at("cache_misses").get<std::size_t>()});
    } catch (const json::exception& e) {
        throw ParseError(std::string("metrics report: ") + e.what());
    }
    return r;
}

bool MetricsReport::same_results(const MetricsReport& other) const { return to_json(false) == other.to_json(false); }

// ---- pipeline ------------------------------------------------------------------------------

namespace {

enum StageIndex { st_none, st_ingest, st_similarity, st_factorize, st_assemble, st_train, st_evaluate };

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Eigen::VectorXd clipped(Eigen::VectorXd pred, const std::optional<hin::RatingRange>& range) {
    if (range) pred = pred.cwiseMax(range->min).cwiseMin(range->max);
    return pred;
}

std::string format_key_number(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

struct Pipeline::State {
    ExperimentConfig cfg;
    PipelineHooks hooks;
    int done = st_none;
    std::string current;

    hin::HinSchema schema;
    hin::HinStore hin;
    hin::RatingSplit split;  // test values are zeroed
    Eigen::VectorXd sealed_test;
    std::string input_digest;
    std::vector<metagraph::MetagraphSpec> specs;
    std::vector<std::string> sim_keys;
    std::vector<metagraph::SimilarityMatrix> sims;
    std::vector<latent::FactorPair> factors;

    model::GroupLayout layout;
    model::FeatureTable train, valid, test;
    model::RegConfig reg;
    model::FmParams params;
    solvers::TrainTrace trace;
    bool have_model = false;

    MetricsReport report;

    std::optional<hin::RatingRange> clip_range() const {
        return cfg.clip ? std::optional<hin::RatingRange>(schema.rating_range) : std::nullopt;
    }

    const Eigen::VectorXd& test_labels() const {
        if (hooks.on_test_labels) hooks.on_test_labels(current);
        return sealed_test;
    }

    template <class Body>
    void run_stage(int index, const std::string& name, Body&& body) {
        if (done >= index) return;
        current = name;
        if (hooks.on_stage) hooks.on_stage(name);
        spdlog::info("stage {}", name);
        StageTiming timing{name};
        const auto t0 = std::chrono::steady_clock::now();
        try {
            body(timing);
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(name, e.what());
        }
        timing.seconds = seconds_since(t0);
        report.stages.push_back(timing);
        done = index;
    }

    // Runs job(i) for every metagraph concurrently and joins them all; the
    // first failure is rethrown tagged with its metagraph.
    template <class Job>
    void fan_out(Job&& job) {
        std::vector<std::future<void>> futures;
        for (std::size_t i = 0; i < specs.size(); ++i)
            futures.push_back(std::async(std::launch::async, [&job, i] { job(i); }));
        std::optional<StageError> first;
        for (std::size_t i = 0; i < futures.size(); ++i) {
            try {
                futures[i].get();
            } catch (const std::exception& e) {
                if (!first) first.emplace(current, specs[i].name + ": " + e.what());
            }
        }
        if (first) throw *first;
    }
};

Pipeline::Pipeline(ExperimentConfig cfg, PipelineHooks hooks) : s_(std::make_unique<State>()) {
    s_->cfg = std::move(cfg);
    s_->hooks = std::move(hooks);
}
Pipeline::~Pipeline() = default;
Pipeline::Pipeline(Pipeline&&) noexcept = default;

void Pipeline::ingest() {
    State& s = *s_;
    s.run_stage(st_ingest, "ingest", [&](StageTiming&) {
        s.cfg.validate();
        s.specs = metagraph::load_metagraphs(s.cfg.metagraphs);
        if (!s.cfg.use_metagraphs.empty()) {
            std::vector<metagraph::MetagraphSpec> chosen;
            for (const std::string& name : s.cfg.use_metagraphs) {
                auto it = std::find_if(s.specs.begin(), s.specs.end(),
                                       [&](const metagraph::MetagraphSpec& m) { return m.name == name; });
                if (it == s.specs.end())
                    throw ValidationError("metagraph '" + name + "' is not defined in " + s.cfg.metagraphs.string());
                chosen.push_back(*it);
            }
            s.specs = std::move(chosen);
        }
        if (s.specs.empty()) throw ValidationError("no metagraphs in " + s.cfg.metagraphs.string());

        s.schema = hin::HinSchema::load(s.cfg.schema);
        hin::IngestResult ingested = hin::ingest(s.schema);
        s.hin = std::move(ingested.hin);
        s.split = hin::split_ratings(ingested.ratings, s.cfg.split, s.cfg.seed);
        if (s.split.train.empty()) throw ValidationError("training split is empty");
        // Only training ratings may shape the rating relation.
        hin::set_rating_relation(s.hin, s.schema, s.split.train);
        s.hin.sync_shapes();
        const hin::ValidationReport vr = hin::validate(s.hin);
        for (const auto& issue : vr.issues)
            if (issue.severity == hin::Severity::warning) spdlog::warn("hin: {}", issue.message);
        if (vr.has_errors()) {
            std::string msg = "HIN validation failed:";
            for (const auto& issue : vr.issues)
                if (issue.severity == hin::Severity::error) msg += " " + issue.message + ";";
            throw ValidationError(msg);
        }

        s.sealed_test.resize(static_cast<Index>(s.split.test.size()));
        for (std::size_t i = 0; i < s.split.test.size(); ++i) {
            s.sealed_test(static_cast<Index>(i)) = s.split.test.triples[i].value;
            s.split.test.triples[i].value = 0.0;
        }

        std::string digest = "inputs/1\n" + file_sha256(s.cfg.schema) + "\n";
        for (const fs::path& f : s.schema.input_files()) digest += file_sha256(f) + "\n";
        digest += "split " + format_key_number(s.cfg.split.train) + " " + format_key_number(s.cfg.split.valid) +
                  " " + format_key_number(s.cfg.split.test) + " seed " + std::to_string(s.cfg.seed) + "\n";
        s.input_digest = sha256_hex(digest);

        s.report.metagraphs.clear();
        for (const auto& m : s.specs) s.report.metagraphs.push_back(m.name);
        s.report.n_train = s.split.train.size();
        s.report.n_valid = s.split.valid.size();
        s.report.n_test = s.split.test.size();
    });
}

void Pipeline::similarity() {
    ingest();
    State& s = *s_;
    s.run_stage(st_similarity, "similarity", [&](StageTiming& timing) {
        const fs::path cache = s.cfg.resolved_cache_dir();
        fs::create_directories(cache);
        const std::size_t n = s.specs.size();
        s.sims.assign(n, {});
        s.sim_keys.assign(n, {});
        std::vector<char> hit(n, 0);
        for (std::size_t i = 0; i < n; ++i)
            s.sim_keys[i] = sha256_hex("similarity/1\n" + s.input_digest + "\n" + metagraph::to_dsl(s.specs[i]) +
                                       "\nfloor " + format_key_number(s.cfg.magnitude_floor) + " log " +
                                       (s.cfg.log_scale ? "1" : "0") + " strict " +
                                       (s.cfg.strict_direction ? "1" : "0"));
        s.fan_out([&](std::size_t i) {
            const fs::path file = cache / ("sim-" + s.sim_keys[i] + ".txt");
            if (fs::exists(file)) {
                s.sims[i] = metagraph::read_similarity(file);
                hit[i] = 1;
                return;
            }
            metagraph::CompileOptions copts;
            copts.strict_direction = s.cfg.strict_direction;
            copts.source_type = s.schema.user_type;
            copts.sink_type = s.schema.item_type;
            const metagraph::ExecutionPlan plan = metagraph::compile_plan(s.specs[i], s.hin, copts);
            for (const auto& w : plan.warnings) spdlog::warn("{}: {}", s.specs[i].name, w);
            metagraph::ExecOptions eopts;
            eopts.magnitude_floor = s.cfg.magnitude_floor;
            eopts.log_scale = s.cfg.log_scale;
            s.sims[i] = metagraph::execute_plan(plan, s.hin, eopts);
            atomic_write(file, [&](const fs::path& tmp) { metagraph::write_similarity(tmp, s.sims[i]); });
        });
        for (char h : hit) (h ? timing.cache_hits : timing.cache_misses)++;
    });
}

void Pipeline::factorize() {
    similarity();
    State& s = *s_;
    s.run_stage(st_factorize, "factorize", [&](StageTiming& timing) {
        const fs::path cache = s.cfg.resolved_cache_dir();
        const std::size_t n = s.specs.size();
        s.factors.assign(n, {});
        std::vector<char> hit(n, 0);
        s.fan_out([&](std::size_t i) {
            const std::string key =
                sha256_hex("factors/1\n" + s.sim_keys[i] + "\n" + to_string(s.cfg.method) + " F " +
                           std::to_string(s.cfg.rank) + " mu " + format_key_number(s.cfg.mu) + " iter " +
                           std::to_string(s.cfg.factor_max_iter) + " tol " + format_key_number(s.cfg.factor_tol) +
                           " seed " + std::to_string(s.cfg.seed));
            const fs::path stem = cache / ("fac-" + key);
            if (fs::exists(stem.string() + ".U.txt") && fs::exists(stem.string() + ".B.txt")) {
                s.factors[i] = latent::read_factors(stem);
                hit[i] = 1;
                return;
            }
            const sparse::CsrMatrix& m = s.sims[i].matrix;
            latent::FactorPair fp;
            if (m.nnz() == 0) {
                spdlog::warn("{}: similarity matrix is empty; features are all zero", s.specs[i].name);
                fp.U = Eigen::MatrixXd::Zero(m.rows(), s.cfg.rank);
                fp.B = Eigen::MatrixXd::Zero(m.cols(), s.cfg.rank);
                fp.method = to_string(s.cfg.method);
            } else if (s.cfg.method == FeatureMethod::mf) {
                latent::MfOptions o;
                o.rank = s.cfg.rank;
                o.mu = s.cfg.mu;
                o.tol = s.cfg.factor_tol;
                o.max_iter = s.cfg.factor_max_iter;
                o.seed = s.cfg.seed;
                fp = latent::factorize_mf(latent::ObservedMatrix::from_similarity(m), o).factors;
            } else {
                latent::NnrOptions o;
                o.mu = s.cfg.mu;
                o.max_rank = s.cfg.rank;
                o.tol = s.cfg.factor_tol;
                o.max_iter = s.cfg.factor_max_iter;
                o.seed = s.cfg.seed;
                fp = latent::factorize_nnr(latent::ObservedMatrix::from_similarity(m), o).factors;
            }
            fp.metagraph = s.specs[i].name;
            // Write both files under temporary stems, then publish them.
            const fs::path tmp_stem = stem.string() + ".tmp";
            latent::write_factors(tmp_stem, fp);
            fs::rename(tmp_stem.string() + ".B.txt", stem.string() + ".B.txt");
            fs::rename(tmp_stem.string() + ".U.txt", stem.string() + ".U.txt");
            s.factors[i] = std::move(fp);
        });
        for (char h : hit) (h ? timing.cache_hits : timing.cache_misses)++;
    });
}

void Pipeline::assemble() {
    factorize();
    State& s = *s_;
    s.run_stage(st_assemble, "assemble", [&](StageTiming&) {
        s.train = model::assemble_features(s.factors, s.split.train, &s.layout);
        s.valid = model::assemble_features(s.factors, s.split.valid);
        s.test = model::assemble_features(s.factors, s.split.test);
        if (s.cfg.standardize) {
            const model::Standardizer st = model::Standardizer::fit(s.train);
            st.apply(s.train);
            st.apply(s.valid);
            st.apply(s.test);
        }
    });
}

void Pipeline::train() {
    assemble();
    State& s = *s_;
    s.run_stage(st_train, "train", [&](StageTiming&) {
        solvers::SolverConfig sc = s.cfg.solver;
        sc.seed = s.cfg.seed;
        const bool has_valid = s.valid.size() > 0;
        const auto range = s.clip_range();
        s.report.curve.clear();
        double best = std::numeric_limits<double>::infinity();
        std::optional<model::FmParams> init;
        for (double lambda : s.cfg.lambdas) {
            const model::RegConfig reg =
                model::RegConfig::uniform(s.layout, s.cfg.mode, lambda, s.cfg.sqrt_width_weights);
            const solvers::Problem pr{s.train, s.layout, reg, has_valid ? &s.valid : nullptr, range};
            solvers::TrainResult r = solvers::train(pr, sc, s.cfg.k, init);
            if (s.cfg.warm_start) init = r.params;
            LambdaPoint p;
            p.lambda = lambda;
            p.rmse_train = metrics::rmse(clipped(model::predict_batch(r.params, s.train.X), range), s.train.y);
            p.rmse_valid = has_valid
                               ? metrics::rmse(clipped(model::predict_batch(r.params, s.valid.X), range), s.valid.y)
                               : std::numeric_limits<double>::quiet_NaN();
            p.nnz = metrics::nnz_ratio(r.params);
            p.objective = r.trace.records.back().objective;
            p.iterations = r.iterations;
            p.groups = report_selected(r.params, s.layout, s.cfg.select_threshold);
            spdlog::info("lambda {:g}: train rmse {:.4f}, valid rmse {:.4f}, nnz {:.3f}, {} iterations", lambda,
                         p.rmse_train, p.rmse_valid, p.nnz, p.iterations);
            s.report.curve.push_back(p);
            const double score = has_valid ? p.rmse_valid : p.rmse_train;
            if (score < best) {
                best = score;
                s.params = std::move(r.params);
                s.reg = reg;
                s.trace = std::move(r.trace);
                s.report.lambda = lambda;
                s.report.rmse_train = p.rmse_train;
                s.report.rmse_valid = p.rmse_valid;
                s.report.nnz = p.nnz;
            }
        }
        s.have_model = true;
    });
}

void Pipeline::load_model(const fs::path& dir) {
    assemble();
    State& s = *s_;
    const model::ModelFile m = model::read_model(dir / "model.json");
    if (!(m.layout == s.layout))
        throw StageError("evaluate", "model feature layout does not match the configured metagraphs and rank");
    s.params = m.params;
    s.reg = m.reg;
    s.have_model = true;
    s.done = std::max(s.done, static_cast<int>(st_train));
    const auto range = s.clip_range();
    s.report.rmse_train = metrics::rmse(clipped(model::predict_batch(s.params, s.train.X), range), s.train.y);
    s.report.rmse_valid = s.valid.size() > 0
                              ? metrics::rmse(clipped(model::predict_batch(s.params, s.valid.X), range), s.valid.y)
                              : std::numeric_limits<double>::quiet_NaN();
    s.report.nnz = metrics::nnz_ratio(s.params);
    s.report.lambda = s.reg.lambda_w;
}

void Pipeline::evaluate() {
    if (!s_->have_model) train();
    State& s = *s_;
    s.run_stage(st_evaluate, "evaluate", [&](StageTiming&) {
        s.report.groups = report_selected(s.params, s.layout, s.cfg.select_threshold);
        if (s.test.size() == 0) {
            s.report.rmse_test = std::numeric_limits<double>::quiet_NaN();
            return;
        }
        const Eigen::VectorXd pred = clipped(model::predict_batch(s.params, s.test.X), s.clip_range());
        s.report.rmse_test = metrics::rmse(pred, s.test_labels());
        s.report.rmse_test_runs = {s.report.rmse_test};
        s.report.rmse_test_mean = s.report.rmse_test;
        s.report.rmse_test_std = 0.0;
    });
}

void Pipeline::write_ingest_summary() const {
    const State& s = *s_;
    json entities = json::object();
    for (const auto& [name, set] : s.hin.entities) entities[name] = set.count();
    json relations = json::object();
    for (const auto& [name, rel] : s.hin.relations)
        relations[name] = {{"head", rel.decl.head_type},
                           {"tail", rel.decl.tail_type},
                           {"nnz", rel.adjacency.entries.size()}};
    write_json(s.cfg.out_dir / "ingest.json",
               {{"entities", entities},
                {"relations", relations},
                {"ratings", {{"train", s.split.train.size()}, {"valid", s.split.valid.size()}, {"test", s.split.test.size()}}},
                {"metagraphs", s.report.metagraphs},
                {"validation", hin::to_json(hin::validate(s.hin))}});
}

void Pipeline::write_similarities() const {
    const fs::path dir = s_->cfg.out_dir / "similarity";
    fs::create_directories(dir);
    for (const auto& sim : s_->sims) metagraph::write_similarity(dir / (sim.metagraph + ".txt"), sim);
}

void Pipeline::write_factors() const {
    const fs::path dir = s_->cfg.out_dir / "factors";
    fs::create_directories(dir);
    for (const auto& f : s_->factors) latent::write_factors(dir / f.metagraph, f);
}

void Pipeline::write_model() const {
    const State& s = *s_;
    fs::create_directories(s.cfg.out_dir);
    model::write_model(s.cfg.out_dir / "model.json", {s.layout, s.reg, s.params});
    if (!s.trace.records.empty()) {
        std::ofstream out(s.cfg.out_dir / "trace.jsonl");
        s.trace.write_jsonl(out);
    }
    write_json(s.cfg.out_dir / "curve.json", s.report.to_json(false).at("curve"));
}

void Pipeline::write_report() const { write_json(s_->cfg.out_dir / "report.json", s_->report.to_json(true)); }

const ExperimentConfig& Pipeline::config() const { return s_->cfg; }
const hin::HinStore& Pipeline::hin() const { return s_->hin; }
const std::vector<metagraph::MetagraphSpec>& Pipeline::metagraphs() const { return s_->specs; }
const std::vector<metagraph::SimilarityMatrix>& Pipeline::similarities() const { return s_->sims; }
const std::vector<latent::FactorPair>& Pipeline::factors() const { return s_->factors; }
const model::GroupLayout& Pipeline::layout() const { return s_->layout; }
const model::FeatureTable& Pipeline::train_table() const { return s_->train; }
const model::FeatureTable& Pipeline::valid_table() const { return s_->valid; }
const model::FmParams& Pipeline::params() const { return s_->params; }
const MetricsReport& Pipeline::report() const { return s_->report; }

MetricsReport run_pipeline(const ExperimentConfig& cfg, const PipelineHooks& hooks) {
    if (cfg.repeats < 1) throw StageError("ingest", "repeats must be at least 1");
    MetricsReport first;
    std::vector<double> runs;
    for (int r = 0; r < cfg.repeats; ++r) {
        ExperimentConfig c = cfg;
        c.seed = cfg.seed + static_cast<std::uint64_t>(r);
        Pipeline p(c, hooks);
        p.evaluate();
        if (r == 0) {
            p.write_ingest_summary();
            p.write_similarities();
            p.write_factors();
            p.write_model();
            first = p.report();
        }
        runs.push_back(p.report().rmse_test);
    }
    first.repeats = cfg.repeats;
    first.rmse_test_runs = runs;
    const double n = static_cast<double>(runs.size());
    first.rmse_test_mean = std::accumulate(runs.begin(), runs.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : runs) ss += (v - first.rmse_test_mean) * (v - first.rmse_test_mean);
    first.rmse_test_std = runs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    write_json(cfg.out_dir / "report.json", first.to_json(true));
    return first;
}

}  // namespace fmg::harness
