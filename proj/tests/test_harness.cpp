#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <vector>

#include "fmg/error.hpp"
#include "fmg/harness.hpp"
#include "fmg/metrics.hpp"
#include "fmg/synth.hpp"

using namespace fmg;
using namespace fmg::harness;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    const fs::path p = fs::temp_directory_path() / ("fmg-" + tag + "-" + std::to_string(rng() % 1000000000));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Small planted dataset with a quick configuration.
ExperimentConfig small_config(const fs::path& dir) {
    synth::PlantedHinOptions o;
    o.users = 80;
    o.items = 60;
    o.metagraphs = 3;
    o.clusters = 3;
    o.ratings_per_user = 8;
    o.seed = 3;
    const synth::PlantedDataset ds = synth::write_planted_hin(dir / "data", o);
    ExperimentConfig cfg = ExperimentConfig::load(ds.config);
    cfg.rank = 3;
    cfg.k = 4;
    cfg.lambdas = {0.001, 0.05};
    cfg.solver.max_iter = 60;
    cfg.factor_max_iter = 300;
    cfg.out_dir = dir / "out";
    cfg.cache_dir = dir / "cache";
    return cfg;
}

}  // namespace

TEST_CASE("rmse examples") {
    const std::vector<double> y{1.0, 2.0, 3.0};
    CHECK(metrics::rmse(y, y) == 0.0);
    const std::vector<double> off{2.0, 3.0, 4.0};
    CHECK(metrics::rmse(off, y) == doctest::Approx(1.0).epsilon(1e-15));
    const std::vector<double> a{3.0, 4.0}, z{0.0, 0.0};
    CHECK(metrics::rmse(a, z) == doctest::Approx(std::sqrt(12.5)).epsilon(1e-15));
    CHECK(metrics::rmse(a, z) == doctest::Approx(3.5355).epsilon(1e-4));
    CHECK_THROWS_AS(metrics::rmse(std::vector<double>{}, std::vector<double>{}), ArgumentError);
    CHECK_THROWS_AS(metrics::rmse(a, y), ArgumentError);
}

TEST_CASE("nnz ratio examples") {
    model::FmParams p = model::FmParams::zeros(4, 2);
    p.b = 7.0;
    CHECK(metrics::nnz_ratio(p) == 0.0);
    p.w << 1, 0, -2, 0;
    p.V << 1, 0, 0, 1, 0, 0, 3, 4;
    CHECK(metrics::nnz_ratio(p) == 0.5);
    p.w.setConstant(1);
    p.V.setConstant(-1);
    CHECK(metrics::nnz_ratio(p) == 1.0);
    p.V(0, 0) = 1e-12;
    CHECK(metrics::nnz_ratio(p) == doctest::Approx(11.0 / 12.0));
}

TEST_CASE("report_selected flags exactly the nonzero groups") {
    const model::GroupLayout layout = model::GroupLayout::from_ranks({"M1", "M2", "M3"}, {2, 3, 2});
    model::FmParams p = model::FmParams::zeros(layout.d, 2);
    for (const auto& g : report_selected(p, layout, 0.0)) {
        CHECK_FALSE(g.w_selected);
        CHECK_FALSE(g.v_selected);
    }
    // w nonzero on group 0, V nonzero on group 1 only.
    p.w(layout.groups[0].begin) = 0.5;
    p.V.row(layout.groups[1].begin).setConstant(2.0);
    const auto r = report_selected(p, layout, 1e-8);
    REQUIRE(r.size() == 6);
    for (std::size_t g = 0; g < r.size(); ++g) {
        CAPTURE(g);
        CHECK(r[g].w_selected == (g == 0));
        CHECK(r[g].v_selected == (g == 1));
    }
    CHECK(r[0].label() == "M1/user");
    CHECK(r[3].label() == "M1/item");
    CHECK(r[1].v_norm == doctest::Approx(std::sqrt(8.0)));
    CHECK_THROWS_AS(report_selected(p, layout, -1.0), ArgumentError);
}

TEST_CASE("sha256 known vectors") {
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    const fs::path dir = fresh_dir("sha");
    std::ofstream(dir / "f.txt") << "abc";
    CHECK(file_sha256(dir / "f.txt") == sha256_hex("abc"));
    fs::remove_all(dir);
}

TEST_CASE("experiment config parsing and validation") {
    const fs::path dir = fresh_dir("cfg");
    ExperimentConfig cfg = small_config(dir);
    CHECK_NOTHROW(cfg.validate());
    const ExperimentConfig back = ExperimentConfig::from_json(cfg.to_json(), "/");
    CHECK(back.to_json() == cfg.to_json());

    ExperimentConfig bad = cfg;
    bad.k = 0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.lambdas = {0.1, -1.0};
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.schema = dir / "missing.json";
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.split = {0.5, 0.2, 0.2};
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.solver.batch_size = 10;
    bad.solver.inner_steps = 7;
    CHECK_NOTHROW(bad.validate());
    bad.solver.step = -1;
    CHECK_THROWS_AS(bad.validate(), ValidationError);

    CHECK_THROWS_AS(ExperimentConfig::from_json({{"schema", "x"}}, dir), ParseError);
    CHECK(ExperimentConfig::from_json({{"schema", "s.json"}, {"metagraphs", "m.dsl"}}, "/base").schema ==
          fs::path("/base/s.json"));
    CHECK(ExperimentConfig::from_json({{"schema", "s"}, {"metagraphs", "m"}}, "/").lambdas == default_lambda_grid());
    fs::remove_all(dir);
}

TEST_CASE("config without metagraphs is rejected") {
    const fs::path dir = fresh_dir("empty");
    ExperimentConfig cfg = small_config(dir);
    std::ofstream(dir / "none.dsl") << "# nothing here\n";
    cfg.metagraphs = dir / "none.dsl";
    cfg.use_metagraphs.clear();
    try {
        run_pipeline(cfg);
        FAIL("expected an error");
    } catch (const StageError& e) {
        CHECK(e.stage() == "ingest");
        CHECK(std::string(e.what()).find("no metagraphs") != std::string::npos);
    }
    cfg = small_config(dir);
    cfg.use_metagraphs = {"M1", "M404"};
    CHECK_THROWS_AS(run_pipeline(cfg), StageError);
    fs::remove_all(dir);
}

TEST_CASE("stage errors carry the stage name") {
    const fs::path dir = fresh_dir("stage");
    ExperimentConfig cfg = small_config(dir);
    std::ofstream(dir / "bad.dsl") << "X: U -[nosuch]- B\n";
    cfg.metagraphs = dir / "bad.dsl";
    cfg.use_metagraphs.clear();
    try {
        Pipeline p(cfg);
        p.evaluate();
        FAIL("expected an error");
    } catch (const StageError& e) {
        CHECK(e.stage() == "similarity");
        CHECK(std::string(e.what()).rfind("similarity: X:", 0) == 0);
    }

    cfg = small_config(dir);
    cfg.rank = 100;  // more than half the item count
    try {
        Pipeline p(cfg);
        p.factorize();
        FAIL("expected an error");
    } catch (const StageError& e) {
        CHECK(e.stage() == "factorize");
    }
    fs::remove_all(dir);
}

TEST_CASE("stages run in order and test labels are read only when evaluating") {
    const fs::path dir = fresh_dir("seal");
    const ExperimentConfig cfg = small_config(dir);
    std::vector<std::string> stages;
    std::vector<std::string> reads;
    PipelineHooks hooks;
    hooks.on_stage = [&](const std::string& s) { stages.push_back(s); };
    hooks.on_test_labels = [&](const std::string& s) { reads.push_back(s); };
    Pipeline p(cfg, hooks);
    p.train();
    CHECK(reads.empty());
    for (double y : p.train_table().y) CHECK(y >= 1.0);
    p.evaluate();
    CHECK(stages == std::vector<std::string>{"ingest", "similarity", "factorize", "assemble", "train", "evaluate"});
    REQUIRE(reads.size() == 1);
    CHECK(reads[0] == "evaluate");
    CHECK(p.report().rmse_test > 0);
    // The rating relation only holds training ratings.
    CHECK(p.hin().relation("rate").adjacency.entries.size() <= p.report().n_train);
    fs::remove_all(dir);
}

TEST_CASE("warm cache reproduces the report with cache hits") {
    const fs::path dir = fresh_dir("cache");
    const ExperimentConfig cfg = small_config(dir);
    const MetricsReport cold = run_pipeline(cfg);
    const MetricsReport warm = run_pipeline(cfg);
    CHECK(cold.same_results(warm));
    REQUIRE(cold.stage("similarity") != nullptr);
    CHECK(cold.stage("similarity")->cache_misses == 3);
    CHECK(cold.stage("similarity")->cache_hits == 0);
    CHECK(warm.stage("similarity")->cache_hits == 3);
    CHECK(warm.stage("similarity")->cache_misses == 0);
    CHECK(warm.stage("factorize")->cache_hits == 3);
    CHECK(warm.stage("factorize")->cache_misses == 0);

    // Cached and fresh similarity matrices agree entrywise.
    Pipeline cached(cfg);
    cached.similarity();
    ExperimentConfig other = cfg;
    other.cache_dir = dir / "cache2";
    Pipeline fresh(other);
    fresh.similarity();
    REQUIRE(cached.similarities().size() == fresh.similarities().size());
    for (std::size_t i = 0; i < fresh.similarities().size(); ++i) {
        const auto a = cached.similarities()[i].matrix.to_triplets();
        const auto b = fresh.similarities()[i].matrix.to_triplets();
        REQUIRE(a.size() == b.size());
        for (std::size_t t = 0; t < a.size(); ++t) {
            CHECK(a[t].row == b[t].row);
            CHECK(a[t].col == b[t].col);
            CHECK(a[t].value == b[t].value);
        }
    }

    // Artifacts and the report file.
    for (const char* f : {"report.json", "model.json", "trace.jsonl", "curve.json", "ingest.json"})
        CHECK(fs::exists(cfg.out_dir / f));
    std::ifstream in(cfg.out_dir / "report.json");
    const MetricsReport read = MetricsReport::from_json(nlohmann::json::parse(in));
    CHECK(read.same_results(warm));
    fs::remove_all(dir);
}

TEST_CASE("changed input files invalidate the cache") {
    const fs::path dir = fresh_dir("stale");
    const ExperimentConfig cfg = small_config(dir);
    run_pipeline(cfg);
    {
        std::ofstream out(dir / "data" / "pref1.tsv", std::ios::app);
        out << "u0\tt1_0\t5\n";
    }
    Pipeline p(cfg);
    p.similarity();
    CHECK(p.report().stage("similarity")->cache_misses == 3);
    fs::remove_all(dir);
}

TEST_CASE("train then evaluate from disk matches the single run") {
    const fs::path dir = fresh_dir("split");
    const ExperimentConfig cfg = small_config(dir);
    const MetricsReport full = run_pipeline(cfg);

    ExperimentConfig c2 = cfg;
    c2.out_dir = dir / "out2";
    {
        Pipeline p(c2);
        p.train();
        p.write_model();
    }
    std::vector<std::string> stages;
    PipelineHooks hooks;
    hooks.on_stage = [&](const std::string& s) { stages.push_back(s); };
    Pipeline p(c2, hooks);
    p.load_model(c2.out_dir);
    p.evaluate();
    CHECK(std::find(stages.begin(), stages.end(), "train") == stages.end());
    CHECK(p.report().rmse_test == full.rmse_test);
    CHECK(p.report().lambda == full.lambda);

    ExperimentConfig c3 = cfg;
    c3.rank = 2;
    Pipeline mismatch(c3);
    CHECK_THROWS_AS(mismatch.load_model(c2.out_dir), StageError);
    fs::remove_all(dir);
}

TEST_CASE("repeats report mean and spread") {
    const fs::path dir = fresh_dir("rep");
    ExperimentConfig cfg = small_config(dir);
    cfg.repeats = 3;
    const MetricsReport r = run_pipeline(cfg);
    REQUIRE(r.rmse_test_runs.size() == 3);
    const double mean = (r.rmse_test_runs[0] + r.rmse_test_runs[1] + r.rmse_test_runs[2]) / 3.0;
    CHECK(r.rmse_test_mean == doctest::Approx(mean));
    double ss = 0;
    for (double v : r.rmse_test_runs) ss += (v - mean) * (v - mean);
    CHECK(r.rmse_test_std == doctest::Approx(std::sqrt(ss / 2.0)));
    CHECK(r.rmse_test_runs[0] == r.rmse_test);
    CHECK(r.rmse_test_runs[0] != r.rmse_test_runs[1]);
    fs::remove_all(dir);
}

TEST_CASE("lambda curve and clipping") {
    const fs::path dir = fresh_dir("curve");
    ExperimentConfig cfg = small_config(dir);
    cfg.lambdas = {0.0, 0.01, 10.0};
    Pipeline p(cfg);
    p.evaluate();
    const MetricsReport& r = p.report();
    REQUIRE(r.curve.size() == 3);
    CHECK(r.curve[2].nnz == 0.0);
    for (const auto& pt : r.curve) {
        CHECK(pt.nnz >= 0.0);
        CHECK(pt.nnz <= 1.0);
        CHECK(pt.rmse_valid >= 0.0);
    }
    double best = 1e300;
    for (const auto& pt : r.curve) best = std::min(best, pt.rmse_valid);
    CHECK(r.rmse_valid == best);
    CHECK(r.groups.size() == 6);
    fs::remove_all(dir);
}

TEST_CASE("planted FM problem zeroes irrelevant groups") {
    const synth::FmProblem p = synth::planted_fm_problem(50, 3, 2, 3, 1, 0.1, {1});
    CHECK(p.layout.d == 12);
    const model::GroupNorms n = model::group_norms(p.truth, p.layout);
    for (std::size_t g = 0; g < p.layout.groups.size(); ++g) {
        const bool relevant = p.layout.groups[g].metagraph == "M2";
        CHECK((n.w(static_cast<Index>(g)) > 0) == relevant);
        CHECK((n.v(static_cast<Index>(g)) > 0) == relevant);
    }
    CHECK(p.table.size() == 50);
}
