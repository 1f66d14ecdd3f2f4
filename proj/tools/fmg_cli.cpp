#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/core.h>
#include <spdlog/spdlog.h>

#include "fmg/error.hpp"
#include "fmg/harness.hpp"
#include "fmg/synth.hpp"

namespace fs = std::filesystem;
using namespace fmg;

namespace {

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::string cache_dir;
    int repeats = 0;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool repeats = false) {
    cmd->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "seed for the split, factorization and solver");
    cmd->add_option("--out-dir", o.out_dir, "output directory");
    cmd->add_option("--cache-dir", o.cache_dir, "cache directory for similarities and factors");
    if (repeats) cmd->add_option("--repeats", o.repeats, "independent runs with seeds seed..seed+n-1")->check(CLI::PositiveNumber);
}

harness::ExperimentConfig load_config(const CommonOptions& o) {
    harness::ExperimentConfig cfg = harness::ExperimentConfig::load(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
    if (!o.cache_dir.empty()) cfg.cache_dir = o.cache_dir;
    if (o.repeats > 0) cfg.repeats = o.repeats;
    return cfg;
}

int exit_code_for(const std::string& stage) {
    static const std::map<std::string, int> codes{{"ingest", 10},   {"similarity", 11}, {"factorize", 12},
                                                  {"assemble", 13}, {"train", 14},      {"evaluate", 15}};
    auto it = codes.find(stage);
    return it == codes.end() ? 1 : it->second;
}

void print_report(const harness::MetricsReport& r) {
    fmt::print("metagraphs: {}\n", fmt::join(r.metagraphs, " "));
    fmt::print("ratings: train {}  valid {}  test {}\n", r.n_train, r.n_valid, r.n_test);
    fmt::print("rmse: train {:.4f}  valid {:.4f}  test {:.4f}\n", r.rmse_train, r.rmse_valid, r.rmse_test);
    if (r.repeats > 1) fmt::print("test rmse over {} runs: {:.4f} +- {:.4f}\n", r.repeats, r.rmse_test_mean, r.rmse_test_std);
    fmt::print("lambda {:g}  nnz {:.4f}\n\n", r.lambda, r.nnz);
    fmt::print("{:<16} {:>12} {:>12}  {}\n", "group", "|w|", "|V|", "selected");
    for (const auto& g : r.groups)
        fmt::print("{:<16} {:>12.4e} {:>12.4e}  {}{}\n", g.label(), g.w_norm, g.v_norm, g.w_selected ? "w" : "-",
                   g.v_selected ? "V" : "-");
    if (!r.curve.empty()) {
        fmt::print("\n{:>10} {:>10} {:>10} {:>8} {:>6}\n", "lambda", "train", "valid", "nnz", "iters");
        for (const auto& p : r.curve)
            fmt::print("{:>10g} {:>10.4f} {:>10.4f} {:>8.4f} {:>6}\n", p.lambda, p.rmse_train, p.rmse_valid, p.nnz,
                       p.iterations);
    }
    if (!r.stages.empty()) {
        fmt::print("\n{:<12} {:>10} {:>6} {:>6}\n", "stage", "seconds", "hits", "misses");
        for (const auto& s : r.stages)
            fmt::print("{:<12} {:>10.3f} {:>6} {:>6}\n", s.stage, s.seconds, s.cache_hits, s.cache_misses);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Metagraph-based factorization machine recommender"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

    CommonOptions common;
    auto* ingest = app.add_subcommand("ingest", "load and validate the HIN; writes ingest.json");
    add_common(ingest, common);
    auto* similarity = app.add_subcommand("similarity", "compute metagraph similarity matrices");
    add_common(similarity, common);
    auto* factorize = app.add_subcommand("factorize", "compute latent user/item features per metagraph");
    add_common(factorize, common);
    auto* train = app.add_subcommand("train", "fit the FM over the lambda grid; writes model.json, trace.jsonl");
    add_common(train, common);
    auto* evaluate = app.add_subcommand("evaluate", "score the model from --out-dir on the test split");
    add_common(evaluate, common);
    auto* pipeline = app.add_subcommand("pipeline", "run every stage and write report.json");
    add_common(pipeline, common, true);

    std::string report_path;
    auto* report = app.add_subcommand("report", "print a metrics report");
    report->add_option("path", report_path, "report.json or the directory holding it")->required();

    std::string synth_dir;
    synth::PlantedHinOptions synth_opts;
    auto* synth_cmd = app.add_subcommand("synth", "write a planted-relevance synthetic HIN and config");
    synth_cmd->add_option("dir", synth_dir, "output directory")->required();
    synth_cmd->add_option("--users", synth_opts.users);
    synth_cmd->add_option("--items", synth_opts.items);
    synth_cmd->add_option("--metagraphs", synth_opts.metagraphs);
    synth_cmd->add_option("--clusters", synth_opts.clusters);
    synth_cmd->add_option("--ratings-per-user", synth_opts.ratings_per_user);
    synth_cmd->add_option("--noise", synth_opts.noise);
    synth_cmd->add_option("--seed", synth_opts.seed);

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::from_str(log_level));

    try {
        if (*report) {
            fs::path p(report_path);
            if (fs::is_directory(p)) p /= "report.json";
            std::ifstream in(p);
            if (!in) throw ValidationError("cannot read " + p.string());
            print_report(harness::MetricsReport::from_json(nlohmann::json::parse(in)));
            return 0;
        }
        if (*synth_cmd) {
            const auto ds = synth::write_planted_hin(synth_dir, synth_opts);
            fmt::print("wrote {}\n", ds.config.string());
            return 0;
        }

        const harness::ExperimentConfig cfg = load_config(common);
        if (*pipeline) {
            print_report(harness::run_pipeline(cfg));
            return 0;
        }
        harness::Pipeline p(cfg);
        if (*ingest) {
            p.ingest();
            p.write_ingest_summary();
        } else if (*similarity) {
            p.similarity();
            p.write_similarities();
        } else if (*factorize) {
            p.factorize();
            p.write_factors();
        } else if (*train) {
            p.train();
            p.write_model();
        } else if (*evaluate) {
            p.load_model(cfg.out_dir);
            p.evaluate();
            p.write_report();
            print_report(p.report());
            return 0;
        }
        for (const auto& s : p.report().stages)
            fmt::print("{:<12} {:>8.3f}s  cache hits {} misses {}\n", s.stage, s.seconds, s.cache_hits, s.cache_misses);
        fmt::print("artifacts in {}\n", cfg.out_dir.string());
    } catch (const harness::StageError& e) {
        std::cerr << "fmg: " << e.what() << '\n';
        return exit_code_for(e.stage());
    } catch (const Error& e) {
        std::cerr << "fmg: config: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "fmg: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
