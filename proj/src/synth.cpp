#include "fmg/synth.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "fmg/error.hpp"

namespace fmg::synth {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p);
    if (!out) throw ResourceError("cannot write " + p.string());
    out.precision(17);
    return out;
}

}  // namespace

PlantedDataset write_planted_hin(const fs::path& dir, const PlantedHinOptions& o) {
    if (o.users < 2 || o.items < 2 || o.metagraphs < 1 || o.clusters < 1)
        throw ArgumentError("planted HIN needs at least 2 users, 2 items, 1 metagraph and 1 cluster");
    if (o.ratings_per_user < 1 || o.ratings_per_user > o.items)
        throw ArgumentError("ratings per user must lie in [1, items]");
    for (Index r : o.relevant)
        if (r < 0 || r >= o.metagraphs) throw ArgumentError("relevant metagraph index out of range");

    fs::create_directories(dir);
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> weight(0.1, 2.0);
    std::normal_distribution<double> nd;

    nlohmann::json relations = nlohmann::json::array();
    std::vector<std::string> types{"U", "B"};
    Eigen::MatrixXd signal = Eigen::MatrixXd::Zero(o.users, o.items);
    for (Index l = 0; l < o.metagraphs; ++l) {
        const std::string id = std::to_string(l + 1);
        const std::string type = "T" + id;
        types.push_back(type);
        Eigen::MatrixXd wu(o.users, o.clusters), wb(o.items, o.clusters);
        for (Index i = 0; i < wu.size(); ++i) wu.data()[i] = weight(rng);
        for (Index i = 0; i < wb.size(); ++i) wb.data()[i] = weight(rng);
        {
            std::ofstream out = open_out(dir / ("pref" + id + ".tsv"));
            for (Index u = 0; u < o.users; ++u)
                for (Index c = 0; c < o.clusters; ++c)
                    out << 'u' << u << '\t' << 't' << id << '_' << c << '\t' << wu(u, c) << '\n';
        }
        {
            std::ofstream out = open_out(dir / ("attr" + id + ".tsv"));
            for (Index b = 0; b < o.items; ++b)
                for (Index c = 0; c < o.clusters; ++c)
                    out << 'b' << b << '\t' << 't' << id << '_' << c << '\t' << wb(b, c) << '\n';
        }
        relations.push_back({{"name", "pref" + id}, {"head", "U"}, {"tail", type}, {"file", "pref" + id + ".tsv"}});
        relations.push_back({{"name", "attr" + id}, {"head", "B"}, {"tail", type}, {"file", "attr" + id + ".tsv"}});
        if (std::find(o.relevant.begin(), o.relevant.end(), l) != o.relevant.end()) {
            Eigen::MatrixXd c = wu * wb.transpose();
            const double mean = c.mean();
            const double sd = std::sqrt((c.array() - mean).square().mean());
            signal += ((c.array() - mean) / (sd > 0 ? sd : 1.0)).matrix();
        }
    }

    {
        std::ofstream out = open_out(dir / "ratings.tsv");
        std::vector<Index> items(static_cast<std::size_t>(o.items));
        std::iota(items.begin(), items.end(), Index{0});
        for (Index u = 0; u < o.users; ++u) {
            // Partial Fisher-Yates: the first ratings_per_user entries are a uniform sample.
            for (Index j = 0; j < o.ratings_per_user; ++j) {
                std::uniform_int_distribution<Index> pick(j, o.items - 1);
                std::swap(items[static_cast<std::size_t>(j)], items[static_cast<std::size_t>(pick(rng))]);
                const Index b = items[static_cast<std::size_t>(j)];
                const double r = std::clamp(3.0 + o.signal * signal(u, b) + o.noise * nd(rng), 1.0, 5.0);
                out << 'u' << u << "\tb" << b << '\t' << r << '\n';
            }
        }
    }

    const nlohmann::json schema = {{"entities", types},
                                   {"user_type", "U"},
                                   {"item_type", "B"},
                                   {"relations", relations},
                                   {"ratings", {{"file", "ratings.tsv"}, {"binarize", false}, {"range", {1, 5}}}}};
    open_out(dir / "schema.json") << schema.dump(2) << '\n';

    {
        std::ofstream out = open_out(dir / "metagraphs.dsl");
        out << "# Planted metagraphs; relevant:";
        for (Index r : o.relevant) out << " M" << r + 1;
        out << "\n\n";
        for (Index l = 0; l < o.metagraphs; ++l) {
            const std::string id = std::to_string(l + 1);
            out << 'M' << id << ": U -[pref" << id << "]- T" << id << " -[attr" << id << "~]- B\n\n";
        }
        out << "R: U -[rate]- B\n";
    }

    std::vector<std::string> names;
    for (Index l = 0; l < o.metagraphs; ++l) names.push_back("M" + std::to_string(l + 1));
    const nlohmann::json config = {{"schema", "schema.json"},
                                   {"metagraphs", "metagraphs.dsl"},
                                   {"use_metagraphs", names},
                                   {"features", {{"method", "mf"}, {"rank", 5}, {"mu", 0.01}}},
                                   {"fm", {{"k", 10}, {"mode", "convex"}}},
                                   {"solver", {{"algorithm", "nmapg"}, {"step", 0.05}, {"max_iter", 500}, {"tol", 1e-7}}},
                                   {"seed", 0},
                                   {"out_dir", "out"}};
    open_out(dir / "config.json") << config.dump(2) << '\n';
    return {dir / "schema.json", dir / "metagraphs.dsl", dir / "config.json"};
}

FmProblem planted_fm_problem(Index n, Index metagraphs, Index rank, Index k, std::uint64_t seed, double noise,
                             const std::vector<Index>& relevant) {
    if (n < 1 || metagraphs < 1 || rank < 1 || k < 1) throw ArgumentError("planted FM problem needs positive sizes");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    FmProblem p;
    std::vector<std::string> names;
    for (Index l = 0; l < metagraphs; ++l) names.push_back("M" + std::to_string(l + 1));
    p.layout = model::GroupLayout::from_ranks(names, std::vector<Index>(names.size(), rank));
    const Index d = p.layout.d;
    p.truth = model::FmParams::zeros(d, k);
    p.truth.b = 3.0;
    for (const model::Group& g : p.layout.groups) {
        const Index l = std::stoll(g.metagraph.substr(1)) - 1;
        if (!relevant.empty() && std::find(relevant.begin(), relevant.end(), l) == relevant.end()) continue;
        for (Index i = g.begin; i < g.end; ++i) {
            p.truth.w(i) = 0.3 * nd(rng);
            for (Index f = 0; f < k; ++f) p.truth.V(i, f) = 0.3 * nd(rng) / std::sqrt(static_cast<double>(k));
        }
    }
    p.table.X.resize(n, d);
    for (Index i = 0; i < p.table.X.size(); ++i) p.table.X.data()[i] = nd(rng);
    p.table.y = model::predict_batch(p.truth, p.table.X);
    for (Index i = 0; i < n; ++i) p.table.y(i) += noise * nd(rng);
    p.table.user.resize(static_cast<std::size_t>(n));
    p.table.item.resize(static_cast<std::size_t>(n));
    std::iota(p.table.user.begin(), p.table.user.end(), Index{0});
    std::iota(p.table.item.begin(), p.table.item.end(), Index{0});
    return p;
}

}  // namespace fmg::synth
