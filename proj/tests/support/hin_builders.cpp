#include "support/hin_builders.hpp"

namespace fmg::testing {

HinBuilder& HinBuilder::entities(const std::string& type, hin::Index count) {
    hin::EntitySet set(type);
    for (hin::Index i = 0; i < count; ++i) set.intern(type + std::to_string(i));
    hin_.entities.insert_or_assign(type, std::move(set));
    return *this;
}

HinBuilder& HinBuilder::relation(const std::string& name, const std::string& head, const std::string& tail,
                                 const std::vector<std::pair<hin::Index, hin::Index>>& pairs) {
    hin::Relation rel;
    rel.decl = {name, head, tail};
    rel.adjacency.rows = hin_.entity(head).count();
    rel.adjacency.cols = hin_.entity(tail).count();
    std::map<std::pair<hin::Index, hin::Index>, double> summed;
    for (const auto& p : pairs) summed[p] += 1.0;
    for (const auto& [k, w] : summed) rel.adjacency.entries.push_back({k.first, k.second, w});
    hin_.relations.insert_or_assign(name, std::move(rel));
    return *this;
}

HinBuilder& HinBuilder::dense_relation(const std::string& name, const std::string& head, const std::string& tail,
                                       const Eigen::MatrixXd& weights) {
    hin::Relation rel;
    rel.decl = {name, head, tail};
    rel.adjacency.rows = weights.rows();
    rel.adjacency.cols = weights.cols();
    for (hin::Index r = 0; r < weights.rows(); ++r)
        for (hin::Index c = 0; c < weights.cols(); ++c)
            if (weights(r, c) != 0.0) rel.adjacency.entries.push_back({r, c, weights(r, c)});
    hin_.relations.insert_or_assign(name, std::move(rel));
    return *this;
}

hin::HinStore random_review_hin(std::mt19937_64& rng, hin::Index max_per_type, double density) {
    std::uniform_int_distribution<hin::Index> count(1, max_per_type);
    std::bernoulli_distribution edge(density);
    HinBuilder b;
    for (const char* t : {"U", "B", "R", "A"}) b.entities(t, count(rng));
    auto random_pairs = [&](const std::string& head, const std::string& tail) {
        const hin::HinStore h = b.build();
        std::vector<std::pair<hin::Index, hin::Index>> pairs;
        for (hin::Index i = 0; i < h.entity(head).count(); ++i)
            for (hin::Index j = 0; j < h.entity(tail).count(); ++j)
                if (edge(rng)) pairs.emplace_back(i, j);
        return pairs;
    };
    b.relation("rate", "U", "B", random_pairs("U", "B"));
    b.relation("write", "U", "R", random_pairs("U", "R"));
    b.relation("about", "R", "B", random_pairs("R", "B"));
    b.relation("mention", "R", "A", random_pairs("R", "A"));
    b.relation("friend", "U", "U", random_pairs("U", "U"));
    return b.build();
}

const std::vector<std::string>& oracle_metagraphs() {
    static const std::vector<std::string> specs = {
        "P1: U -[rate]- B",
        "P2: U -[rate]- B -[rate~]- U -[rate]- B",
        "P3: U -[friend]- U -[rate]- B",
        "P4: U -[write]- R -[about]- B",
        "P5: U -[rate]- B -[about~]- R -[mention]- A -[mention~]- R -[about]- B",
        "P6: U -[write]- R -( -[mention]- A -[mention~]- | -[about]- B -[about~]- )- R -[write~]- U -[rate]- B",
        "P7: U -[rate]- B -( -[about~]- R -[about]- | -[rate~]- U -[rate]- )- B",
        "P8: U -( -[friend]- | -[rate]- B -[rate~]- )- U -[rate]- B",
        "P9: U -[rate]- B -( -[about~]- R -( -[mention]- A -[mention~]- | -[write~]- U -[write]- )- R -[about]- "
        "| -[rate~]- U -[rate]- )- B",
        "P10: U -[friend~]- U -[friend]- U -[rate]- B",
    };
    return specs;
}

}  // namespace fmg::testing
