#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fmg/hin.hpp"
#include "fmg/metagraph.hpp"

namespace fmg::testing {

// Entity sets with ids "<type>0", "<type>1", ... and relations given as
// (head, tail) index lists with unit weight.
class HinBuilder {
public:
    HinBuilder& entities(const std::string& type, hin::Index count);
    HinBuilder& relation(const std::string& name, const std::string& head, const std::string& tail,
                         const std::vector<std::pair<hin::Index, hin::Index>>& pairs);
    // Relation from a dense 0/1 (or weighted) matrix.
    HinBuilder& dense_relation(const std::string& name, const std::string& head, const std::string& tail,
                               const Eigen::MatrixXd& weights);
    hin::HinStore build() const { return hin_; }

private:
    hin::HinStore hin_;
};

// Five-relation schema used by the oracle suites:
//   rate: U->B, write: U->R, about: R->B, mention: R->A, friend: U->U
hin::HinStore random_review_hin(std::mt19937_64& rng, hin::Index max_per_type, double density);

// Ten metagraphs over the schema above; four contain parallel blocks.
const std::vector<std::string>& oracle_metagraphs();

}  // namespace fmg::testing
