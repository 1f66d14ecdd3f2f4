#pragma once

// Synthetic data with known structure: a HIN whose ratings depend on a chosen
// subset of metagraphs, and planted FM problems on random features.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fmg/model.hpp"

namespace fmg::synth {

using model::Index;

// Metagraph l is U -[pref<l>]- T<l> -[attr<l>~]- B: users and items carry
// weighted memberships in `clusters` values of attribute type T<l>, and the
// similarity is the user-item affinity through that attribute. Ratings are
// 3 + signal * (sum of standardized affinities over `relevant`) + noise,
// clipped to [1, 5]. The stanza file also defines R: U -[rate]- B.
struct PlantedHinOptions {
    Index users = 400;
    Index items = 300;
    Index metagraphs = 6;
    Index clusters = 4;
    std::vector<Index> relevant{0, 1};  // 0-based metagraph indices
    Index ratings_per_user = 15;
    double signal = 1.0;
    double noise = 0.1;
    std::uint64_t seed = 1;
};

struct PlantedDataset {
    std::filesystem::path schema;
    std::filesystem::path metagraphs;
    std::filesystem::path config;  // experiment config using M1..M<L>
};

PlantedDataset write_planted_hin(const std::filesystem::path& dir, const PlantedHinOptions& opts);

// Features ~ N(0, 1) in 2 * metagraphs groups of width `rank`; labels from a
// planted FM plus N(0, noise^2). Groups of metagraphs outside `relevant` have
// zero planted weights; an empty `relevant` plants every group.
struct FmProblem {
    model::GroupLayout layout;
    model::FeatureTable table;
    model::FmParams truth;
};

FmProblem planted_fm_problem(Index n, Index metagraphs, Index rank, Index k, std::uint64_t seed,
                             double noise = 0.1, const std::vector<Index>& relevant = {});

}  // namespace fmg::synth
