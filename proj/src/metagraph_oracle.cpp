// Exhaustive metagraph instance enumeration. Deliberately shares nothing
// with the sparse-product path: it walks adjacency lists and checks edge
// membership in hash sets.

#include <algorithm>
#include <functional>
#include <unordered_map>
#include <unordered_set>

#include "fmg/error.hpp"
#include "fmg/metagraph.hpp"

namespace fmg::metagraph {

namespace {

struct PairHash {
    std::size_t operator()(const std::pair<Index, Index>& p) const {
        return std::hash<Index>()(p.first) * 1000003u ^ std::hash<Index>()(p.second);
    }
};

// One spec edge, oriented so that (assign[from], assign[to]) must be in `pairs`.
struct EdgeIndex {
    NodeId from = 0;
    NodeId to = 0;
    std::unordered_set<std::pair<Index, Index>, PairHash> pairs;
    std::unordered_map<Index, std::vector<Index>> forward;  // from-entity -> to-entities
};

class Enumerator {
public:
    Enumerator(const MetagraphSpec& spec, const hin::HinStore& hin, std::uint64_t guard)
        : spec_(spec), hin_(hin), guard_(guard), assign_(spec.nodes.size(), -1) {
        validate_spec(spec);
        for (const MetaEdge& e : spec.edges) {
            const auto& rel = hin.relation(e.relation);
            const auto& from_t = spec.nodes[static_cast<std::size_t>(e.from)].type;
            const auto& to_t = spec.nodes[static_cast<std::size_t>(e.to)].type;
            const bool transposed = resolve_orientation(e, from_t, to_t, rel.decl, false).transposed;
            EdgeIndex idx;
            idx.from = e.from;
            idx.to = e.to;
            for (const hin::Edge& h : rel.adjacency.entries) {
                if (h.weight != 1.0) throw ArgumentError("brute_force_count requires binary adjacencies");
                const Index a = transposed ? h.tail : h.head;
                const Index b = transposed ? h.head : h.tail;
                idx.pairs.insert({a, b});
                idx.forward[a].push_back(b);
            }
            edges_.push_back(std::move(idx));
        }
        // Depth-first order from the source; every node after the source has
        // an assigned predecessor when reached.
        std::vector<bool> placed(spec.nodes.size(), false);
        order_.push_back(spec.source);
        placed[static_cast<std::size_t>(spec.source)] = true;
        while (order_.size() < spec.nodes.size()) {
            bool progressed = false;
            for (const MetaEdge& e : spec.edges) {
                if (placed[static_cast<std::size_t>(e.from)] && !placed[static_cast<std::size_t>(e.to)]) {
                    bool ready = true;
                    for (const MetaEdge& f : spec.edges)
                        if (f.to == e.to && !placed[static_cast<std::size_t>(f.from)]) ready = false;
                    if (!ready) continue;
                    placed[static_cast<std::size_t>(e.to)] = true;
                    order_.push_back(e.to);
                    progressed = true;
                    break;
                }
            }
            if (!progressed) throw ValidationError("metagraph is not connected from its source");
        }
    }

    template <typename Visit>
    void run(std::optional<Index> source_entity, std::optional<Index> sink_entity, Visit&& visit) {
        fixed_sink_ = sink_entity;
        const Index source_count = hin_.entity(spec_.nodes[static_cast<std::size_t>(spec_.source)].type).count();
        for (Index s = 0; s < source_count; ++s) {
            if (source_entity && *source_entity != s) continue;
            assign_[static_cast<std::size_t>(spec_.source)] = s;
            bump();
            extend(1, visit);
        }
    }

private:
    template <typename Visit>
    void extend(std::size_t depth, Visit& visit) {
        if (depth == order_.size()) {
            visit(assign_[static_cast<std::size_t>(spec_.source)], assign_[static_cast<std::size_t>(spec_.sink)]);
            return;
        }
        const NodeId node = order_[depth];
        // Candidates come from one incoming edge; all incoming edges are then checked.
        const EdgeIndex* seed = nullptr;
        for (const EdgeIndex& e : edges_)
            if (e.to == node) {
                seed = &e;
                break;
            }
        const auto it = seed->forward.find(assign_[static_cast<std::size_t>(seed->from)]);
        if (it == seed->forward.end()) return;
        for (Index cand : it->second) {
            if (node == spec_.sink && fixed_sink_ && *fixed_sink_ != cand) continue;
            bool ok = true;
            for (const EdgeIndex& e : edges_) {
                if (e.to != node) continue;
                if (!e.pairs.count({assign_[static_cast<std::size_t>(e.from)], cand})) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            assign_[static_cast<std::size_t>(node)] = cand;
            bump();
            extend(depth + 1, visit);
        }
        assign_[static_cast<std::size_t>(node)] = -1;
    }

    void bump() {
        if (++explored_ > guard_)
            throw ResourceError("brute-force enumeration exceeded " + std::to_string(guard_) + " partial assignments");
    }

    const MetagraphSpec& spec_;
    const hin::HinStore& hin_;
    std::uint64_t guard_;
    std::uint64_t explored_ = 0;
    std::vector<Index> assign_;
    std::vector<NodeId> order_;
    std::vector<EdgeIndex> edges_;
    std::optional<Index> fixed_sink_;
};

}  // namespace

std::uint64_t brute_force_count(const MetagraphSpec& spec, const hin::HinStore& hin, Index user, Index item,
                                std::uint64_t guard) {
    Enumerator en(spec, hin, guard);
    std::uint64_t count = 0;
    en.run(user, item, [&](Index, Index) { ++count; });
    return count;
}

std::map<std::pair<Index, Index>, std::uint64_t> brute_force_counts(const MetagraphSpec& spec,
                                                                     const hin::HinStore& hin, std::uint64_t guard) {
    Enumerator en(spec, hin, guard);
    std::map<std::pair<Index, Index>, std::uint64_t> counts;
    en.run(std::nullopt, std::nullopt, [&](Index s, Index t) { ++counts[{s, t}]; });
    return counts;
}

}  // namespace fmg::metagraph
