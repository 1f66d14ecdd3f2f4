#pragma once

// Metagraph DSL, plan compilation to sparse products / Hadamard products,
// plan execution, and an exhaustive instance-counting oracle.
//
// DSL (one metagraph per stanza):
//
//   metagraph := NAME ":" chain
//   chain     := node (link node)*
//   link      := edge | "-(" branch ("|" branch)+ ")-"
//   branch    := link (node link)*
//   edge      := "-[" REL ["~"] "]-"
//   node      := TYPE
//
// "~" marks reverse traversal of the relation. A parallel block connects the
// node before it to the node after it through every branch; an instance must
// satisfy all branches at once.
//
//   M3: U -[rate]- B -[rate~]- U -[rate]- B
//   M9: U -[write]- R -( -[mention]- A -[mention~]- | -[about]- B -[about~]- )- R -[write~]- U -[rate]- B

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "fmg/hin.hpp"
#include "fmg/sparse.hpp"

namespace fmg::metagraph {

using NodeId = int;
using hin::Index;

struct Node {
    NodeId id = 0;
    std::string type;

    bool operator==(const Node&) const = default;
};

// Oriented from source towards sink. `reversed` is the explicit "~" marker.
struct MetaEdge {
    NodeId from = 0;
    NodeId to = 0;
    std::string relation;
    bool reversed = false;

    bool operator==(const MetaEdge&) const = default;
};

struct MetagraphSpec {
    std::string name;
    std::vector<Node> nodes;
    std::vector<MetaEdge> edges;
    NodeId source = 0;
    NodeId sink = 0;

    bool operator==(const MetagraphSpec&) const = default;
};

MetagraphSpec parse_metagraph(std::string_view text);

// Stanzas are separated by blank lines; '#' starts a comment.
std::vector<MetagraphSpec> parse_metagraphs(std::string_view text);
std::vector<MetagraphSpec> load_metagraphs(const std::filesystem::path& path);

std::string to_dsl(const MetagraphSpec& spec);

// Throws ValidationError on cycles, multiple sources/sinks, non series-parallel
// shapes, or a parallel block whose split and join types differ.
void validate_spec(const MetagraphSpec& spec);

// Series-parallel view of a spec. Chain::nodes has one more element than
// Chain::links; links[i] joins nodes[i] to nodes[i + 1].
struct Chain;
struct Link {
    int edge = -1;                // index into spec.edges, or -1 for a block
    std::vector<Chain> branches;  // parallel block branches
};
struct Chain {
    std::vector<NodeId> nodes;
    std::vector<Link> links;
};

Chain decompose(const MetagraphSpec& spec);

// ----- compilation -----

struct Shape {
    std::string row_type;
    std::string col_type;
    Index rows = 0;
    Index cols = 0;

    bool operator==(const Shape&) const = default;
};

struct LoadStep {
    std::string relation;
    bool transposed = false;
    bool operator==(const LoadStep&) const = default;
};
struct MatMulStep {
    std::size_t left = 0;
    std::size_t right = 0;
    bool operator==(const MatMulStep&) const = default;
};
struct HadamardStep {
    std::size_t left = 0;
    std::size_t right = 0;
    bool operator==(const HadamardStep&) const = default;
};

// Each step writes the slot with its own index.
struct PlanStep {
    std::variant<LoadStep, MatMulStep, HadamardStep> op;
    Shape shape;

    bool operator==(const PlanStep&) const = default;
};

struct ExecutionPlan {
    std::string metagraph;
    std::vector<PlanStep> steps;
    std::size_t result = 0;
    std::vector<std::string> warnings;

    std::size_t count_loads() const;
    std::size_t count_matmuls() const;
    std::size_t count_hadamards() const;
    // Algebraic expression of a slot, e.g. "((rate * rate^T) * rate)".
    std::string expression(std::size_t slot) const;
    std::string expression() const { return expression(result); }

    bool operator==(const ExecutionPlan&) const = default;
};

struct CompileOptions {
    // Reorder chain products by dimension (matrix-chain order).
    bool reassociate = true;
    // Same-type relations without "~" are an error instead of a forward
    // traversal with a warning.
    bool strict_direction = false;
    // When set, the plan must produce a (source_type x sink_type) matrix.
    std::optional<std::string> source_type;
    std::optional<std::string> sink_type;
};

ExecutionPlan compile_plan(const MetagraphSpec& spec, const hin::HinStore& hin, const CompileOptions& opts = {});

// Whether a spec edge is read from the stored adjacency as-is or transposed.
// Throws CompileError when neither orientation matches the node types.
struct Orientation {
    bool transposed = false;
    std::optional<std::string> warning;
};
Orientation resolve_orientation(const MetaEdge& edge, const std::string& from_type, const std::string& to_type,
                                const hin::RelationDecl& decl, bool strict);

// ----- execution -----

struct ExecOptions {
    // Entries with |v| below the floor are dropped; zeros always are.
    double magnitude_floor = 0.0;
    std::size_t nnz_budget = 100'000'000;
    bool log_scale = false;  // store log(1 + v)
};

struct SimilarityMatrix {
    sparse::CsrMatrix matrix;
    std::string metagraph;
};

SimilarityMatrix execute_plan(const ExecutionPlan& plan, const hin::HinStore& hin, const ExecOptions& opts = {});

// Text triplets with a header line "rows<TAB>cols<TAB>nnz<TAB>name".
void write_similarity(const std::filesystem::path& path, const SimilarityMatrix& sim);
SimilarityMatrix read_similarity(const std::filesystem::path& path);

// ----- oracle -----

// Number of assignments of concrete entities to spec nodes such that every
// spec edge maps to an existing HIN edge, with source = user and sink = item.
// Requires binary adjacencies. Throws ResourceError when more than `guard`
// partial assignments are explored.
std::uint64_t brute_force_count(const MetagraphSpec& spec, const hin::HinStore& hin, Index user, Index item,
                                std::uint64_t guard = 1'000'000);

// Same enumeration with source and sink left free, tallied per pair.
std::map<std::pair<Index, Index>, std::uint64_t> brute_force_counts(const MetagraphSpec& spec,
                                                                     const hin::HinStore& hin,
                                                                     std::uint64_t guard = 100'000'000);

}  // namespace fmg::metagraph
