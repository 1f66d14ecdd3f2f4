#pragma once

// Heterogeneous information network storage: typed entity sets, one sparse
// adjacency per declared relation, and the rating triples used as
// supervision.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "fmg/sparse.hpp"

namespace fmg::hin {

using Index = std::int64_t;

// Dense 0-based indices for one entity type, assigned in order of first
// appearance.
class EntitySet {
public:
    EntitySet() = default;
    explicit EntitySet(std::string type_name) : type_name_(std::move(type_name)) {}

    const std::string& type_name() const { return type_name_; }
    Index count() const { return static_cast<Index>(ids_.size()); }

    // Returns the existing index or appends a new one.
    Index intern(std::string_view external_id);
    std::optional<Index> find(std::string_view external_id) const;
    const std::string& external_id(Index index) const { return ids_.at(static_cast<std::size_t>(index)); }
    const std::vector<std::string>& external_ids() const { return ids_; }

    bool operator==(const EntitySet& other) const { return type_name_ == other.type_name_ && ids_ == other.ids_; }

private:
    std::string type_name_;
    std::vector<std::string> ids_;
    std::unordered_map<std::string, Index> index_;
};

using EntityRegistry = std::map<std::string, EntitySet>;

struct RelationDecl {
    std::string name;
    std::string head_type;
    std::string tail_type;

    bool operator==(const RelationDecl&) const = default;
};

struct Edge {
    Index head = 0;
    Index tail = 0;
    double weight = 1.0;

    bool operator==(const Edge&) const = default;
};

// Entries are sorted by (head, tail) and unique.
struct SparseAdjacency {
    Index rows = 0;
    Index cols = 0;
    std::vector<Edge> entries;

    sparse::CsrMatrix to_csr() const;
    bool operator==(const SparseAdjacency&) const = default;
};

struct Relation {
    RelationDecl decl;
    SparseAdjacency adjacency;

    bool operator==(const Relation&) const = default;
};

struct HinStore {
    std::map<std::string, EntitySet> entities;
    std::map<std::string, Relation> relations;

    const EntitySet& entity(const std::string& type_name) const;
    const Relation& relation(const std::string& name) const;
    bool has_relation(const std::string& name) const { return relations.count(name) != 0; }

    // Sets every adjacency's shape to the current entity counts. Call once
    // all files are loaded; later loads may have grown the id maps.
    void sync_shapes();

    bool operator==(const HinStore&) const = default;
};

// Reads head<TAB>tail[<TAB>weight] lines. Duplicate pairs are weight-summed,
// a missing weight counts as 1, and unseen ids extend the registry. Throws
// ParseError (with line number) or ValidationError for negative weights.
SparseAdjacency parse_edges(std::istream& in, const RelationDecl& decl, EntityRegistry& entities,
                            const std::string& source_name = "<stream>");
SparseAdjacency load_edges(const std::filesystem::path& path, const RelationDecl& decl,
                           EntityRegistry& entities);

enum class IssueKind {
    dimension_mismatch,
    empty_relation,
    orphan_entity_type,
    undeclared_type,
    index_out_of_range,
    duplicate_entry,
    negative_weight,
};

enum class Severity { error, warning };

struct ValidationIssue {
    IssueKind kind;
    Severity severity;
    std::string subject;
    std::string message;
};

struct ValidationReport {
    std::vector<ValidationIssue> issues;

    bool empty() const { return issues.empty(); }
    bool has_errors() const;
    std::size_t count(IssueKind kind) const;
};

ValidationReport validate(const HinStore& hin);
std::string to_string(IssueKind kind);
nlohmann::json to_json(const ValidationReport& report);

// ----- ratings -----

struct RatingRange {
    double min = 1.0;
    double max = 5.0;
};

enum class SplitRole { all, train, valid, test };

struct Rating {
    Index user = 0;
    Index item = 0;
    double value = 0.0;

    bool operator==(const Rating&) const = default;
};

struct RatingSet {
    std::vector<Rating> triples;
    SplitRole role = SplitRole::all;

    std::size_t size() const { return triples.size(); }
    bool empty() const { return triples.empty(); }
};

RatingSet parse_ratings(std::istream& in, EntitySet& users, EntitySet& items, RatingRange range,
                        const std::string& source_name = "<stream>");
RatingSet load_ratings(const std::filesystem::path& path, EntitySet& users, EntitySet& items, RatingRange range);

struct SplitFractions {
    double train = 0.8;
    double valid = 0.1;
    double test = 0.1;
};

struct RatingSplit {
    RatingSet train;
    RatingSet valid;
    RatingSet test;
};

// Seeded uniform shuffle; valid/test get floor(f * N) triples and the
// remainder goes to train.
RatingSplit split_ratings(const RatingSet& ratings, SplitFractions fractions, std::uint64_t seed);

// Binary (any rating -> 1) or raw-valued user-item adjacency.
SparseAdjacency rating_adjacency(const RatingSet& ratings, Index users, Index items, bool binarize);

// ----- schema-driven ingestion -----

struct RelationSource {
    RelationDecl decl;
    std::filesystem::path file;
};

struct HinSchema {
    std::vector<std::string> entity_types;
    std::string user_type = "U";
    std::string item_type = "B";
    std::vector<RelationSource> relations;
    std::filesystem::path ratings_file;
    std::string rating_relation = "rate";
    bool binarize_ratings = true;
    RatingRange rating_range;

    // Relative file paths resolve against base_dir.
    static HinSchema from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);
    static HinSchema load(const std::filesystem::path& path);
    std::vector<std::filesystem::path> input_files() const;
};

struct IngestResult {
    HinStore hin;
    RatingSet ratings;
};

// Loads ratings first, then relations in declaration order, so entity ids
// are stable across runs. The rating relation is built from all ratings.
IngestResult ingest(const HinSchema& schema);

// Replaces (or adds) the user-item rating relation, typically with the
// training split only.
void set_rating_relation(HinStore& hin, const HinSchema& schema, const RatingSet& ratings);

}  // namespace fmg::hin
