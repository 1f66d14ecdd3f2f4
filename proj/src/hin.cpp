#include "fmg/hin.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "fmg/error.hpp"

namespace fmg::hin {

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
    return fields;
}

std::string_view strip_cr(std::string_view line) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    return line;
}

double parse_number(std::string_view text, const std::string& source, std::size_t line_no) {
    double value = 0.0;
    const auto* first = text.data();
    const auto* last = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last || !std::isfinite(value))
        throw ParseError(source + ":" + std::to_string(line_no) + ": invalid number '" + std::string(text) + "'",
                         line_no);
    return value;
}

EntitySet& entity_for(EntityRegistry& entities, const std::string& type_name) {
    auto it = entities.find(type_name);
    if (it == entities.end()) it = entities.emplace(type_name, EntitySet(type_name)).first;
    return it->second;
}

std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open '" + path.string() + "'");
    return in;
}

}  // namespace

Index EntitySet::intern(std::string_view external_id) {
    std::string key(external_id);
    const auto it = index_.find(key);
    if (it != index_.end()) return it->second;
    const Index idx = count();
    ids_.push_back(key);
    index_.emplace(std::move(key), idx);
    return idx;
}

std::optional<Index> EntitySet::find(std::string_view external_id) const {
    const auto it = index_.find(std::string(external_id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

sparse::CsrMatrix SparseAdjacency::to_csr() const {
    std::vector<sparse::Triplet> triplets;
    triplets.reserve(entries.size());
    for (const Edge& e : entries) triplets.push_back({e.head, e.tail, e.weight});
    return sparse::CsrMatrix::from_triplets(rows, cols, triplets);
}

const EntitySet& HinStore::entity(const std::string& type_name) const {
    const auto it = entities.find(type_name);
    if (it == entities.end()) throw ArgumentError("unknown entity type '" + type_name + "'");
    return it->second;
}

const Relation& HinStore::relation(const std::string& name) const {
    const auto it = relations.find(name);
    if (it == relations.end()) throw ArgumentError("unknown relation '" + name + "'");
    return it->second;
}

void HinStore::sync_shapes() {
    for (auto& [name, rel] : relations) {
        const auto head = entities.find(rel.decl.head_type);
        const auto tail = entities.find(rel.decl.tail_type);
        if (head != entities.end()) rel.adjacency.rows = head->second.count();
        if (tail != entities.end()) rel.adjacency.cols = tail->second.count();
    }
}

SparseAdjacency parse_edges(std::istream& in, const RelationDecl& decl, EntityRegistry& entities,
                            const std::string& source_name) {
    // Intern in file order first so id assignment follows first appearance.
    std::map<std::pair<Index, Index>, double> summed;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string_view line = strip_cr(raw);
        if (line.empty()) continue;
        const auto fields = split_tabs(line);
        if (fields.size() < 2 || fields.size() > 3 || fields[0].empty() || fields[1].empty())
            throw ParseError(source_name + ":" + std::to_string(line_no) +
                                 ": expected head<TAB>tail[<TAB>weight]",
                             line_no);
        double weight = 1.0;
        if (fields.size() == 3) {
            weight = parse_number(fields[2], source_name, line_no);
            if (weight < 0.0)
                throw ValidationError(source_name + ":" + std::to_string(line_no) + ": negative weight");
        }
        const Index head = entity_for(entities, decl.head_type).intern(fields[0]);
        const Index tail = entity_for(entities, decl.tail_type).intern(fields[1]);
        summed[{head, tail}] += weight;
    }
    SparseAdjacency adj;
    adj.rows = entity_for(entities, decl.head_type).count();
    adj.cols = entity_for(entities, decl.tail_type).count();
    adj.entries.reserve(summed.size());
    for (const auto& [key, weight] : summed) adj.entries.push_back({key.first, key.second, weight});
    return adj;
}

SparseAdjacency load_edges(const std::filesystem::path& path, const RelationDecl& decl, EntityRegistry& entities) {
    auto in = open_input(path);
    return parse_edges(in, decl, entities, path.string());
}

std::string to_string(IssueKind kind) {
    switch (kind) {
        case IssueKind::dimension_mismatch: return "dimension_mismatch";
        case IssueKind::empty_relation: return "empty_relation";
        case IssueKind::orphan_entity_type: return "orphan_entity_type";
        case IssueKind::undeclared_type: return "undeclared_type";
        case IssueKind::index_out_of_range: return "index_out_of_range";
        case IssueKind::duplicate_entry: return "duplicate_entry";
        case IssueKind::negative_weight: return "negative_weight";
    }
    return "unknown";
}

bool ValidationReport::has_errors() const {
    return std::any_of(issues.begin(), issues.end(),
                       [](const ValidationIssue& i) { return i.severity == Severity::error; });
}

std::size_t ValidationReport::count(IssueKind kind) const {
    return static_cast<std::size_t>(
        std::count_if(issues.begin(), issues.end(), [kind](const ValidationIssue& i) { return i.kind == kind; }));
}

ValidationReport validate(const HinStore& hin) {
    ValidationReport report;
    auto add = [&](IssueKind kind, Severity sev, const std::string& subject, std::string msg) {
        report.issues.push_back({kind, sev, subject, std::move(msg)});
    };
    std::set<std::string> referenced;
    for (const auto& [name, rel] : hin.relations) {
        const auto& adj = rel.adjacency;
        bool types_ok = true;
        for (const auto* type : {&rel.decl.head_type, &rel.decl.tail_type}) {
            referenced.insert(*type);
            if (!hin.entities.count(*type)) {
                add(IssueKind::undeclared_type, Severity::error, name, "relation references undeclared type '" + *type + "'");
                types_ok = false;
            }
        }
        if (types_ok) {
            const Index heads = hin.entities.at(rel.decl.head_type).count();
            const Index tails = hin.entities.at(rel.decl.tail_type).count();
            if (adj.rows != heads || adj.cols != tails)
                add(IssueKind::dimension_mismatch, Severity::error, name,
                    "adjacency is " + std::to_string(adj.rows) + "x" + std::to_string(adj.cols) + " but entity counts are " +
                        std::to_string(heads) + "x" + std::to_string(tails));
        }
        if (adj.entries.empty()) add(IssueKind::empty_relation, Severity::warning, name, "relation has no entries");
        bool out_of_range = false, duplicate = false, negative = false;
        for (std::size_t k = 0; k < adj.entries.size(); ++k) {
            const Edge& e = adj.entries[k];
            if (e.head < 0 || e.head >= adj.rows || e.tail < 0 || e.tail >= adj.cols) out_of_range = true;
            if (e.weight < 0.0) negative = true;
            if (k > 0) {
                const Edge& p = adj.entries[k - 1];
                if (p.head == e.head && p.tail == e.tail) duplicate = true;
            }
        }
        if (out_of_range) add(IssueKind::index_out_of_range, Severity::error, name, "entry index outside adjacency shape");
        if (duplicate) add(IssueKind::duplicate_entry, Severity::error, name, "duplicate (head, tail) entries");
        if (negative) add(IssueKind::negative_weight, Severity::error, name, "negative edge weight");
    }
    for (const auto& [type, set] : hin.entities) {
        if (!referenced.count(type))
            add(IssueKind::orphan_entity_type, Severity::warning, type, "entity type is not used by any relation");
    }
    return report;
}

nlohmann::json to_json(const ValidationReport& report) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& issue : report.issues) {
        out.push_back({{"kind", to_string(issue.kind)},
                       {"severity", issue.severity == Severity::error ? "error" : "warning"},
                       {"subject", issue.subject},
                       {"message", issue.message}});
    }
    return out;
}

RatingSet parse_ratings(std::istream& in, EntitySet& users, EntitySet& items, RatingRange range,
                        const std::string& source_name) {
    RatingSet set;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string_view line = strip_cr(raw);
        if (line.empty()) continue;
        const auto fields = split_tabs(line);
        if (fields.size() != 3 || fields[0].empty() || fields[1].empty())
            throw ParseError(source_name + ":" + std::to_string(line_no) + ": expected user<TAB>item<TAB>rating",
                             line_no);
        const double value = parse_number(fields[2], source_name, line_no);
        if (value < range.min || value > range.max)
            throw ValidationError(source_name + ":" + std::to_string(line_no) + ": rating " + std::string(fields[2]) +
                                  " outside [" + std::to_string(range.min) + ", " + std::to_string(range.max) + "]");
        const Index u = users.intern(fields[0]);
        const Index b = items.intern(fields[1]);
        set.triples.push_back({u, b, value});
    }
    return set;
}

RatingSet load_ratings(const std::filesystem::path& path, EntitySet& users, EntitySet& items, RatingRange range) {
    auto in = open_input(path);
    return parse_ratings(in, users, items, range, path.string());
}

RatingSplit split_ratings(const RatingSet& ratings, SplitFractions fractions, std::uint64_t seed) {
    for (double f : {fractions.train, fractions.valid, fractions.test})
        if (f < 0.0 || !std::isfinite(f)) throw ArgumentError("split fractions must be nonnegative");
    if (std::abs(fractions.train + fractions.valid + fractions.test - 1.0) > 1e-9)
        throw ArgumentError("split fractions must sum to 1");

    const std::size_t n = ratings.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    // The epsilon keeps products like 0.1 * 10 from flooring to 0.
    auto take = [n](double f) { return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9)); };
    const std::size_t n_valid = take(fractions.valid);
    const std::size_t n_test = take(fractions.test);
    const std::size_t n_train = n - n_valid - n_test;

    RatingSplit out;
    out.train.role = SplitRole::train;
    out.valid.role = SplitRole::valid;
    out.test.role = SplitRole::test;
    for (std::size_t k = 0; k < n; ++k) {
        const Rating& r = ratings.triples[order[k]];
        if (k < n_train)
            out.train.triples.push_back(r);
        else if (k < n_train + n_valid)
            out.valid.triples.push_back(r);
        else
            out.test.triples.push_back(r);
    }
    return out;
}

SparseAdjacency rating_adjacency(const RatingSet& ratings, Index users, Index items, bool binarize) {
    std::map<std::pair<Index, Index>, double> summed;
    for (const Rating& r : ratings.triples) {
        if (r.user < 0 || r.user >= users || r.item < 0 || r.item >= items)
            throw ArgumentError("rating index outside user/item range");
        if (binarize)
            summed[{r.user, r.item}] = 1.0;
        else
            summed[{r.user, r.item}] += r.value;
    }
    SparseAdjacency adj{users, items, {}};
    adj.entries.reserve(summed.size());
    for (const auto& [key, w] : summed) adj.entries.push_back({key.first, key.second, w});
    return adj;
}

HinSchema HinSchema::from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    };
    HinSchema schema;
    try {
        for (const auto& e : doc.at("entities")) {
            schema.entity_types.push_back(e.is_string() ? e.get<std::string>() : e.at("name").get<std::string>());
        }
        schema.user_type = doc.value("user_type", schema.user_type);
        schema.item_type = doc.value("item_type", schema.item_type);
        for (const auto& r : doc.at("relations")) {
            RelationSource src;
            src.decl.name = r.at("name").get<std::string>();
            src.decl.head_type = r.at("head").get<std::string>();
            src.decl.tail_type = r.at("tail").get<std::string>();
            src.file = resolve(r.at("file").get<std::string>());
            schema.relations.push_back(std::move(src));
        }
        const auto& ratings = doc.at("ratings");
        schema.ratings_file = resolve(ratings.at("file").get<std::string>());
        schema.rating_relation = ratings.value("relation", schema.rating_relation);
        schema.binarize_ratings = ratings.value("binarize", schema.binarize_ratings);
        if (ratings.contains("range")) {
            schema.rating_range.min = ratings.at("range").at(0).get<double>();
            schema.rating_range.max = ratings.at("range").at(1).get<double>();
        }
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("schema: ") + ex.what());
    }
    auto declared = [&](const std::string& t) {
        return std::find(schema.entity_types.begin(), schema.entity_types.end(), t) != schema.entity_types.end();
    };
    for (const auto& t : {schema.user_type, schema.item_type})
        if (!declared(t)) throw ValidationError("schema: user/item type '" + t + "' is not declared");
    for (const auto& r : schema.relations) {
        if (!declared(r.decl.head_type) || !declared(r.decl.tail_type))
            throw ValidationError("schema: relation '" + r.decl.name + "' uses an undeclared type");
        if (r.decl.name == schema.rating_relation)
            throw ValidationError("schema: relation name '" + r.decl.name + "' is reserved for ratings");
    }
    if (schema.rating_range.min > schema.rating_range.max) throw ValidationError("schema: empty rating range");
    return schema;
}

HinSchema HinSchema::load(const std::filesystem::path& path) {
    auto in = open_input(path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(path.string() + ": " + ex.what());
    }
    return from_json(doc, path.parent_path());
}

std::vector<std::filesystem::path> HinSchema::input_files() const {
    std::vector<std::filesystem::path> files{ratings_file};
    for (const auto& r : relations) files.push_back(r.file);
    return files;
}

IngestResult ingest(const HinSchema& schema) {
    IngestResult result;
    auto& entities = result.hin.entities;
    for (const auto& t : schema.entity_types) entities.emplace(t, EntitySet(t));
    result.ratings = load_ratings(schema.ratings_file, entities.at(schema.user_type), entities.at(schema.item_type),
                                  schema.rating_range);
    for (const auto& src : schema.relations) {
        SparseAdjacency adj = load_edges(src.file, src.decl, entities);
        result.hin.relations.emplace(src.decl.name, Relation{src.decl, std::move(adj)});
    }
    set_rating_relation(result.hin, schema, result.ratings);
    result.hin.sync_shapes();
    return result;
}

void set_rating_relation(HinStore& hin, const HinSchema& schema, const RatingSet& ratings) {
    RelationDecl decl{schema.rating_relation, schema.user_type, schema.item_type};
    SparseAdjacency adj = rating_adjacency(ratings, hin.entity(schema.user_type).count(),
                                           hin.entity(schema.item_type).count(), schema.binarize_ratings);
    hin.relations.insert_or_assign(decl.name, Relation{decl, std::move(adj)});
}

}  // namespace fmg::hin
