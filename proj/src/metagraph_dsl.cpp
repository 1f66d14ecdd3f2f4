#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "fmg/error.hpp"
#include "fmg/metagraph.hpp"

namespace fmg::metagraph {

namespace {

class Parser {
public:
    explicit Parser(std::string_view text) : text_(text) {}

    MetagraphSpec run() {
        skip_ws();
        spec_.name = identifier("metagraph name");
        expect(":");
        parse_chain();
        skip_ws();
        if (pos_ != text_.size()) fail("unexpected trailing input");
        validate_spec(spec_);
        return std::move(spec_);
    }

private:
    // Edge indices whose `to` is filled in by the next parsed node.
    using Dangling = std::vector<std::size_t>;

    void parse_chain() {
        NodeId current = parse_node();
        spec_.source = current;
        while (at_link()) {
            Dangling open = parse_link(current);
            current = parse_node();
            attach(open, current);
        }
        spec_.sink = current;
    }

    Dangling parse_link(NodeId from) {
        skip_ws();
        if (consume("-[")) {
            skip_ws();
            MetaEdge edge;
            edge.from = from;
            edge.to = -1;
            edge.relation = identifier("relation name");
            skip_ws();
            edge.reversed = consume("~");
            expect("]-");
            spec_.edges.push_back(std::move(edge));
            return {spec_.edges.size() - 1};
        }
        if (consume("-(")) {
            const std::size_t block_start = pos_;
            Dangling open = parse_branch(from);
            std::size_t branches = 1;
            while (true) {
                skip_ws();
                if (consume("|")) {
                    Dangling more = parse_branch(from);
                    open.insert(open.end(), more.begin(), more.end());
                    ++branches;
                    continue;
                }
                break;
            }
            expect(")-");
            if (branches < 2) fail("parallel block needs at least two branches", block_start);
            return open;
        }
        fail("expected '-[' or '-('");
    }

    Dangling parse_branch(NodeId from) {
        Dangling open = parse_link(from);
        while (true) {
            skip_ws();
            if (!at_identifier()) return open;
            const NodeId mid = parse_node();
            attach(open, mid);
            open = parse_link(mid);
        }
    }

    NodeId parse_node() {
        skip_ws();
        const auto id = static_cast<NodeId>(spec_.nodes.size());
        spec_.nodes.push_back({id, identifier("entity type")});
        return id;
    }

    void attach(const Dangling& open, NodeId to) {
        for (std::size_t e : open) spec_.edges[e].to = to;
    }

    bool at_link() {
        skip_ws();
        return text_.substr(pos_, 2) == "-[" || text_.substr(pos_, 2) == "-(";
    }

    bool at_identifier() const {
        return pos_ < text_.size() && (std::isalpha(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_');
    }

    std::string identifier(const char* what) {
        skip_ws();
        if (!at_identifier()) fail(std::string("expected ") + what);
        const std::size_t start = pos_;
        while (pos_ < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_'))
            ++pos_;
        return std::string(text_.substr(start, pos_ - start));
    }

    bool consume(std::string_view token) {
        if (text_.substr(pos_, token.size()) == token) {
            pos_ += token.size();
            return true;
        }
        return false;
    }

    void expect(std::string_view token) {
        skip_ws();
        if (!consume(token)) fail("expected '" + std::string(token) + "'");
    }

    void skip_ws() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    }

    [[noreturn]] void fail(const std::string& msg) { fail(msg, pos_); }
    [[noreturn]] void fail(const std::string& msg, std::size_t at) {
        throw ParseError("metagraph syntax error at position " + std::to_string(at) + ": " + msg, 0, at);
    }

    std::string_view text_;
    std::size_t pos_ = 0;
    MetagraphSpec spec_;
};

struct Adjacency {
    std::vector<std::vector<int>> out;  // edge indices, ascending
    std::vector<std::vector<int>> in;
};

Adjacency adjacency_of(const MetagraphSpec& spec) {
    Adjacency adj;
    adj.out.resize(spec.nodes.size());
    adj.in.resize(spec.nodes.size());
    for (std::size_t e = 0; e < spec.edges.size(); ++e) {
        adj.out[static_cast<std::size_t>(spec.edges[e].from)].push_back(static_cast<int>(e));
        adj.in[static_cast<std::size_t>(spec.edges[e].to)].push_back(static_cast<int>(e));
    }
    return adj;
}

// Kahn's algorithm; empty result means a cycle.
std::vector<NodeId> topo_order(const MetagraphSpec& spec, const Adjacency& adj) {
    std::vector<std::size_t> indeg(spec.nodes.size());
    for (std::size_t v = 0; v < spec.nodes.size(); ++v) indeg[v] = adj.in[v].size();
    std::vector<NodeId> ready, order;
    for (std::size_t v = 0; v < spec.nodes.size(); ++v)
        if (indeg[v] == 0) ready.push_back(static_cast<NodeId>(v));
    while (!ready.empty()) {
        const NodeId v = ready.front();
        ready.erase(ready.begin());
        order.push_back(v);
        for (int e : adj.out[static_cast<std::size_t>(v)]) {
            const auto to = static_cast<std::size_t>(spec.edges[static_cast<std::size_t>(e)].to);
            if (--indeg[to] == 0) ready.push_back(static_cast<NodeId>(to));
        }
    }
    if (order.size() != spec.nodes.size()) return {};
    return order;
}

class Decomposer {
public:
    explicit Decomposer(const MetagraphSpec& spec) : spec_(spec), adj_(adjacency_of(spec)), used_(spec.edges.size()) {
        const auto order = topo_order(spec, adj_);
        if (order.empty()) throw ValidationError("metagraph '" + spec.name + "': cycle detected");
        // Post-dominator sets, computed in reverse topological order.
        pdom_.resize(spec.nodes.size());
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            const auto v = static_cast<std::size_t>(*it);
            std::set<NodeId> acc;
            bool first = true;
            for (int e : adj_.out[v]) {
                const auto& succ = pdom_[static_cast<std::size_t>(spec.edges[static_cast<std::size_t>(e)].to)];
                if (first) {
                    acc = succ;
                    first = false;
                } else {
                    std::set<NodeId> keep;
                    std::set_intersection(acc.begin(), acc.end(), succ.begin(), succ.end(),
                                          std::inserter(keep, keep.begin()));
                    acc = std::move(keep);
                }
            }
            acc.insert(static_cast<NodeId>(v));
            pdom_[v] = std::move(acc);
        }
    }

    Chain run() {
        Chain chain = reduce(spec_.source, spec_.sink);
        if (std::find(used_.begin(), used_.end(), false) != used_.end())
            throw ValidationError("metagraph '" + spec_.name + "' has edges off every source-sink path");
        return chain;
    }

private:
    Chain reduce(NodeId from, NodeId stop) {
        Chain chain;
        chain.nodes.push_back(from);
        NodeId cur = from;
        while (cur != stop) {
            const auto& outs = adj_.out[static_cast<std::size_t>(cur)];
            if (outs.empty()) throw ValidationError("metagraph '" + spec_.name + "' is not series-parallel");
            Link link;
            NodeId next;
            if (outs.size() == 1) {
                link.edge = take(outs[0]);
                next = spec_.edges[static_cast<std::size_t>(outs[0])].to;
            } else {
                next = immediate_post_dominator(cur);
                for (int e : outs) {
                    Chain branch;
                    branch.nodes.push_back(cur);
                    Link first;
                    first.edge = take(e);
                    branch.links.push_back(std::move(first));
                    Chain rest = reduce(spec_.edges[static_cast<std::size_t>(e)].to, next);
                    branch.nodes.insert(branch.nodes.end(), rest.nodes.begin(), rest.nodes.end());
                    for (auto& l : rest.links) branch.links.push_back(std::move(l));
                    link.branches.push_back(std::move(branch));
                }
            }
            chain.links.push_back(std::move(link));
            chain.nodes.push_back(next);
            cur = next;
        }
        return chain;
    }

    int take(int e) {
        if (used_[static_cast<std::size_t>(e)])
            throw ValidationError("metagraph '" + spec_.name + "' is not series-parallel");
        used_[static_cast<std::size_t>(e)] = true;
        return e;
    }

    NodeId immediate_post_dominator(NodeId v) const {
        const auto& mine = pdom_[static_cast<std::size_t>(v)];
        // The strict post-dominator whose own set is mine minus v.
        for (NodeId cand : mine) {
            if (cand == v) continue;
            if (pdom_[static_cast<std::size_t>(cand)].size() + 1 == mine.size()) return cand;
        }
        throw ValidationError("metagraph '" + spec_.name + "' has no join for a split");
    }

    const MetagraphSpec& spec_;
    Adjacency adj_;
    std::vector<bool> used_;
    std::vector<std::set<NodeId>> pdom_;
};

void check_blocks(const MetagraphSpec& spec, const Chain& chain) {
    for (std::size_t i = 0; i < chain.links.size(); ++i) {
        const Link& link = chain.links[i];
        if (link.edge >= 0) continue;
        const auto& split = spec.nodes[static_cast<std::size_t>(chain.nodes[i])];
        const auto& join = spec.nodes[static_cast<std::size_t>(chain.nodes[i + 1])];
        if (split.type != join.type)
            throw ValidationError("metagraph '" + spec.name + "': parallel block branches run " + split.type + " -> " +
                                  join.type + "; branch endpoint types must agree");
        for (const Chain& b : link.branches) check_blocks(spec, b);
    }
}

void print_chain(const MetagraphSpec& spec, const Chain& chain, bool with_endpoints, std::string& out) {
    auto node = [&](std::size_t k) { out += spec.nodes[static_cast<std::size_t>(chain.nodes[k])].type; };
    if (with_endpoints) node(0);
    for (std::size_t i = 0; i < chain.links.size(); ++i) {
        const Link& link = chain.links[i];
        if (!out.empty()) out += ' ';
        if (link.edge >= 0) {
            const MetaEdge& e = spec.edges[static_cast<std::size_t>(link.edge)];
            out += "-[" + e.relation + (e.reversed ? "~" : "") + "]-";
        } else {
            out += "-(";
            for (std::size_t b = 0; b < link.branches.size(); ++b) {
                if (b > 0) out += " |";
                print_chain(spec, link.branches[b], false, out);
            }
            out += " )-";
        }
        const bool last = i + 1 == chain.links.size();
        if (!last || with_endpoints) {
            out += ' ';
            node(i + 1);
        }
    }
}

}  // namespace

MetagraphSpec parse_metagraph(std::string_view text) { return Parser(text).run(); }

std::vector<MetagraphSpec> parse_metagraphs(std::string_view text) {
    std::vector<MetagraphSpec> specs;
    std::string stanza;
    std::size_t stanza_line = 0;
    std::size_t line_no = 0;
    auto flush = [&] {
        if (stanza.find_first_not_of(" \t") == std::string::npos) {
            stanza.clear();
            return;
        }
        try {
            specs.push_back(parse_metagraph(stanza));
        } catch (const ParseError& ex) {
            throw ParseError(std::string(ex.what()) + " (stanza starting at line " + std::to_string(stanza_line) + ")",
                             stanza_line, ex.position());
        }
        stanza.clear();
    };
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            flush();
            continue;
        }
        if (stanza.empty()) stanza_line = line_no;
        stanza += line;
        stanza += ' ';
    }
    flush();
    std::set<std::string> names;
    for (const auto& s : specs)
        if (!names.insert(s.name).second) throw ValidationError("duplicate metagraph name '" + s.name + "'");
    return specs;
}

std::vector<MetagraphSpec> load_metagraphs(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_metagraphs(buf.str());
}

void validate_spec(const MetagraphSpec& spec) {
    const std::size_t n = spec.nodes.size();
    if (n == 0) throw ValidationError("metagraph '" + spec.name + "' has no nodes");
    for (std::size_t v = 0; v < n; ++v)
        if (spec.nodes[v].id != static_cast<NodeId>(v))
            throw ValidationError("metagraph '" + spec.name + "': node ids must be 0..n-1 in order");
    for (const auto& e : spec.edges) {
        if (e.from < 0 || e.to < 0 || static_cast<std::size_t>(e.from) >= n || static_cast<std::size_t>(e.to) >= n)
            throw ValidationError("metagraph '" + spec.name + "': edge endpoint out of range");
        if (e.from == e.to) throw ValidationError("metagraph '" + spec.name + "': cycle detected (self loop)");
    }
    if (spec.edges.empty()) throw ValidationError("metagraph '" + spec.name + "' has no edges");
    const Adjacency adj = adjacency_of(spec);
    if (topo_order(spec, adj).empty()) throw ValidationError("metagraph '" + spec.name + "': cycle detected");
    std::vector<NodeId> sources, sinks;
    for (std::size_t v = 0; v < n; ++v) {
        if (adj.in[v].empty()) sources.push_back(static_cast<NodeId>(v));
        if (adj.out[v].empty()) sinks.push_back(static_cast<NodeId>(v));
    }
    if (sources.size() != 1) throw ValidationError("metagraph '" + spec.name + "': expected exactly one source node");
    if (sinks.size() != 1) throw ValidationError("metagraph '" + spec.name + "': expected exactly one sink node");
    if (sources[0] != spec.source || sinks[0] != spec.sink)
        throw ValidationError("metagraph '" + spec.name + "': declared source/sink disagree with the graph");
    check_blocks(spec, decompose(spec));
}

Chain decompose(const MetagraphSpec& spec) { return Decomposer(spec).run(); }

std::string to_dsl(const MetagraphSpec& spec) {
    std::string body;
    print_chain(spec, decompose(spec), true, body);
    return spec.name + ": " + body;
}

}  // namespace fmg::metagraph
