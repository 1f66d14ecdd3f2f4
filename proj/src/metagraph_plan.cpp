#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "fmg/error.hpp"
#include "fmg/metagraph.hpp"

namespace fmg::metagraph {

namespace {

class Compiler {
public:
    Compiler(const MetagraphSpec& spec, const hin::HinStore& hin, const CompileOptions& opts)
        : spec_(spec), hin_(hin), opts_(opts) {
        plan_.metagraph = spec.name;
    }

    ExecutionPlan run() {
        for (const auto& node : spec_.nodes)
            if (!hin_.entities.count(node.type))
                throw CompileError("metagraph '" + spec_.name + "': unknown entity type '" + node.type + "'");
        const auto& src = spec_.nodes[static_cast<std::size_t>(spec_.source)].type;
        const auto& dst = spec_.nodes[static_cast<std::size_t>(spec_.sink)].type;
        if (opts_.source_type && *opts_.source_type != src)
            throw CompileError("metagraph '" + spec_.name + "' starts at " + src + ", expected " + *opts_.source_type);
        if (opts_.sink_type && *opts_.sink_type != dst)
            throw CompileError("metagraph '" + spec_.name + "' ends at " + dst + ", expected " + *opts_.sink_type);
        plan_.result = chain(decompose(spec_));
        return std::move(plan_);
    }

private:
    std::size_t chain(const Chain& c) {
        std::vector<std::size_t> factors;
        factors.reserve(c.links.size());
        for (const Link& link : c.links) factors.push_back(link.edge >= 0 ? load(link.edge) : block(link));
        return product(factors);
    }

    std::size_t block(const Link& link) {
        std::size_t acc = chain(link.branches.front());
        for (std::size_t b = 1; b < link.branches.size(); ++b) {
            const std::size_t rhs = chain(link.branches[b]);
            const Shape& ls = plan_.steps[acc].shape;
            if (!(ls == plan_.steps[rhs].shape))
                throw CompileError("metagraph '" + spec_.name + "': parallel branches have different shapes");
            acc = emit(HadamardStep{acc, rhs}, ls);
        }
        return acc;
    }

    std::size_t load(int edge_index) {
        const MetaEdge& e = spec_.edges[static_cast<std::size_t>(edge_index)];
        if (!hin_.has_relation(e.relation))
            throw CompileError("metagraph '" + spec_.name + "': unknown relation '" + e.relation + "'");
        const auto& rel = hin_.relation(e.relation);
        const auto& from = spec_.nodes[static_cast<std::size_t>(e.from)].type;
        const auto& to = spec_.nodes[static_cast<std::size_t>(e.to)].type;
        const Orientation o = resolve_orientation(e, from, to, rel.decl, opts_.strict_direction);
        if (o.warning) plan_.warnings.push_back(*o.warning);
        Shape shape{from, to, hin_.entity(from).count(), hin_.entity(to).count()};
        const Index stored_rows = o.transposed ? rel.adjacency.cols : rel.adjacency.rows;
        const Index stored_cols = o.transposed ? rel.adjacency.rows : rel.adjacency.cols;
        if (stored_rows != shape.rows || stored_cols != shape.cols)
            throw CompileError("metagraph '" + spec_.name + "': relation '" + e.relation +
                               "' shape does not match entity counts");
        return emit(LoadStep{e.relation, o.transposed}, shape);
    }

    // Multiplies factors[0] * ... * factors[k-1], in matrix-chain order when
    // reassociation is on, otherwise left to right.
    std::size_t product(const std::vector<std::size_t>& factors) {
        const std::size_t n = factors.size();
        for (std::size_t i = 0; i + 1 < n; ++i) {
            const Shape& a = plan_.steps[factors[i]].shape;
            const Shape& b = plan_.steps[factors[i + 1]].shape;
            if (a.cols != b.rows || a.col_type != b.row_type)
                throw CompileError("metagraph '" + spec_.name + "': shape mismatch between chained factors");
        }
        if (n == 1) return factors[0];
        if (!opts_.reassociate) {
            std::size_t acc = factors[0];
            for (std::size_t i = 1; i < n; ++i) acc = matmul(acc, factors[i]);
            return acc;
        }
        // dims[i] x dims[i+1] is the shape of factor i.
        std::vector<double> dims(n + 1);
        for (std::size_t i = 0; i < n; ++i) dims[i] = static_cast<double>(plan_.steps[factors[i]].shape.rows);
        dims[n] = static_cast<double>(plan_.steps[factors[n - 1]].shape.cols);
        std::vector<std::vector<double>> cost(n, std::vector<double>(n, 0.0));
        std::vector<std::vector<std::size_t>> split(n, std::vector<std::size_t>(n, 0));
        for (std::size_t len = 2; len <= n; ++len) {
            for (std::size_t i = 0; i + len <= n; ++i) {
                const std::size_t j = i + len - 1;
                cost[i][j] = std::numeric_limits<double>::infinity();
                // Later split points win ties, so equal costs keep left-to-right order.
                for (std::size_t k = i; k < j; ++k) {
                    const double c = cost[i][k] + cost[k + 1][j] + dims[i] * dims[k + 1] * dims[j + 1];
                    if (c <= cost[i][j]) {
                        cost[i][j] = c;
                        split[i][j] = k;
                    }
                }
            }
        }
        return build(factors, split, 0, n - 1);
    }

    std::size_t build(const std::vector<std::size_t>& factors, const std::vector<std::vector<std::size_t>>& split,
                      std::size_t i, std::size_t j) {
        if (i == j) return factors[i];
        const std::size_t k = split[i][j];
        const std::size_t lhs = build(factors, split, i, k);
        const std::size_t rhs = build(factors, split, k + 1, j);
        return matmul(lhs, rhs);
    }

    std::size_t matmul(std::size_t lhs, std::size_t rhs) {
        const Shape& a = plan_.steps[lhs].shape;
        const Shape& b = plan_.steps[rhs].shape;
        return emit(MatMulStep{lhs, rhs}, Shape{a.row_type, b.col_type, a.rows, b.cols});
    }

    template <typename Op>
    std::size_t emit(Op op, Shape shape) {
        plan_.steps.push_back(PlanStep{std::move(op), std::move(shape)});
        return plan_.steps.size() - 1;
    }

    const MetagraphSpec& spec_;
    const hin::HinStore& hin_;
    const CompileOptions& opts_;
    ExecutionPlan plan_;
};

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace

Orientation resolve_orientation(const MetaEdge& edge, const std::string& from_type, const std::string& to_type,
                                const hin::RelationDecl& decl, bool strict) {
    const bool forward_ok = decl.head_type == from_type && decl.tail_type == to_type;
    const bool reverse_ok = decl.head_type == to_type && decl.tail_type == from_type;
    const std::string where = "relation '" + decl.name + "' (" + decl.head_type + " -> " + decl.tail_type + ")";
    if (edge.reversed) {
        if (!reverse_ok)
            throw CompileError(where + " cannot be traversed in reverse from " + from_type + " to " + to_type);
        return {true, std::nullopt};
    }
    if (forward_ok && reverse_ok) {
        if (strict)
            throw CompileError(where + " is ambiguous between " + from_type + " and " + to_type +
                               "; add '~' or reorder");
        return {false, where + " traversed forward by default"};
    }
    if (forward_ok) return {false, std::nullopt};
    if (reverse_ok) return {true, std::nullopt};
    throw CompileError(where + " does not connect " + from_type + " to " + to_type);
}

ExecutionPlan compile_plan(const MetagraphSpec& spec, const hin::HinStore& hin, const CompileOptions& opts) {
    validate_spec(spec);
    return Compiler(spec, hin, opts).run();
}

std::size_t ExecutionPlan::count_loads() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += std::holds_alternative<LoadStep>(s.op);
    return n;
}

std::size_t ExecutionPlan::count_matmuls() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += std::holds_alternative<MatMulStep>(s.op);
    return n;
}

std::size_t ExecutionPlan::count_hadamards() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += std::holds_alternative<HadamardStep>(s.op);
    return n;
}

std::string ExecutionPlan::expression(std::size_t slot) const {
    const auto& op = steps.at(slot).op;
    if (const auto* l = std::get_if<LoadStep>(&op)) return l->relation + (l->transposed ? "^T" : "");
    if (const auto* m = std::get_if<MatMulStep>(&op))
        return "(" + expression(m->left) + " * " + expression(m->right) + ")";
    const auto& h = std::get<HadamardStep>(op);
    return "(" + expression(h.left) + " .* " + expression(h.right) + ")";
}

SimilarityMatrix execute_plan(const ExecutionPlan& plan, const hin::HinStore& hin, const ExecOptions& opts) {
    if (plan.steps.empty()) throw ArgumentError("empty execution plan");
    // Free each slot after its last reader.
    std::vector<std::size_t> last_use(plan.steps.size(), 0);
    for (std::size_t i = 0; i < plan.steps.size(); ++i) {
        std::visit(
            [&](const auto& op) {
                using T = std::decay_t<decltype(op)>;
                if constexpr (!std::is_same_v<T, LoadStep>) {
                    last_use[op.left] = i;
                    last_use[op.right] = i;
                }
            },
            plan.steps[i].op);
    }
    std::vector<sparse::CsrMatrix> slots(plan.steps.size());
    for (std::size_t i = 0; i < plan.steps.size(); ++i) {
        const PlanStep& step = plan.steps[i];
        if (const auto* l = std::get_if<LoadStep>(&step.op)) {
            auto csr = hin.relation(l->relation).adjacency.to_csr();
            slots[i] = l->transposed ? csr.transpose() : std::move(csr);
        } else if (const auto* m = std::get_if<MatMulStep>(&step.op)) {
            slots[i] = slots[m->left].multiply(slots[m->right], opts.nnz_budget);
        } else {
            const auto& h = std::get<HadamardStep>(step.op);
            slots[i] = slots[h.left].hadamard(slots[h.right]);
        }
        if (slots[i].nnz() > opts.nnz_budget)
            throw ResourceError("plan step " + std::to_string(i) + " exceeds the nonzero budget");
        if (slots[i].rows() != step.shape.rows || slots[i].cols() != step.shape.cols)
            throw ArgumentError("plan was compiled against a different HIN (shape mismatch at step " +
                                std::to_string(i) + ")");
        std::visit(
            [&](const auto& op) {
                using T = std::decay_t<decltype(op)>;
                if constexpr (!std::is_same_v<T, LoadStep>) {
                    if (last_use[op.left] == i && op.left != plan.result) slots[op.left] = {};
                    if (last_use[op.right] == i && op.right != plan.result) slots[op.right] = {};
                }
            },
            step.op);
    }
    const double floor = opts.magnitude_floor;
    sparse::CsrMatrix result =
        slots[plan.result].map_values([floor](double v) { return std::abs(v) < floor ? 0.0 : v; }).pruned(0.0);
    if (opts.log_scale) result = result.map_values([](double v) { return std::log1p(v); });
    return {std::move(result), plan.metagraph};
}

void write_similarity(const std::filesystem::path& path, const SimilarityMatrix& sim) {
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write '" + path.string() + "'");
    const auto& m = sim.matrix;
    out << m.rows() << '\t' << m.cols() << '\t' << m.nnz() << '\t' << sim.metagraph << '\n';
    for (const auto& t : m.to_triplets()) out << t.row << '\t' << t.col << '\t' << format_double(t.value) << '\n';
    if (!out) throw ArgumentError("failed writing '" + path.string() + "'");
}

SimilarityMatrix read_similarity(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open '" + path.string() + "'");
    std::string header;
    if (!std::getline(in, header)) throw ParseError(path.string() + ": missing header", 1);
    std::istringstream hs(header);
    Index rows = 0, cols = 0;
    std::size_t nnz = 0;
    SimilarityMatrix sim;
    if (!(hs >> rows >> cols >> nnz)) throw ParseError(path.string() + ": malformed header", 1);
    hs >> std::ws;
    std::getline(hs, sim.metagraph);
    std::vector<sparse::Triplet> triplets;
    triplets.reserve(nnz);
    std::string line;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        sparse::Triplet t;
        std::istringstream ls(line);
        std::string value;
        if (!(ls >> t.row >> t.col >> value)) throw ParseError(path.string() + ": malformed triplet", line_no);
        const auto res = std::from_chars(value.data(), value.data() + value.size(), t.value);
        if (res.ec != std::errc() || res.ptr != value.data() + value.size())
            throw ParseError(path.string() + ": malformed value", line_no);
        triplets.push_back(t);
    }
    if (triplets.size() != nnz) throw ParseError(path.string() + ": nnz in header does not match body");
    sim.matrix = sparse::CsrMatrix::from_triplets(rows, cols, triplets, true);
    return sim;
}

}  // namespace fmg::metagraph
