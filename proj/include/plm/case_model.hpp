#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>
#include <algorithm>
#include <complex>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "plm/common.hpp"

namespace plm {

enum class BusKind { Slack, PV, PQ };

struct Bus {
    int id = 0;
    BusKind kind = BusKind::PQ;
    double p_load = 0.0;   // MW
    double q_load = 0.0;   // MVAr
    double g_shunt = 0.0;  // MW at 1 pu V
    double b_shunt = 0.0;  // MVAr at 1 pu V
    double v_mag = 1.0;    // pu
    double v_ang = 0.0;    // rad
    double base_kv = 0.0;  // kV
};

struct Branch {
    int from_bus = 0;
    int to_bus = 0;
    double r = 0.0;           // pu
    double x = 0.0;           // pu
    double b_charging = 0.0;  // pu, total
    double tap = 1.0;         // pu
    double shift = 0.0;       // rad
    bool in_service = true;
};

struct Generator {
    int bus = 0;
    double p_gen = 0.0;  // MW
    double q_gen = 0.0;  // MVAr
    double q_max = 0.0;  // MVAr
    double q_min = 0.0;  // MVAr
    double v_set = 1.0;  // pu
    bool in_service = true;
};

// Immutable after construction; shareable across concurrent workers.
class NetworkCase {
public:
    NetworkCase(double base_mva, std::vector<Bus> buses, std::vector<Branch> branches,
                std::vector<Generator> generators)
        : base_mva_(base_mva),
          buses_(std::move(buses)),
          branches_(std::move(branches)),
          generators_(std::move(generators)) {
        validate();
        for (std::size_t i = 0; i < buses_.size(); ++i) index_of_[buses_[i].id] = static_cast<int>(i);
    }

    double base_mva() const { return base_mva_; }
    const std::vector<Bus>& buses() const { return buses_; }
    const std::vector<Branch>& branches() const { return branches_; }
    const std::vector<Generator>& generators() const { return generators_; }
    int n_bus() const { return static_cast<int>(buses_.size()); }

    // Position of a bus id in the bus list.
    int bus_index(int id) const {
        auto it = index_of_.find(id);
        if (it == index_of_.end())
            throw ValidationError("unknown bus id " + std::to_string(id));
        return it->second;
    }

    int slack_index() const {
        for (std::size_t i = 0; i < buses_.size(); ++i)
            if (buses_[i].kind == BusKind::Slack) return static_cast<int>(i);
        throw ValidationError("no slack bus");  // unreachable after validate()
    }

private:
    void validate() const;

    double base_mva_;
    std::vector<Bus> buses_;
    std::vector<Branch> branches_;
    std::vector<Generator> generators_;
    std::map<int, int> index_of_;
};

inline void NetworkCase::validate() const {
    if (!(base_mva_ > 0.0)) throw ValidationError("base_mva must be positive");
    if (buses_.empty()) throw ValidationError("case has no buses");

    std::set<int> ids;
    int n_slack = 0;
    for (const Bus& b : buses_) {
        if (b.id <= 0) throw ValidationError("bus ids must be positive");
        if (!ids.insert(b.id).second)
            throw ValidationError("duplicate bus id " + std::to_string(b.id));
        if (!(b.v_mag > 0.0))
            throw ValidationError("bus " + std::to_string(b.id) + ": v_mag must be positive");
        if (b.kind == BusKind::Slack) ++n_slack;
    }
    if (n_slack != 1)
        throw ValidationError("case must have exactly one slack bus, found " +
                              std::to_string(n_slack));

    for (const Branch& br : branches_) {
        if (!ids.count(br.from_bus) || !ids.count(br.to_bus))
            throw ValidationError("dangling branch " + std::to_string(br.from_bus) + "-" +
                                  std::to_string(br.to_bus) + ": endpoint bus does not exist");
        if (br.in_service && br.r * br.r + br.x * br.x <= 0.0)
            throw ValidationError("in-service branch " + std::to_string(br.from_bus) + "-" +
                                  std::to_string(br.to_bus) + " has zero impedance");
        if (!(br.tap > 0.0))
            throw ValidationError("branch " + std::to_string(br.from_bus) + "-" +
                                  std::to_string(br.to_bus) + ": tap must be positive");
    }

    std::set<BusKind> gen_kinds;
    for (const Generator& g : generators_) {
        if (!ids.count(g.bus))
            throw ValidationError("generator references unknown bus " + std::to_string(g.bus));
        if (g.q_min > g.q_max)
            throw ValidationError("generator at bus " + std::to_string(g.bus) +
                                  ": q_min > q_max");
        for (const Bus& b : buses_)
            if (b.id == g.bus && b.kind == BusKind::PQ && g.in_service)
                throw ValidationError("generator at bus " + std::to_string(g.bus) +
                                      " attached to a PQ bus");
    }

    // Connectivity with out-of-service branches removed.
    std::map<int, std::vector<int>> adj;
    for (const Branch& br : branches_)
        if (br.in_service) {
            adj[br.from_bus].push_back(br.to_bus);
            adj[br.to_bus].push_back(br.from_bus);
        }
    std::set<int> seen;
    std::queue<int> frontier;
    frontier.push(buses_.front().id);
    seen.insert(buses_.front().id);
    while (!frontier.empty()) {
        int v = frontier.front();
        frontier.pop();
        for (int w : adj[v])
            if (seen.insert(w).second) frontier.push(w);
    }
    if (seen.size() != buses_.size())
        throw ValidationError("case is disconnected: " +
                              std::to_string(buses_.size() - seen.size()) +
                              " bus(es) unreachable from bus " +
                              std::to_string(buses_.front().id));
}

// ---------------------------------------------------------------------------
// MATPOWER-style case parsing
// ---------------------------------------------------------------------------

namespace detail {

struct MatrixBlock {
    std::vector<std::vector<double>> rows;
    int first_line = 0;
};

// Tokenizes the "name = [ rows ];" matrix assignments and the scalar baseMVA
// from MATPOWER .m text. Comments (%) stripped; unknown fields ignored.
struct CaseText {
    double base_mva = 0.0;
    bool have_base = false;
    std::map<std::string, MatrixBlock> matrices;
};

inline CaseText scan_case_text(const std::string& text) {
    CaseText out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    std::optional<std::string> open_matrix;  // matrix currently being read

    while (std::getline(in, line)) {
        ++lineno;
        if (auto pos = line.find('%'); pos != std::string::npos) line.erase(pos);

        if (!open_matrix) {
            auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string lhs = line.substr(0, eq);
            lhs.erase(std::remove_if(lhs.begin(), lhs.end(), [](unsigned char c) {
                          return std::isspace(c);
                      }),
                      lhs.end());
            if (auto dot = lhs.rfind('.'); dot != std::string::npos) lhs = lhs.substr(dot + 1);
            std::string rhs = line.substr(eq + 1);

            if (rhs.find('[') == std::string::npos) {
                // scalar assignment
                if (lhs == "baseMVA") {
                    std::istringstream v(rhs);
                    char semi;
                    if (!(v >> out.base_mva))
                        throw ParseError("line " + std::to_string(lineno) +
                                         ": cannot parse baseMVA value");
                    v >> semi;  // optional ';'
                    out.have_base = true;
                }
                continue;
            }
            open_matrix = lhs;
            out.matrices[lhs].first_line = lineno;
            rhs.erase(0, rhs.find('[') + 1);
            line = rhs;  // fall through: row data may share the '[' line
        }

        // inside a matrix: accumulate rows until ']'
        bool closing = false;
        if (auto pos = line.find(']'); pos != std::string::npos) {
            closing = true;
            line.erase(pos);
        }
        std::istringstream row_in(line);
        std::string tok;
        std::vector<double> row;
        while (row_in >> tok) {
            if (tok == ";") {
                if (!row.empty()) {
                    out.matrices[*open_matrix].rows.push_back(row);
                    row.clear();
                }
                continue;
            }
            while (!tok.empty() && (tok.back() == ';' || tok.back() == ',')) tok.pop_back();
            if (tok.empty()) continue;
            try {
                std::size_t used = 0;
                double v = std::stod(tok, &used);
                if (used != tok.size()) throw std::invalid_argument(tok);
                row.push_back(v);
            } catch (const std::exception&) {
                throw ParseError("line " + std::to_string(lineno) + ": bad numeric token '" +
                                 tok + "'");
            }
        }
        if (!row.empty()) out.matrices[*open_matrix].rows.push_back(row);
        if (closing) open_matrix.reset();
    }
    if (open_matrix)
        throw ParseError("matrix '" + *open_matrix + "' opened at line " +
                         std::to_string(out.matrices[*open_matrix].first_line) +
                         " is never closed");
    return out;
}

inline double col(const std::vector<double>& row, std::size_t j, const char* what, int line) {
    if (j >= row.size())
        throw ParseError(std::string("row near line ") + std::to_string(line) + ": missing " +
                         what + " column " + std::to_string(j + 1));
    return row[j];
}

}  // namespace detail

inline NetworkCase parse_case(const std::string& text) {
    const auto scan = detail::scan_case_text(text);
    if (!scan.have_base) throw ParseError("missing baseMVA assignment");
    auto need = [&](const char* name) -> const detail::MatrixBlock& {
        auto it = scan.matrices.find(name);
        if (it == scan.matrices.end())
            throw ParseError(std::string("missing matrix '") + name + "'");
        return it->second;
    };

    const auto& bus_blk = need("bus");
    const auto& gen_blk = need("gen");
    const auto& branch_blk = need("branch");

    std::vector<Bus> buses;
    for (const auto& row : bus_blk.rows) {
        const int ln = bus_blk.first_line;
        Bus b;
        b.id = static_cast<int>(detail::col(row, 0, "bus id", ln));
        const int type = static_cast<int>(detail::col(row, 1, "bus type", ln));
        switch (type) {
            case 1: b.kind = BusKind::PQ; break;
            case 2: b.kind = BusKind::PV; break;
            case 3: b.kind = BusKind::Slack; break;
            default:
                throw ParseError("bus " + std::to_string(b.id) + ": unknown type " +
                                 std::to_string(type));
        }
        b.p_load = detail::col(row, 2, "Pd", ln);
        b.q_load = detail::col(row, 3, "Qd", ln);
        b.g_shunt = detail::col(row, 4, "Gs", ln);
        b.b_shunt = detail::col(row, 5, "Bs", ln);
        b.v_mag = detail::col(row, 7, "Vm", ln);
        b.v_ang = detail::col(row, 8, "Va", ln) * M_PI / 180.0;
        b.base_kv = detail::col(row, 9, "baseKV", ln);
        buses.push_back(b);
    }

    std::vector<Generator> gens;
    for (const auto& row : gen_blk.rows) {
        const int ln = gen_blk.first_line;
        Generator g;
        g.bus = static_cast<int>(detail::col(row, 0, "gen bus", ln));
        g.p_gen = detail::col(row, 1, "Pg", ln);
        g.q_gen = detail::col(row, 2, "Qg", ln);
        g.q_max = detail::col(row, 3, "Qmax", ln);
        g.q_min = detail::col(row, 4, "Qmin", ln);
        g.v_set = detail::col(row, 5, "Vg", ln);
        g.in_service = detail::col(row, 7, "gen status", ln) > 0.5;
        gens.push_back(g);
    }

    std::vector<Branch> branches;
    for (const auto& row : branch_blk.rows) {
        const int ln = branch_blk.first_line;
        Branch br;
        br.from_bus = static_cast<int>(detail::col(row, 0, "fbus", ln));
        br.to_bus = static_cast<int>(detail::col(row, 1, "tbus", ln));
        br.r = detail::col(row, 2, "r", ln);
        br.x = detail::col(row, 3, "x", ln);
        br.b_charging = detail::col(row, 4, "b", ln);
        const double ratio = row.size() > 8 ? row[8] : 0.0;
        br.tap = ratio == 0.0 ? 1.0 : ratio;  // MATPOWER: 0 means no transformer
        br.shift = (row.size() > 9 ? row[9] : 0.0) * M_PI / 180.0;
        br.in_service = (row.size() > 10 ? row[10] : 1.0) > 0.5;
        branches.push_back(br);
    }

    // Drop out-of-service branches before connectivity checks (they stay in
    // the branch list but are ignored by the admittance builder too).
    return NetworkCase(scan.base_mva, std::move(buses), std::move(branches), std::move(gens));
}

// ---------------------------------------------------------------------------
// Bus admittance matrix
// ---------------------------------------------------------------------------

inline Eigen::SparseMatrix<std::complex<double>> admittance_matrix(const NetworkCase& cs) {
    using cplx = std::complex<double>;
    const int n = cs.n_bus();
    std::vector<Eigen::Triplet<cplx>> trip;
    trip.reserve(4 * cs.branches().size() + n);

    for (const Branch& br : cs.branches()) {
        if (!br.in_service) continue;
        const int f = cs.bus_index(br.from_bus);
        const int t = cs.bus_index(br.to_bus);
        const cplx ys = 1.0 / cplx(br.r, br.x);
        const cplx ysh(0.0, 0.5 * br.b_charging);
        const cplx tap = std::polar(br.tap, br.shift);
        trip.emplace_back(f, f, (ys + ysh) / (br.tap * br.tap));
        trip.emplace_back(t, t, ys + ysh);
        trip.emplace_back(f, t, -ys / std::conj(tap));
        trip.emplace_back(t, f, -ys / tap);
    }
    for (int i = 0; i < n; ++i) {
        const Bus& b = cs.buses()[i];
        trip.emplace_back(i, i, cplx(b.g_shunt, b.b_shunt) / cs.base_mva());
    }

    Eigen::SparseMatrix<cplx> Y(n, n);
    Y.setFromTriplets(trip.begin(), trip.end());
    return Y;
}

// ---------------------------------------------------------------------------
// JSON serialization (debug output + round-trip checks)
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const NetworkCase& cs) {
    nlohmann::json j;
    j["base_mva"] = cs.base_mva();
    for (const Bus& b : cs.buses())
        j["buses"].push_back({{"id", b.id},
                              {"kind", b.kind == BusKind::Slack ? "slack"
                                       : b.kind == BusKind::PV  ? "pv"
                                                                : "pq"},
                              {"p_load", b.p_load},
                              {"q_load", b.q_load},
                              {"g_shunt", b.g_shunt},
                              {"b_shunt", b.b_shunt},
                              {"v_mag", b.v_mag},
                              {"v_ang", b.v_ang},
                              {"base_kv", b.base_kv}});
    for (const Branch& br : cs.branches())
        j["branches"].push_back({{"from_bus", br.from_bus},
                                 {"to_bus", br.to_bus},
                                 {"r", br.r},
                                 {"x", br.x},
                                 {"b_charging", br.b_charging},
                                 {"tap", br.tap},
                                 {"shift", br.shift},
                                 {"in_service", br.in_service}});
    for (const Generator& g : cs.generators())
        j["generators"].push_back({{"bus", g.bus},
                                   {"p_gen", g.p_gen},
                                   {"q_gen", g.q_gen},
                                   {"q_max", g.q_max},
                                   {"q_min", g.q_min},
                                   {"v_set", g.v_set},
                                   {"in_service", g.in_service}});
    return j;
}

inline NetworkCase case_from_json(const nlohmann::json& j) {
    std::vector<Bus> buses;
    for (const auto& jb : j.at("buses")) {
        Bus b;
        b.id = jb.at("id");
        const std::string kind = jb.at("kind");
        b.kind = kind == "slack" ? BusKind::Slack : kind == "pv" ? BusKind::PV : BusKind::PQ;
        b.p_load = jb.at("p_load");
        b.q_load = jb.at("q_load");
        b.g_shunt = jb.at("g_shunt");
        b.b_shunt = jb.at("b_shunt");
        b.v_mag = jb.at("v_mag");
        b.v_ang = jb.at("v_ang");
        b.base_kv = jb.at("base_kv");
        buses.push_back(b);
    }
    std::vector<Branch> branches;
    if (j.contains("branches"))
        for (const auto& jb : j.at("branches")) {
            Branch br;
            br.from_bus = jb.at("from_bus");
            br.to_bus = jb.at("to_bus");
            br.r = jb.at("r");
            br.x = jb.at("x");
            br.b_charging = jb.at("b_charging");
            br.tap = jb.at("tap");
            br.shift = jb.at("shift");
            br.in_service = jb.at("in_service");
            branches.push_back(br);
        }
    std::vector<Generator> gens;
    if (j.contains("generators"))
        for (const auto& jg : j.at("generators")) {
            Generator g;
            g.bus = jg.at("bus");
            g.p_gen = jg.at("p_gen");
            g.q_gen = jg.at("q_gen");
            g.q_max = jg.at("q_max");
            g.q_min = jg.at("q_min");
            g.v_set = jg.at("v_set");
            g.in_service = jg.at("in_service");
            gens.push_back(g);
        }
    return NetworkCase(j.at("base_mva"), std::move(buses), std::move(branches), std::move(gens));
}

}  // namespace plm
