#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <complex>
#include <vector>

#include <json.hpp>

#include "plm/case_model.hpp"

namespace plm {

// Per-bus load schedule plus per-generator dispatch, in physical units.
// The base schedule comes straight from the case; uncertain inputs and CPF
// load growth both act by editing copies of this structure.
struct Injections {
    Eigen::VectorXd p_load_mw;    // per bus (case order)
    Eigen::VectorXd q_load_mvar;  // per bus
    Eigen::VectorXd p_gen_mw;     // per generator (case order)

    static Injections base(const NetworkCase& cs) {
        Injections inj;
        const int n = cs.n_bus();
        inj.p_load_mw.resize(n);
        inj.q_load_mvar.resize(n);
        for (int i = 0; i < n; ++i) {
            inj.p_load_mw[i] = cs.buses()[i].p_load;
            inj.q_load_mvar[i] = cs.buses()[i].q_load;
        }
        inj.p_gen_mw.resize(static_cast<int>(cs.generators().size()));
        for (std::size_t g = 0; g < cs.generators().size(); ++g)
            inj.p_gen_mw[static_cast<int>(g)] = cs.generators()[g].p_gen;
        return inj;
    }
};

struct PowerFlowOptions {
    double tol = 1e-8;   // max |mismatch| in pu
    int max_iter = 30;
    bool enforce_q_limits = false;
};

struct PowerFlowSolution {
    Eigen::VectorXd v_mag;  // pu
    Eigen::VectorXd v_ang;  // rad
    bool converged = false;
    int iterations = 0;
    double max_mismatch = std::numeric_limits<double>::infinity();  // pu
    double p_slack = 0.0;  // MW
    double q_slack = 0.0;  // MVAr
    std::vector<double> mismatch_history;  // max |mismatch| per iteration
};

inline nlohmann::json to_json(const PowerFlowSolution& s) {
    nlohmann::json j;
    j["converged"] = s.converged;
    j["iterations"] = s.iterations;
    j["max_mismatch"] = s.max_mismatch;
    j["p_slack_mw"] = s.p_slack;
    j["q_slack_mvar"] = s.q_slack;
    j["mismatch_history"] = s.mismatch_history;
    j["v_mag"] = std::vector<double>(s.v_mag.begin(), s.v_mag.end());
    j["v_ang"] = std::vector<double>(s.v_ang.begin(), s.v_ang.end());
    return j;
}

namespace detail {

// Bus classification into equation/unknown index sets.
struct PfIndex {
    int slack = 0;
    std::vector<int> non_slack;  // angle unknowns / P equations
    std::vector<int> pq;         // voltage unknowns / Q equations

    PfIndex(const NetworkCase& cs, const std::vector<BusKind>& kinds) {
        for (int i = 0; i < cs.n_bus(); ++i) {
            if (kinds[i] == BusKind::Slack)
                slack = i;
            else
                non_slack.push_back(i);
            if (kinds[i] == BusKind::PQ) pq.push_back(i);
        }
    }
    int n_eq() const { return static_cast<int>(non_slack.size() + pq.size()); }
};

// Calculated complex power injections (pu) at every bus.
inline void calc_pq(const Eigen::SparseMatrix<std::complex<double>>& Y,
                    const Eigen::VectorXd& v_mag, const Eigen::VectorXd& v_ang,
                    Eigen::VectorXd& p, Eigen::VectorXd& q) {
    const int n = static_cast<int>(v_mag.size());
    p.setZero(n);
    q.setZero(n);
    for (int k = 0; k < Y.outerSize(); ++k)
        for (Eigen::SparseMatrix<std::complex<double>>::InnerIterator it(Y, k); it; ++it) {
            const int i = static_cast<int>(it.row());
            const int j = static_cast<int>(it.col());
            const double g = it.value().real(), b = it.value().imag();
            const double th = v_ang[i] - v_ang[j];
            const double vv = v_mag[i] * v_mag[j];
            p[i] += vv * (g * std::cos(th) + b * std::sin(th));
            q[i] += vv * (g * std::sin(th) - b * std::cos(th));
        }
}

// Scheduled net injections (pu) per bus from the schedule.
inline void scheduled_pq(const NetworkCase& cs, const Injections& inj, Eigen::VectorXd& p_sched,
                         Eigen::VectorXd& q_sched) {
    const int n = cs.n_bus();
    p_sched.resize(n);
    q_sched.resize(n);
    for (int i = 0; i < n; ++i) {
        p_sched[i] = -inj.p_load_mw[i];
        q_sched[i] = -inj.q_load_mvar[i];
    }
    for (std::size_t g = 0; g < cs.generators().size(); ++g) {
        const Generator& gen = cs.generators()[g];
        if (!gen.in_service) continue;
        p_sched[cs.bus_index(gen.bus)] += inj.p_gen_mw[static_cast<int>(g)];
    }
    p_sched /= cs.base_mva();
    q_sched /= cs.base_mva();
}

// Full polar Jacobian w.r.t. [theta(non-slack); v_mag(pq)] of the calculated
// injections, rows ordered [P(non-slack); Q(pq)].
inline Eigen::MatrixXd polar_jacobian(const Eigen::SparseMatrix<std::complex<double>>& Y,
                                      const Eigen::VectorXd& v_mag, const Eigen::VectorXd& v_ang,
                                      const Eigen::VectorXd& p_calc, const Eigen::VectorXd& q_calc,
                                      const PfIndex& idx) {
    const int n = static_cast<int>(v_mag.size());
    const int na = static_cast<int>(idx.non_slack.size());
    const int nv = static_cast<int>(idx.pq.size());
    std::vector<int> arow(n, -1), vcol(n, -1);
    for (int k = 0; k < na; ++k) arow[idx.non_slack[k]] = k;
    for (int k = 0; k < nv; ++k) vcol[idx.pq[k]] = k;

    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(na + nv, na + nv);
    for (int k = 0; k < Y.outerSize(); ++k)
        for (Eigen::SparseMatrix<std::complex<double>>::InnerIterator it(Y, k); it; ++it) {
            const int i = static_cast<int>(it.row());
            const int j = static_cast<int>(it.col());
            const double g = it.value().real(), b = it.value().imag();
            const double th = v_ang[i] - v_ang[j];
            const double ct = std::cos(th), st = std::sin(th);

            if (i == j) {
                if (arow[i] >= 0) {
                    J(arow[i], arow[i]) += -q_calc[i] - b * v_mag[i] * v_mag[i];
                    if (vcol[i] >= 0)
                        J(arow[i], na + vcol[i]) += p_calc[i] / v_mag[i] + g * v_mag[i];
                }
                if (vcol[i] >= 0) {
                    if (arow[i] >= 0)
                        J(na + vcol[i], arow[i]) += p_calc[i] - g * v_mag[i] * v_mag[i];
                    J(na + vcol[i], na + vcol[i]) += q_calc[i] / v_mag[i] - b * v_mag[i];
                }
            } else {
                const double vv = v_mag[i] * v_mag[j];
                if (arow[i] >= 0) {
                    if (arow[j] >= 0) J(arow[i], arow[j]) += vv * (g * st - b * ct);
                    if (vcol[j] >= 0) J(arow[i], na + vcol[j]) += v_mag[i] * (g * ct + b * st);
                }
                if (vcol[i] >= 0) {
                    if (arow[j] >= 0) J(na + vcol[i], arow[j]) += -vv * (g * ct + b * st);
                    if (vcol[j] >= 0) J(na + vcol[i], na + vcol[j]) += v_mag[i] * (g * st - b * ct);
                }
            }
        }
    return J;
}

}  // namespace detail

// Stacked residuals (scheduled minus calculated, pu): P at all non-slack
// buses followed by Q at all PQ buses.
inline Eigen::VectorXd mismatch(const NetworkCase& cs, const Eigen::VectorXd& v_mag,
                                const Eigen::VectorXd& v_ang, const Injections& inj) {
    if (v_mag.size() != cs.n_bus() || v_ang.size() != cs.n_bus())
        throw ValidationError("mismatch: vector length does not equal bus count");

    std::vector<BusKind> kinds;
    for (const Bus& b : cs.buses()) kinds.push_back(b.kind);
    detail::PfIndex idx(cs, kinds);

    const auto Y = admittance_matrix(cs);
    Eigen::VectorXd p_calc, q_calc, p_sched, q_sched;
    detail::calc_pq(Y, v_mag, v_ang, p_calc, q_calc);
    detail::scheduled_pq(cs, inj, p_sched, q_sched);

    Eigen::VectorXd f(idx.n_eq());
    int r = 0;
    for (int i : idx.non_slack) f[r++] = p_sched[i] - p_calc[i];
    for (int i : idx.pq) f[r++] = q_sched[i] - q_calc[i];
    return f;
}

namespace detail {

struct NrWorkspace {
    Eigen::SparseMatrix<std::complex<double>> Y;
    Eigen::VectorXd p_sched, q_sched;
};

// One Newton solve with a fixed bus classification. Start state passed in
// v_mag/v_ang and updated in place.
inline PowerFlowSolution solve_nr_fixed(const NetworkCase& cs, const NrWorkspace& ws,
                                        const std::vector<BusKind>& kinds,
                                        Eigen::VectorXd v_mag, Eigen::VectorXd v_ang,
                                        const PowerFlowOptions& opt) {
    const PfIndex idx(cs, kinds);
    const int na = static_cast<int>(idx.non_slack.size());

    PowerFlowSolution sol;
    Eigen::VectorXd p_calc, q_calc;
    for (int iter = 0;; ++iter) {
        calc_pq(ws.Y, v_mag, v_ang, p_calc, q_calc);

        Eigen::VectorXd f(idx.n_eq());
        int r = 0;
        for (int i : idx.non_slack) f[r++] = ws.p_sched[i] - p_calc[i];
        for (int i : idx.pq) f[r++] = ws.q_sched[i] - q_calc[i];

        sol.max_mismatch = idx.n_eq() == 0 ? 0.0 : f.cwiseAbs().maxCoeff();
        sol.mismatch_history.push_back(sol.max_mismatch);
        sol.iterations = iter;
        if (sol.max_mismatch <= opt.tol) {
            sol.converged = true;
            break;
        }
        if (iter >= opt.max_iter) break;

        const Eigen::MatrixXd J = polar_jacobian(ws.Y, v_mag, v_ang, p_calc, q_calc, idx);
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(J);
        const Eigen::VectorXd dx = lu.solve(f);
        if (!dx.allFinite()) break;  // singular Jacobian: report non-convergence

        for (int k = 0; k < na; ++k) v_ang[idx.non_slack[k]] += dx[k];
        for (std::size_t k = 0; k < idx.pq.size(); ++k)
            v_mag[idx.pq[k]] += dx[na + static_cast<int>(k)];
        if (!(v_mag.minCoeff() > 0.0)) break;  // collapsed voltage, hopeless iterate
    }

    sol.v_mag = std::move(v_mag);
    sol.v_ang = std::move(v_ang);
    calc_pq(ws.Y, sol.v_mag, sol.v_ang, p_calc, q_calc);
    const int s = idx.slack;
    sol.p_slack = p_calc[s] * cs.base_mva();
    sol.q_slack = q_calc[s] * cs.base_mva();
    return sol;
}

}  // namespace detail

// Flat/warm start: PV and slack magnitudes come from generator setpoints.
inline void initial_state(const NetworkCase& cs, Eigen::VectorXd& v_mag,
                          Eigen::VectorXd& v_ang) {
    const int n = cs.n_bus();
    v_mag.resize(n);
    v_ang.setZero(n);
    for (int i = 0; i < n; ++i) v_mag[i] = cs.buses()[i].kind == BusKind::PQ ? 1.0 : cs.buses()[i].v_mag;
    for (const Generator& g : cs.generators()) {
        if (!g.in_service) continue;
        const int i = cs.bus_index(g.bus);
        if (cs.buses()[i].kind != BusKind::PQ) v_mag[i] = g.v_set;
    }
}

// Newton-Raphson AC power flow, polar form. Non-convergence is reported in
// the returned value, not thrown; CPF uses it as a step-rejection signal.
inline PowerFlowSolution solve_nr(const NetworkCase& cs, const Injections& inj,
                                  const PowerFlowOptions& opt = {},
                                  const Eigen::VectorXd* v_mag0 = nullptr,
                                  const Eigen::VectorXd* v_ang0 = nullptr) {
    detail::NrWorkspace ws;
    ws.Y = admittance_matrix(cs);
    detail::scheduled_pq(cs, inj, ws.p_sched, ws.q_sched);

    Eigen::VectorXd v_mag, v_ang;
    initial_state(cs, v_mag, v_ang);
    if (v_mag0) v_mag = *v_mag0;
    if (v_ang0) v_ang = *v_ang0;

    std::vector<BusKind> kinds;
    for (const Bus& b : cs.buses()) kinds.push_back(b.kind);

    PowerFlowSolution sol = detail::solve_nr_fixed(cs, ws, kinds, v_mag, v_ang, opt);
    if (!opt.enforce_q_limits || !sol.converged) return sol;

    // Optional PV -> PQ switching on reactive limits. Aggregated per bus;
    // no reversion back to PV once switched.
    for (int round = 0; round < 10; ++round) {
        Eigen::VectorXd p_calc, q_calc;
        detail::calc_pq(ws.Y, sol.v_mag, sol.v_ang, p_calc, q_calc);
        bool switched = false;
        for (int i = 0; i < cs.n_bus(); ++i) {
            if (kinds[i] != BusKind::PV) continue;
            double qmin = 0.0, qmax = 0.0;
            bool has_gen = false;
            for (const Generator& g : cs.generators())
                if (g.in_service && cs.bus_index(g.bus) == i) {
                    qmin += g.q_min;
                    qmax += g.q_max;
                    has_gen = true;
                }
            if (!has_gen) continue;
            const double q_gen = q_calc[i] * cs.base_mva() + inj.q_load_mvar[i];
            double fix = q_gen;
            if (q_gen > qmax) fix = qmax;
            else if (q_gen < qmin) fix = qmin;
            else continue;
            kinds[i] = BusKind::PQ;
            ws.q_sched[i] = (fix - inj.q_load_mvar[i]) / cs.base_mva();
            switched = true;
        }
        if (!switched) break;
        sol = detail::solve_nr_fixed(cs, ws, kinds, sol.v_mag, sol.v_ang, opt);
        if (!sol.converged) break;
    }
    return sol;
}

}  // namespace plm
