#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "plm/powerflow.hpp"

namespace plm {

// Direction of load/generation growth per unit of the continuation
// parameter lambda. delta_p/delta_q are per bus (MW, MVAr per unit lambda);
// gen_participation distributes the total MW pickup over generators.
struct GrowthDirection {
    Eigen::VectorXd delta_p;            // per bus, MW per unit lambda
    Eigen::VectorXd delta_q;            // per bus, MVAr per unit lambda
    Eigen::VectorXd gen_participation;  // per generator, sums to 1

    double total_delta_p() const { return delta_p.sum(); }

    // Uniform scaling of all base loads at constant power factor; pickup
    // shared among in-service non-slack generators proportionally to base
    // output (slack absorbs losses). Falls back to the slack generator when
    // no non-slack generator produces power.
    static GrowthDirection uniform(const NetworkCase& cs) {
        GrowthDirection d;
        const int n = cs.n_bus();
        d.delta_p.resize(n);
        d.delta_q.resize(n);
        for (int i = 0; i < n; ++i) {
            d.delta_p[i] = cs.buses()[i].p_load;
            d.delta_q[i] = cs.buses()[i].q_load;
        }
        d.gen_participation = participation_by_base_output(cs);
        return d;
    }

    // Growth confined to a single bus at constant power factor.
    static GrowthDirection single_bus(const NetworkCase& cs, int bus_id) {
        GrowthDirection d;
        const int n = cs.n_bus();
        d.delta_p.setZero(n);
        d.delta_q.setZero(n);
        const int i = cs.bus_index(bus_id);
        const Bus& b = cs.buses()[i];
        d.delta_p[i] = b.p_load > 0.0 ? b.p_load : 1.0;
        d.delta_q[i] = b.p_load > 0.0 ? b.q_load : 0.0;
        d.gen_participation = participation_by_base_output(cs);
        return d;
    }

    void validate(const NetworkCase& cs) const {
        if (delta_p.size() != cs.n_bus() || delta_q.size() != cs.n_bus())
            throw ValidationError("growth direction: per-bus vector length mismatch");
        if (gen_participation.size() != static_cast<int>(cs.generators().size()))
            throw ValidationError("growth direction: participation length mismatch");
        if (delta_p.cwiseAbs().maxCoeff() == 0.0)
            throw ValidationError("growth direction: all delta_p are zero");
        if (std::abs(gen_participation.sum() - 1.0) > 1e-12)
            throw ValidationError("growth direction: participation does not sum to 1");
    }

private:
    static Eigen::VectorXd participation_by_base_output(const NetworkCase& cs) {
        const auto& gens = cs.generators();
        Eigen::VectorXd part = Eigen::VectorXd::Zero(static_cast<int>(gens.size()));
        const int slack = cs.slack_index();
        double total = 0.0;
        for (std::size_t g = 0; g < gens.size(); ++g)
            if (gens[g].in_service && cs.bus_index(gens[g].bus) != slack && gens[g].p_gen > 0.0)
                total += gens[g].p_gen;
        if (total > 0.0) {
            for (std::size_t g = 0; g < gens.size(); ++g)
                if (gens[g].in_service && cs.bus_index(gens[g].bus) != slack &&
                    gens[g].p_gen > 0.0)
                    part[static_cast<int>(g)] = gens[g].p_gen / total;
        } else {
            for (std::size_t g = 0; g < gens.size(); ++g)
                if (gens[g].in_service && cs.bus_index(gens[g].bus) == slack) {
                    part[static_cast<int>(g)] = 1.0;
                    break;
                }
        }
        return part;
    }
};

enum class CpfTermination { NosePassed, StepFloor, MaxSteps, CorrectorFailure };

struct TracePoint {
    double lambda = 0.0;
    Eigen::VectorXd v_mag;
    Eigen::VectorXd v_ang;
};

struct ContinuationTrace {
    std::vector<TracePoint> points;  // accepted corrector solutions, in order
    int nose_index = 0;              // index of the max-lambda point
    CpfTermination terminated_reason = CpfTermination::MaxSteps;

    double lambda_max() const { return points.empty() ? 0.0 : points[nose_index].lambda; }
};

struct LoadMargin {
    double lambda_max = 0.0;
    double margin_mw = 0.0;         // lambda_max * sum(delta_p)
    double margin_at_bus_mw = 0.0;  // lambda_max * delta_p[target]
    bool reliable = true;
};

struct CpfOptions {
    double initial_step = 0.1;       // arc step, lambda units at the base tangent
    double min_step = 1e-4;          // step floor; also the nose localization tol
    double max_step = 0.5;
    int max_steps = 500;
    double corrector_tol = 1e-8;
    int corrector_max_iter = 15;
};

namespace detail {

// Injections at a given lambda along the growth direction.
inline Injections injections_at(const NetworkCase& cs, const Injections& base,
                                const GrowthDirection& dir, double lambda) {
    Injections inj = base;
    inj.p_load_mw += lambda * dir.delta_p;
    inj.q_load_mvar += lambda * dir.delta_q;
    const double pickup = lambda * dir.total_delta_p();
    for (int g = 0; g < inj.p_gen_mw.size(); ++g)
        inj.p_gen_mw[g] += pickup * dir.gen_participation[g];
    return inj;
}

// Lambda-parameterized corrector/tangent machinery over the reduced state
// z = [theta(non-slack); v_mag(pq); lambda].
struct CpfSystem {
    const NetworkCase& cs;
    const Injections& base;
    const GrowthDirection& dir;
    Eigen::SparseMatrix<std::complex<double>> Y;
    PfIndex idx;
    Eigen::VectorXd p_sched0, q_sched0;  // at lambda = 0
    Eigen::VectorXd dp_dlam, dq_dlam;    // d(scheduled)/d(lambda), pu, per bus

    CpfSystem(const NetworkCase& cs_, const Injections& base_, const GrowthDirection& dir_)
        : cs(cs_), base(base_), dir(dir_), idx(cs_, kinds_of(cs_)) {
        Y = admittance_matrix(cs);
        scheduled_pq(cs, base, p_sched0, q_sched0);

        const int n = cs.n_bus();
        dp_dlam.setZero(n);
        dq_dlam.setZero(n);
        const double total = dir.total_delta_p();
        for (int i = 0; i < n; ++i) {
            dp_dlam[i] = -dir.delta_p[i];
            dq_dlam[i] = -dir.delta_q[i];
        }
        for (std::size_t g = 0; g < cs.generators().size(); ++g)
            if (cs.generators()[g].in_service)
                dp_dlam[cs.bus_index(cs.generators()[g].bus)] +=
                    total * dir.gen_participation[static_cast<int>(g)];
        dp_dlam /= cs.base_mva();
        dq_dlam /= cs.base_mva();
    }

    static std::vector<BusKind> kinds_of(const NetworkCase& cs) {
        std::vector<BusKind> k;
        for (const Bus& b : cs.buses()) k.push_back(b.kind);
        return k;
    }

    int n_state() const { return idx.n_eq() + 1; }  // + lambda

    // Residual (scheduled - calculated) at state z.
    Eigen::VectorXd residual(const Eigen::VectorXd& v_mag, const Eigen::VectorXd& v_ang,
                             double lambda) const {
        Eigen::VectorXd p_calc, q_calc;
        calc_pq(Y, v_mag, v_ang, p_calc, q_calc);
        Eigen::VectorXd f(idx.n_eq());
        int r = 0;
        for (int i : idx.non_slack) f[r++] = p_sched0[i] + lambda * dp_dlam[i] - p_calc[i];
        for (int i : idx.pq) f[r++] = q_sched0[i] + lambda * dq_dlam[i] - q_calc[i];
        return f;
    }

    // d(residual)/d[theta; v; lambda]; the power-flow Jacobian is negated
    // because the residual subtracts the calculated injections.
    Eigen::MatrixXd augmented_jacobian(const Eigen::VectorXd& v_mag,
                                       const Eigen::VectorXd& v_ang) const {
        Eigen::VectorXd p_calc, q_calc;
        calc_pq(Y, v_mag, v_ang, p_calc, q_calc);
        const Eigen::MatrixXd J = polar_jacobian(Y, v_mag, v_ang, p_calc, q_calc, idx);
        Eigen::MatrixXd A(idx.n_eq(), n_state());
        A.leftCols(idx.n_eq()) = -J;
        int r = 0;
        for (int i : idx.non_slack) A(r++, idx.n_eq()) = dp_dlam[i];
        for (int i : idx.pq) A(r++, idx.n_eq()) = dq_dlam[i];
        return A;
    }

    void apply_delta(Eigen::VectorXd& v_mag, Eigen::VectorXd& v_ang, double& lambda,
                     const Eigen::VectorXd& dz) const {
        const int na = static_cast<int>(idx.non_slack.size());
        for (int k = 0; k < na; ++k) v_ang[idx.non_slack[k]] += dz[k];
        for (std::size_t k = 0; k < idx.pq.size(); ++k)
            v_mag[idx.pq[k]] += dz[na + static_cast<int>(k)];
        lambda += dz[n_state() - 1];
    }

    // Unit tangent of the solution curve with the continuation index fixed
    // to +-1 before normalization.
    std::optional<Eigen::VectorXd> tangent(const Eigen::VectorXd& v_mag,
                                           const Eigen::VectorXd& v_ang, int k_index) const {
        const int m = n_state();
        Eigen::MatrixXd A(m, m);
        A.topRows(m - 1) = augmented_jacobian(v_mag, v_ang);
        A.row(m - 1).setZero();
        A(m - 1, k_index) = 1.0;
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m);
        rhs[m - 1] = 1.0;
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
        Eigen::VectorXd t = lu.solve(rhs);
        if (!t.allFinite()) return std::nullopt;
        return t.normalized();
    }

    // Newton corrector with component k fixed at its predicted value.
    bool correct(Eigen::VectorXd& v_mag, Eigen::VectorXd& v_ang, double& lambda, int k_index,
                 const CpfOptions& opt) const {
        const int m = n_state();
        for (int iter = 0; iter < opt.corrector_max_iter; ++iter) {
            const Eigen::VectorXd f = residual(v_mag, v_ang, lambda);
            if (f.cwiseAbs().maxCoeff() <= opt.corrector_tol) return true;
            Eigen::MatrixXd A(m, m);
            A.topRows(m - 1) = -augmented_jacobian(v_mag, v_ang);  // Newton on -residual
            A.row(m - 1).setZero();
            A(m - 1, k_index) = 1.0;
            Eigen::VectorXd rhs(m);
            rhs.head(m - 1) = f;
            rhs[m - 1] = 0.0;
            Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
            const Eigen::VectorXd dz = lu.solve(rhs);
            if (!dz.allFinite()) return false;
            apply_delta(v_mag, v_ang, lambda, dz);
            if (!(v_mag.minCoeff() > 0.0) || !std::isfinite(lambda)) return false;
        }
        return false;
    }
};

}  // namespace detail

// Pseudo-arclength continuation with tangent predictor and local
// parameterization: the fixed component switches from lambda to the
// fastest-changing state component near the nose.
inline ContinuationTrace trace_continuation(const NetworkCase& cs, const Injections& base,
                                            const GrowthDirection& dir,
                                            const CpfOptions& opt = {}) {
    dir.validate(cs);
    detail::CpfSystem sys(cs, base, dir);

    PowerFlowOptions pf_opt;
    pf_opt.tol = opt.corrector_tol;
    const PowerFlowSolution base_sol = solve_nr(cs, base, pf_opt);
    if (!base_sol.converged) throw NumericalError("CPF: base case power flow did not converge");

    ContinuationTrace trace;
    trace.points.push_back({0.0, base_sol.v_mag, base_sol.v_ang});

    Eigen::VectorXd v_mag = base_sol.v_mag, v_ang = base_sol.v_ang;
    double lambda = 0.0;
    const int lam_index = sys.n_state() - 1;

    double step = opt.initial_step;
    int successes = 0;
    bool passed_nose = false;
    Eigen::VectorXd t_prev;

    for (int n_step = 0; n_step < opt.max_steps; ++n_step) {
        // Tangent at the current point; parameterize on the dominant component.
        auto t0 = sys.tangent(v_mag, v_ang, lam_index);
        if (!t0 && t_prev.size()) {
            // Singular with lambda parameterization (at the nose): retry with
            // the previously dominant state component.
            int k_try = 0;
            t_prev.head(lam_index).cwiseAbs().maxCoeff(&k_try);
            t0 = sys.tangent(v_mag, v_ang, k_try);
        }
        if (!t0) {
            trace.terminated_reason = CpfTermination::CorrectorFailure;
            break;
        }
        Eigen::VectorXd t = *t0;
        if (t_prev.size() && t.dot(t_prev) < 0.0) t = -t;
        if (!t_prev.size() && t[lam_index] < 0.0) t = -t;

        if (t_prev.size() && t_prev[lam_index] > 0.0 && t[lam_index] < 0.0) passed_nose = true;
        t_prev = t;

        int k_index;
        t.cwiseAbs().maxCoeff(&k_index);

        // Predictor + corrector, shrinking on rejection.
        Eigen::VectorXd v_mag_new, v_ang_new;
        double lambda_new;
        bool accepted = false;
        while (step >= opt.min_step) {
            v_mag_new = v_mag;
            v_ang_new = v_ang;
            lambda_new = lambda;
            sys.apply_delta(v_mag_new, v_ang_new, lambda_new, step * t);
            if (sys.correct(v_mag_new, v_ang_new, lambda_new, k_index, opt) &&
                lambda_new >= -opt.min_step) {
                accepted = true;
                break;
            }
            step *= 0.5;
            successes = 0;
        }
        if (!accepted) {
            trace.terminated_reason =
                trace.points.size() > 1 ? CpfTermination::StepFloor : CpfTermination::CorrectorFailure;
            break;
        }

        v_mag = v_mag_new;
        v_ang = v_ang_new;
        lambda = lambda_new;
        trace.points.push_back({lambda, v_mag, v_ang});

        if (++successes >= 2) {
            step = std::min(step * 1.5, opt.max_step);
            successes = 0;
        }

        if (passed_nose) {
            // Past the nose the curve only descends; the nose is bracketed by
            // the max-lambda point and this descending one. Tighten only if
            // the bracket is still coarser than the localization tolerance.
            double lam_best = 0.0;
            for (const auto& p : trace.points) lam_best = std::max(lam_best, p.lambda);
            if (lam_best - lambda < opt.min_step || step <= opt.min_step) {
                trace.terminated_reason = CpfTermination::NosePassed;
                break;
            }
            step = std::max(0.25 * step, opt.min_step);
        }
        if (n_step + 1 >= opt.max_steps) trace.terminated_reason = CpfTermination::MaxSteps;
    }

    int nose = 0;
    for (std::size_t i = 1; i < trace.points.size(); ++i)
        if (trace.points[i].lambda > trace.points[nose].lambda) nose = static_cast<int>(i);
    trace.nose_index = nose;

    // Localize the nose to min_step: from the best point, keep stepping with
    // shrinking arc length, accepting only lambda-increasing points.
    if (trace.terminated_reason == CpfTermination::NosePassed ||
        trace.terminated_reason == CpfTermination::StepFloor) {
        Eigen::VectorXd bv = trace.points[nose].v_mag, ba = trace.points[nose].v_ang;
        double bl = trace.points[nose].lambda;
        double s = std::max(opt.initial_step * 0.1, opt.min_step);
        Eigen::VectorXd tp = t_prev;
        while (s >= opt.min_step) {
            auto t0 = sys.tangent(bv, ba, lam_index);
            if (!t0) {
                int k_try = 0;
                tp.head(lam_index).cwiseAbs().maxCoeff(&k_try);
                t0 = sys.tangent(bv, ba, k_try);
                if (!t0) break;
            }
            Eigen::VectorXd t = *t0;
            if (t[lam_index] < 0.0) t = -t;  // ascend
            int k_index;
            t.cwiseAbs().maxCoeff(&k_index);
            Eigen::VectorXd nv = bv, na = ba;
            double nl = bl;
            sys.apply_delta(nv, na, nl, s * t);
            if (sys.correct(nv, na, nl, k_index, opt) && nl > bl) {
                if (nl - bl < opt.min_step) {
                    bv = nv; ba = na; bl = nl;
                    break;
                }
                bv = nv; ba = na; bl = nl;
            } else {
                s *= 0.5;
            }
            tp = t;
        }
        if (bl > trace.points[nose].lambda) {
            trace.points.insert(trace.points.begin() + nose + 1, {bl, bv, ba});
            trace.nose_index = nose + 1;
        }
    }
    return trace;
}

inline LoadMargin load_margin(const ContinuationTrace& trace, const GrowthDirection& dir,
                              const NetworkCase& cs, int target_bus) {
    LoadMargin m;
    m.lambda_max = trace.lambda_max();
    m.margin_mw = m.lambda_max * dir.total_delta_p();
    m.margin_at_bus_mw = m.lambda_max * dir.delta_p[cs.bus_index(target_bus)];
    m.reliable = trace.terminated_reason == CpfTermination::NosePassed ||
                 trace.terminated_reason == CpfTermination::StepFloor;
    return m;
}

// Per-trace PV-curve dump: header then one row per accepted point.
inline std::string trace_to_csv(const ContinuationTrace& trace, const NetworkCase& cs) {
    std::ostringstream out;
    out.precision(17);
    out << "lambda";
    for (const Bus& b : cs.buses()) out << ",v_mag_" << b.id;
    out << "\n";
    for (const auto& p : trace.points) {
        out << p.lambda;
        for (int i = 0; i < cs.n_bus(); ++i) out << "," << p.v_mag[i];
        out << "\n";
    }
    return out.str();
}

}  // namespace plm
