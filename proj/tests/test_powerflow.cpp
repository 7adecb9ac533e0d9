#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "plm/powerflow.hpp"

using namespace plm;
using plm::test::load_case;

TEST_CASE("2-bus case matches the closed-form solution") {
    const NetworkCase cs = load_case("data/case2.m");
    const PowerFlowSolution sol = solve_nr(cs, Injections::base(cs));
    REQUIRE(sol.converged);
    CHECK(sol.max_mismatch <= 1e-8);

    // r=0, x=0.1, unity-pf load of 1 pu behind a stiff 1.0 pu source:
    // V2^4 - V2^2 + (P*x)^2 = 0 and sin(theta2) = -P*x/V2.
    const double px = 1.0 * 0.1;
    const double v2 = std::sqrt((1.0 + std::sqrt(1.0 - 4.0 * px * px)) / 2.0);
    const double th2 = std::asin(-px / v2);
    CHECK(std::abs(sol.v_mag[1] - v2) < 1e-8);
    CHECK(std::abs(sol.v_ang[1] - th2) < 1e-8);
    CHECK(sol.v_mag[0] == 1.0);
    CHECK(sol.v_ang[0] == 0.0);
    // slack covers the load exactly (lossless line)
    CHECK(std::abs(sol.p_slack - 100.0) < 1e-6);
}

TEST_CASE("9-bus case converges to the recorded slack dispatch") {
    const NetworkCase cs = load_case("data/case9.m");
    const PowerFlowSolution sol = solve_nr(cs, Injections::base(cs));
    REQUIRE(sol.converged);
    CHECK(sol.max_mismatch <= 1e-8);
    CHECK(sol.iterations <= 10);
    CHECK(std::abs(sol.p_slack - 71.95) < 0.1);  // published solution value
}

TEST_CASE("57-bus case reproduces the stored solved voltages") {
    const NetworkCase cs = load_case("data/case57.m");
    const PowerFlowSolution sol = solve_nr(cs, Injections::base(cs));
    REQUIRE(sol.converged);
    CHECK(sol.max_mismatch <= 1e-8);

    double dv = 0.0, da = 0.0;
    for (int i = 0; i < cs.n_bus(); ++i) {
        if (cs.buses()[i].kind == BusKind::PQ)
            dv = std::max(dv, std::abs(sol.v_mag[i] - cs.buses()[i].v_mag));
        da = std::max(da, std::abs(sol.v_ang[i] - cs.buses()[i].v_ang));
    }
    // stored voltage columns are a warm-start snapshot with limited
    // precision; this guards against gross transcription errors only
    CHECK(dv < 0.02);
    CHECK(da < 0.02);
}

TEST_CASE("mismatch is monotonically driven below tolerance") {
    const NetworkCase cs = load_case("data/case9.m");
    const PowerFlowSolution sol = solve_nr(cs, Injections::base(cs));
    REQUIRE(sol.mismatch_history.size() >= 2);
    CHECK(sol.mismatch_history.back() <= 1e-8);
    // quadratic convergence: the final step reduces the residual massively
    const auto& h = sol.mismatch_history;
    CHECK(h[h.size() - 1] < 1e-4 * h[h.size() - 2]);
}

TEST_CASE("analytic Jacobian agrees with central finite differences") {
    const NetworkCase cs = load_case("data/case9.m");
    const auto Y = admittance_matrix(cs);
    std::vector<BusKind> kinds;
    for (const Bus& b : cs.buses()) kinds.push_back(b.kind);
    const detail::PfIndex idx(cs, kinds);

    // a non-flat, non-solved state so every Jacobian term is exercised
    Eigen::VectorXd v_mag(9), v_ang(9);
    for (int i = 0; i < 9; ++i) {
        v_mag[i] = 1.0 + 0.03 * std::sin(1.7 * i + 0.3);
        v_ang[i] = 0.05 * std::cos(2.3 * i);
    }

    Eigen::VectorXd p_calc, q_calc;
    detail::calc_pq(Y, v_mag, v_ang, p_calc, q_calc);
    const Eigen::MatrixXd J = detail::polar_jacobian(Y, v_mag, v_ang, p_calc, q_calc, idx);

    auto stacked = [&](const Eigen::VectorXd& vm, const Eigen::VectorXd& va) {
        Eigen::VectorXd p, q, f(idx.n_eq());
        detail::calc_pq(Y, vm, va, p, q);
        int r = 0;
        for (int i : idx.non_slack) f[r++] = p[i];
        for (int i : idx.pq) f[r++] = q[i];
        return f;
    };

    const double h = 1e-6;
    const int na = static_cast<int>(idx.non_slack.size());
    double worst = 0.0;
    for (int c = 0; c < idx.n_eq(); ++c) {
        Eigen::VectorXd vm_p = v_mag, vm_m = v_mag, va_p = v_ang, va_m = v_ang;
        if (c < na) {
            va_p[idx.non_slack[c]] += h;
            va_m[idx.non_slack[c]] -= h;
        } else {
            vm_p[idx.pq[c - na]] += h;
            vm_m[idx.pq[c - na]] -= h;
        }
        const Eigen::VectorXd fd = (stacked(vm_p, va_p) - stacked(vm_m, va_m)) / (2.0 * h);
        for (int r = 0; r < idx.n_eq(); ++r) {
            const double denom = std::max(1.0, std::abs(J(r, c)));
            worst = std::max(worst, std::abs(J(r, c) - fd[r]) / denom);
        }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("stacked mismatch vanishes at the solution and not at flat start") {
    const NetworkCase cs = load_case("data/case57.m");
    const Injections inj = Injections::base(cs);
    const PowerFlowSolution sol = solve_nr(cs, inj);
    REQUIRE(sol.converged);
    CHECK(mismatch(cs, sol.v_mag, sol.v_ang, inj).cwiseAbs().maxCoeff() <= 1e-8);

    Eigen::VectorXd flat_m = Eigen::VectorXd::Ones(57), flat_a = Eigen::VectorXd::Zero(57);
    CHECK(mismatch(cs, flat_m, flat_a, inj).cwiseAbs().maxCoeff() > 1e-3);
    CHECK_THROWS_AS(mismatch(cs, Eigen::VectorXd::Ones(3), flat_a, inj), ValidationError);
}

TEST_CASE("non-convergence is reported, not thrown") {
    const NetworkCase cs = load_case("data/case57.m");
    PowerFlowOptions opt;
    opt.max_iter = 1;
    const PowerFlowSolution sol = solve_nr(cs, Injections::base(cs), opt);
    CHECK_FALSE(sol.converged);
    CHECK(sol.max_mismatch > 1e-8);
}

TEST_CASE("warm start from the solution converges immediately") {
    const NetworkCase cs = load_case("data/case57.m");
    const Injections inj = Injections::base(cs);
    const PowerFlowSolution sol = solve_nr(cs, inj);
    const PowerFlowSolution warm = solve_nr(cs, inj, {}, &sol.v_mag, &sol.v_ang);
    CHECK(warm.converged);
    CHECK(warm.iterations <= 1);
}

TEST_CASE("reactive limits switch a PV bus to PQ and pin its Q") {
    const NetworkCase base = load_case("data/case9.m");
    std::vector<Generator> gens = base.generators();
    int pinned = -1;
    for (std::size_t g = 0; g < gens.size(); ++g)
        if (base.buses()[base.bus_index(gens[g].bus)].kind == BusKind::PV) {
            gens[g].q_max = 2.0;  // far below the unconstrained need
            pinned = static_cast<int>(g);
            break;
        }
    REQUIRE(pinned >= 0);
    const NetworkCase cs(base.base_mva(), base.buses(), base.branches(), gens);
    const Injections inj = Injections::base(cs);

    PowerFlowOptions opt;
    opt.enforce_q_limits = true;
    const PowerFlowSolution sol = solve_nr(cs, inj, opt);
    REQUIRE(sol.converged);

    const int bi = cs.bus_index(gens[pinned].bus);
    const auto Y = admittance_matrix(cs);
    Eigen::VectorXd p_calc, q_calc;
    detail::calc_pq(Y, sol.v_mag, sol.v_ang, p_calc, q_calc);
    const double q_gen = q_calc[bi] * cs.base_mva() + inj.q_load_mvar[bi];
    CHECK(std::abs(q_gen - 2.0) < 1e-6);                       // held at the limit
    CHECK(std::abs(sol.v_mag[bi] - gens[pinned].v_set) > 1e-4);  // voltage released

    const PowerFlowSolution unenforced = solve_nr(cs, inj);
    detail::calc_pq(Y, unenforced.v_mag, unenforced.v_ang, p_calc, q_calc);
    CHECK(q_calc[bi] * cs.base_mva() + inj.q_load_mvar[bi] > 2.0);  // limit was binding
}
