#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "plm/cpf.hpp"

using namespace plm;
using plm::test::load_case;

namespace {

// Independent oracle: bisection on lambda over plain Newton power-flow
// feasibility, warm-started from the last feasible point. Resolves the
// loadability limit to `tol` in lambda without any continuation machinery.
double bisection_lambda_max(const NetworkCase& cs, const Injections& base,
                            const GrowthDirection& dir, double lam_hi, double tol) {
    PowerFlowOptions opt;
    opt.max_iter = 50;
    PowerFlowSolution feas = solve_nr(cs, base, opt);
    REQUIRE(feas.converged);
    double lo = 0.0, hi = lam_hi;
    REQUIRE_FALSE(solve_nr(cs, detail::injections_at(cs, base, dir, hi), opt).converged);
    while (hi - lo > tol) {
        const double mid = 0.5 * (lo + hi);
        const PowerFlowSolution sol = solve_nr(cs, detail::injections_at(cs, base, dir, mid),
                                               opt, &feas.v_mag, &feas.v_ang);
        if (sol.converged) {
            lo = mid;
            feas = sol;
        } else {
            hi = mid;
        }
    }
    return lo;
}

}  // namespace

TEST_CASE("2-bus nose sits at the analytic maximum power transfer") {
    const NetworkCase cs = load_case("data/case2.m");
    const Injections base = Injections::base(cs);
    const GrowthDirection dir = GrowthDirection::uniform(cs);
    const ContinuationTrace trace = trace_continuation(cs, base, dir);

    REQUIRE(trace.points.size() >= 3);
    CHECK(trace.points.front().lambda == 0.0);
    // nose power: (1 + lambda_max) * 100 MW against V1^2/(2x) = 5.0 pu
    const double nose_pu = (1.0 + trace.lambda_max()) * 100.0 / cs.base_mva();
    CHECK(std::abs(nose_pu - 5.0) / 5.0 < 1e-3);
    CHECK(trace.terminated_reason == CpfTermination::NosePassed);

    // voltage at the nose of the lossless 2-bus curve is V1/sqrt(2)
    CHECK(std::abs(trace.points[trace.nose_index].v_mag[1] - 1.0 / std::sqrt(2.0)) < 5e-3);
}

TEST_CASE("lambda rises to the nose and falls beyond it") {
    const NetworkCase cs = load_case("data/case2.m");
    const ContinuationTrace trace =
        trace_continuation(cs, Injections::base(cs), GrowthDirection::uniform(cs));
    for (int i = 1; i <= trace.nose_index; ++i)
        CHECK(trace.points[i].lambda >= trace.points[i - 1].lambda - 1e-12);
    REQUIRE(trace.nose_index < static_cast<int>(trace.points.size()) - 1);
    CHECK(trace.points.back().lambda < trace.lambda_max());
    // the lower branch keeps dropping in voltage
    CHECK(trace.points.back().v_mag[1] < trace.points[trace.nose_index].v_mag[1]);
}

TEST_CASE("9-bus loadability agrees with the bisection oracle") {
    const NetworkCase cs = load_case("data/case9.m");
    const Injections base = Injections::base(cs);
    const GrowthDirection dir = GrowthDirection::uniform(cs);
    const ContinuationTrace trace = trace_continuation(cs, base, dir);
    const double oracle = bisection_lambda_max(cs, base, dir, 5.0, 1e-4);
    CHECK(std::abs(trace.lambda_max() - oracle) / oracle < 5e-3);
}

TEST_CASE("57-bus loadability agrees with the bisection oracle") {
    const NetworkCase cs = load_case("data/case57.m");
    const Injections base = Injections::base(cs);
    const GrowthDirection dir = GrowthDirection::uniform(cs);
    const ContinuationTrace trace = trace_continuation(cs, base, dir);
    REQUIRE(trace.lambda_max() > 0.0);
    const double oracle = bisection_lambda_max(cs, base, dir, 3.0, 1e-4);
    CHECK(std::abs(trace.lambda_max() - oracle) / oracle < 5e-3);
}

TEST_CASE("uniform growth direction scales loads and shares pickup") {
    const NetworkCase cs = load_case("data/case57.m");
    const GrowthDirection dir = GrowthDirection::uniform(cs);
    for (int i = 0; i < cs.n_bus(); ++i) {
        CHECK(dir.delta_p[i] == cs.buses()[i].p_load);
        CHECK(dir.delta_q[i] == cs.buses()[i].q_load);
    }
    CHECK(std::abs(dir.gen_participation.sum() - 1.0) < 1e-12);
    const int slack_gen_bus = cs.buses()[cs.slack_index()].id;
    for (std::size_t g = 0; g < cs.generators().size(); ++g)
        if (cs.generators()[g].bus == slack_gen_bus) CHECK(dir.gen_participation[g] == 0.0);
    CHECK_NOTHROW(dir.validate(cs));
}

TEST_CASE("single-bus growth confines load increase to one bus") {
    const NetworkCase cs = load_case("data/case9.m");
    const GrowthDirection dir = GrowthDirection::single_bus(cs, 5);
    for (int i = 0; i < cs.n_bus(); ++i)
        if (i != cs.bus_index(5)) CHECK(dir.delta_p[i] == 0.0);
    CHECK(dir.delta_p[cs.bus_index(5)] > 0.0);
    CHECK_NOTHROW(dir.validate(cs));
}

TEST_CASE("growth direction validation") {
    const NetworkCase cs = load_case("data/case9.m");
    GrowthDirection dir = GrowthDirection::uniform(cs);
    SECTION("wrong vector length") {
        dir.delta_p.resize(3);
        CHECK_THROWS_AS(dir.validate(cs), ValidationError);
    }
    SECTION("all-zero direction") {
        dir.delta_p.setZero();
        CHECK_THROWS_AS(dir.validate(cs), ValidationError);
    }
    SECTION("participation must sum to one") {
        dir.gen_participation *= 0.5;
        CHECK_THROWS_AS(dir.validate(cs), ValidationError);
    }
}

TEST_CASE("load margin report is consistent with the trace") {
    const NetworkCase cs = load_case("data/case57.m");
    const GrowthDirection dir = GrowthDirection::uniform(cs);
    const ContinuationTrace trace = trace_continuation(cs, Injections::base(cs), dir);
    const LoadMargin m = load_margin(trace, dir, cs, 25);
    CHECK(m.lambda_max == trace.lambda_max());
    CHECK(m.margin_mw == Catch::Approx(m.lambda_max * dir.total_delta_p()));
    CHECK(m.margin_at_bus_mw ==
          Catch::Approx(m.lambda_max * dir.delta_p[cs.bus_index(25)]));
    CHECK(m.reliable);
}

TEST_CASE("infeasible base case throws a numerical error") {
    const NetworkCase cs = load_case("data/case2.m");
    Injections base = Injections::base(cs);
    base.p_load_mw[1] = 600.0;  // beyond the 500 MW limit
    CHECK_THROWS_AS(trace_continuation(cs, base, GrowthDirection::uniform(cs)), NumericalError);
}

TEST_CASE("traces are deterministic") {
    const NetworkCase cs = load_case("data/case9.m");
    const GrowthDirection dir = GrowthDirection::uniform(cs);
    const ContinuationTrace a = trace_continuation(cs, Injections::base(cs), dir);
    const ContinuationTrace b = trace_continuation(cs, Injections::base(cs), dir);
    REQUIRE(a.points.size() == b.points.size());
    for (std::size_t i = 0; i < a.points.size(); ++i) {
        CHECK(a.points[i].lambda == b.points[i].lambda);
        CHECK(a.points[i].v_mag == b.points[i].v_mag);
    }
}

TEST_CASE("PV-curve CSV has a header and one row per accepted point") {
    const NetworkCase cs = load_case("data/case2.m");
    const ContinuationTrace trace =
        trace_continuation(cs, Injections::base(cs), GrowthDirection::uniform(cs));
    const std::string csv = trace_to_csv(trace, cs);
    std::istringstream in(csv);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "lambda,v_mag_1,v_mag_2");
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == trace.points.size());
}
