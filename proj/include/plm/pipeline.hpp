#pragma once

#include <atomic>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "plm/case_model.hpp"
#include "plm/cpf.hpp"
#include "plm/gpe.hpp"
#include "plm/sampling.hpp"
#include "plm/stats.hpp"
#include "plm/uncertainty.hpp"

namespace plm {

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

// One uncertain input: either a wind injection at a bus (MW, unity power
// factor) or the system-wide load factor (bus = kLoadFactor).
struct ScenarioInput {
    static constexpr int kLoadFactor = -1;
    std::string name;
    int bus = kLoadFactor;
    Marginal marginal{GaussianMarginal{}};

    bool is_load_factor() const { return bus == kLoadFactor; }
};

struct ScenarioConfig {
    std::string case_path;
    std::vector<ScenarioInput> inputs;
    VineSpec vine;
    std::string growth_mode = "uniform";  // "uniform" or "single-bus"
    int growth_bus = 0;                   // only for single-bus growth
    int target_bus = 0;
    int n_train = 0;
    int n_mc = 0;
    BasisSpec basis;
    KernelFamily kernel = KernelFamily::Matern32;
    double rq_alpha = 2.0;
    std::uint64_t seed = 0;
    std::string output_dir = ".";
    double wind_cap_mw = 0.0;  // 0 disables the cap
    CpfOptions cpf;

    int p() const { return static_cast<int>(inputs.size()); }

    std::vector<Marginal> marginals() const {
        std::vector<Marginal> m;
        for (const auto& in : inputs) m.push_back(in.marginal);
        return m;
    }

    std::vector<std::string> input_names() const {
        std::vector<std::string> names;
        for (const auto& in : inputs) names.push_back(in.name);
        return names;
    }

    void validate(const NetworkCase& cs) const {
        if (inputs.empty()) throw ValidationError("scenario: no inputs");
        if (static_cast<int>(inputs.size()) != vine.dim)
            throw ValidationError("scenario: inputs length != vine dimension");
        vine.validate();
        int load_factors = 0;
        for (const auto& in : inputs) {
            if (in.is_load_factor()) ++load_factors;
            else cs.bus_index(in.bus);  // throws on unknown bus id
        }
        if (load_factors > 1)
            throw ValidationError("scenario: at most one load-factor input");
        cs.bus_index(target_bus);
        if (growth_mode != "uniform" && growth_mode != "single-bus")
            throw ValidationError("scenario: growth mode must be uniform or single-bus");
        if (growth_mode == "single-bus") cs.bus_index(growth_bus);
        if (n_train < basis.width(p()) + 1)
            throw ValidationError("scenario: n_train must be at least basis width + 1 = " +
                                  std::to_string(basis.width(p()) + 1));
        if (n_mc < 100) throw ValidationError("scenario: n_mc must be at least 100");
    }
};

inline nlohmann::json to_json(const Marginal& m) {
    if (auto* g = std::get_if<GaussianMarginal>(&m.dist()))
        return {{"family", "gaussian"}, {"mean", g->mean}, {"std", g->std}};
    const auto& w = std::get<WeibullMarginal>(m.dist());
    return {{"family", "weibull"}, {"shape", w.shape}, {"scale", w.scale}};
}

inline Marginal marginal_from_json(const nlohmann::json& j) {
    const std::string fam = j.at("family");
    if (fam == "gaussian") return Marginal(GaussianMarginal{j.at("mean"), j.at("std")});
    if (fam == "weibull") return Marginal(WeibullMarginal{j.at("shape"), j.at("scale")});
    throw ParseError("unknown marginal family '" + fam + "'");
}

inline nlohmann::json to_json(const ScenarioConfig& c) {
    nlohmann::json j;
    j["case_path"] = c.case_path;
    for (const auto& in : c.inputs) {
        nlohmann::json ji;
        ji["name"] = in.name;
        if (in.is_load_factor()) ji["bus"] = "load-factor";
        else ji["bus"] = in.bus;
        ji["marginal"] = to_json(in.marginal);
        j["inputs"].push_back(ji);
    }
    j["vine"] = to_json(c.vine);
    j["growth"] = {{"mode", c.growth_mode}};
    if (c.growth_mode == "single-bus") j["growth"]["bus"] = c.growth_bus;
    j["target_bus"] = c.target_bus;
    j["n_train"] = c.n_train;
    j["n_mc"] = c.n_mc;
    j["basis"] = basis_name(c.basis.kind);
    j["kernel"] = kernel_family_name(c.kernel);
    if (c.kernel == KernelFamily::RationalQuadratic) j["rq_alpha"] = c.rq_alpha;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    if (c.wind_cap_mw > 0.0) j["wind_cap_mw"] = c.wind_cap_mw;
    return j;
}

inline ScenarioConfig scenario_from_json(const nlohmann::json& j) {
    ScenarioConfig c;
    try {
        c.case_path = j.at("case_path");
        for (const auto& ji : j.at("inputs")) {
            ScenarioInput in;
            in.name = ji.at("name");
            const auto& jb = ji.at("bus");
            if (jb.is_string()) {
                if (jb != "load-factor")
                    throw ParseError("input bus must be a bus id or \"load-factor\"");
                in.bus = ScenarioInput::kLoadFactor;
            } else {
                in.bus = jb;
            }
            in.marginal = marginal_from_json(ji.at("marginal"));
            c.inputs.push_back(in);
        }
        c.vine = vine_from_json(j.at("vine"));
        if (j.contains("growth")) {
            c.growth_mode = j.at("growth").value("mode", "uniform");
            c.growth_bus = j.at("growth").value("bus", 0);
        }
        c.target_bus = j.at("target_bus");
        c.n_train = j.at("n_train");
        c.n_mc = j.at("n_mc");
        c.basis.kind = basis_from_name(j.at("basis"));
        c.kernel = kernel_family_from_name(j.at("kernel"));
        c.rq_alpha = j.value("rq_alpha", 2.0);
        c.seed = j.at("seed");
        c.output_dir = j.value("output_dir", ".");
        c.wind_cap_mw = j.value("wind_cap_mw", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("scenario config: ") + e.what());
    }
    return c;
}

inline ScenarioConfig load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open scenario config '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("scenario config '" + path + "': " + e.what());
    }
    return scenario_from_json(j);
}

// ---------------------------------------------------------------------------
// Per-sample scenario realization
// ---------------------------------------------------------------------------

// Injections plus the growth direction for one realization of the inputs.
// The load factor scales every base bus load; wind enters as a negative P
// load at unity power factor. Growth follows the scaled loads only, so wind
// output stays fixed as lambda grows.
struct SampleScenario {
    Injections inj;
    GrowthDirection growth;
};

inline SampleScenario apply_inputs(const NetworkCase& cs, const Eigen::VectorXd& x,
                                   const ScenarioConfig& cfg) {
    if (x.size() != cfg.p())
        throw ValidationError("apply_inputs: row length != number of inputs");

    double factor = 1.0;
    for (int k = 0; k < cfg.p(); ++k)
        if (cfg.inputs[k].is_load_factor()) factor = x[k];

    SampleScenario s;
    s.inj = Injections::base(cs);
    s.inj.p_load_mw *= factor;
    s.inj.q_load_mvar *= factor;
    for (int k = 0; k < cfg.p(); ++k) {
        const ScenarioInput& in = cfg.inputs[k];
        if (in.is_load_factor()) continue;
        double mw = x[k];
        if (cfg.wind_cap_mw > 0.0) mw = std::min(mw, cfg.wind_cap_mw);
        s.inj.p_load_mw[cs.bus_index(in.bus)] -= mw;
    }

    if (cfg.growth_mode == "single-bus") {
        s.growth = GrowthDirection::single_bus(cs, cfg.growth_bus);
    } else {
        s.growth = GrowthDirection::uniform(cs);
        s.growth.delta_p *= factor;
        s.growth.delta_q *= factor;
    }
    return s;
}

// Load margin (MW at the target bus) for one input row; nullopt when the
// continuation cannot produce a reliable nose.
inline std::optional<double> evaluate_margin(const NetworkCase& cs, const ScenarioConfig& cfg,
                                             const Eigen::VectorXd& x,
                                             const CpfOptions& opt) {
    const SampleScenario s = apply_inputs(cs, x, cfg);
    try {
        const ContinuationTrace trace = trace_continuation(cs, s.inj, s.growth, opt);
        const LoadMargin m = load_margin(trace, s.growth, cs, cfg.target_bus);
        if (!m.reliable) return std::nullopt;
        return m.margin_at_bus_mw;
    } catch (const NumericalError&) {
        return std::nullopt;
    }
}

// ---------------------------------------------------------------------------
// Assessment results
// ---------------------------------------------------------------------------

enum class AssessmentMethod { GPE, DirectMC };

inline std::string method_name(AssessmentMethod m) {
    return m == AssessmentMethod::GPE ? "gpe" : "mc";
}

struct TimingLedger {
    double t_train_cpf = 0.0;  // wall seconds spent in CPF evaluations
    double t_gpe_train = 0.0;
    double t_gpe_eval = 0.0;
    double t_total = 0.0;
    int n_cpf_evals = 0;   // CPF runs behind t_train_cpf
    int n_surrogate_evals = 0;
};

struct AssessmentResult {
    AssessmentMethod method = AssessmentMethod::GPE;
    std::vector<double> margins;  // MW at the target bus
    SummaryStats stats;
    std::vector<PdfPoint> pdf_points;
    TimingLedger timing;
    double exclusion_rate = 0.0;      // dropped evaluation samples / n_mc
    std::uint64_t eval_digest = 0;    // digest of the physical evaluation matrix
    int n_train_used = 0;             // training points that survived CPF
};

namespace detail {

// FNV-1a over the raw double bytes, row-major: identical matrices give
// identical digests, which is how seed-matching between methods is checked.
inline std::uint64_t matrix_digest(const Eigen::MatrixXd& m) {
    std::uint64_t h = 1469598103934665603ull;
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) {
            double v = m(i, j);
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof(double));
            for (unsigned char b : bytes) {
                h ^= b;
                h *= 1099511628211ull;
            }
        }
    return h;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Evaluate CPF margins for every row, concurrently, results ordered by row
// index. Failed rows are retried once with a tighter step schedule before
// being reported as nullopt.
inline std::vector<std::optional<double>> margins_concurrent(const NetworkCase& cs,
                                                             const ScenarioConfig& cfg,
                                                             const Eigen::MatrixXd& X) {
    const int n = static_cast<int>(X.rows());
    std::vector<std::optional<double>> out(n);
    std::atomic<int> next{0};
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const unsigned n_threads = std::min<unsigned>(hw, static_cast<unsigned>(std::max(1, n)));

    auto worker = [&]() {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
            const Eigen::VectorXd x = X.row(i).transpose();
            out[i] = evaluate_margin(cs, cfg, x, cfg.cpf);
            if (!out[i]) {
                CpfOptions tight = cfg.cpf;  // retry with a finer schedule
                tight.initial_step *= 0.1;
                tight.max_step *= 0.2;
                tight.max_steps *= 4;
                out[i] = evaluate_margin(cs, cfg, x, tight);
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    return out;
}

// The evaluation-stage sample chain shared by both methods; seed-matching
// requires this to be the only place it is built.
struct EvalDesigns {
    DesignMatrix uniform, correlated, physical;
};

inline EvalDesigns evaluation_designs(const ScenarioConfig& cfg) {
    EvalDesigns d;
    d.uniform = mc_uniform(cfg.n_mc, cfg.p(), cfg.seed);
    d.uniform.column_labels = cfg.input_names();
    d.correlated = correlate(d.uniform, cfg.vine);
    d.physical = to_physical(d.correlated, cfg.marginals());
    return d;
}

inline void finish_result(AssessmentResult& r) {
    r.stats = summary_stats(r.margins);
    r.pdf_points = kde(r.margins);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// The two assessment methods
// ---------------------------------------------------------------------------

// Surrogate assessment: correlated Latin-hypercube training design, CPF
// margins at the training points, emulator fit, then a plain-MC evaluation
// design pushed through the posterior mean.
inline AssessmentResult run_assessment(const NetworkCase& cs, const ScenarioConfig& cfg,
                                       std::vector<std::string>* warnings = nullptr) {
    cfg.validate(cs);
    const auto t_start = std::chrono::steady_clock::now();
    AssessmentResult r;
    r.method = AssessmentMethod::GPE;

    DesignMatrix d_train = lhs(cfg.n_train, cfg.p(), cfg.seed);
    d_train.column_labels = cfg.input_names();
    const DesignMatrix d_train_corr = correlate(d_train, cfg.vine);
    const DesignMatrix d_train_phys = to_physical(d_train_corr, cfg.marginals());

    const auto t_cpf0 = std::chrono::steady_clock::now();
    const auto margins = detail::margins_concurrent(cs, cfg, d_train_phys.values);
    const double t_cpf = detail::seconds_since(t_cpf0);

    std::vector<int> ok;
    for (int i = 0; i < cfg.n_train; ++i) {
        if (margins[i]) ok.push_back(i);
        else if (warnings)
            warnings->push_back("training point " + std::to_string(i) +
                                " dropped: continuation failed after retry");
    }
    const int min_points = cfg.basis.width(cfg.p()) + 1;
    if (static_cast<int>(ok.size()) < min_points)
        throw NumericalError("run_assessment: only " + std::to_string(ok.size()) +
                             " usable training points, need " + std::to_string(min_points));

    Eigen::MatrixXd X(static_cast<int>(ok.size()), cfg.p());
    Eigen::VectorXd Y(static_cast<int>(ok.size()));
    for (std::size_t k = 0; k < ok.size(); ++k) {
        X.row(static_cast<int>(k)) = d_train_phys.values.row(ok[k]);
        Y[static_cast<int>(k)] = *margins[ok[k]];
    }
    r.n_train_used = static_cast<int>(ok.size());

    const auto t_fit0 = std::chrono::steady_clock::now();
    TrainOptions topt;
    topt.seed = cfg.seed;
    const TrainedEmulator em = train(X, Y, cfg.basis, cfg.kernel, topt);
    const double t_fit = detail::seconds_since(t_fit0);
    if (em.warning_no_improvement && warnings)
        warnings->push_back("emulator training: optimizer did not improve on its starts");

    const detail::EvalDesigns ev = detail::evaluation_designs(cfg);
    r.eval_digest = detail::matrix_digest(ev.physical.values);

    const auto t_eval0 = std::chrono::steady_clock::now();
    const Eigen::VectorXd y_hat = em.predict_mean_batch(ev.physical.values);
    const double t_eval = detail::seconds_since(t_eval0);

    r.margins.assign(y_hat.begin(), y_hat.end());
    detail::finish_result(r);

    r.timing.t_train_cpf = t_cpf;
    r.timing.t_gpe_train = t_fit;
    r.timing.t_gpe_eval = t_eval;
    r.timing.n_cpf_evals = cfg.n_train;
    r.timing.n_surrogate_evals = cfg.n_mc;
    r.timing.t_total = detail::seconds_since(t_start);
    return r;
}

// Direct benchmark: the identical evaluation-stage sample chain, every row
// run through the real CPF. Failed rows are excluded and reported.
inline AssessmentResult run_mc_benchmark(const NetworkCase& cs, const ScenarioConfig& cfg,
                                         std::vector<std::string>* warnings = nullptr) {
    cfg.validate(cs);
    const auto t_start = std::chrono::steady_clock::now();
    AssessmentResult r;
    r.method = AssessmentMethod::DirectMC;

    const detail::EvalDesigns ev = detail::evaluation_designs(cfg);
    r.eval_digest = detail::matrix_digest(ev.physical.values);

    const auto t_cpf0 = std::chrono::steady_clock::now();
    const auto margins = detail::margins_concurrent(cs, cfg, ev.physical.values);
    const double t_cpf = detail::seconds_since(t_cpf0);

    int dropped = 0;
    for (int i = 0; i < cfg.n_mc; ++i) {
        if (margins[i]) r.margins.push_back(*margins[i]);
        else ++dropped;
    }
    r.exclusion_rate = static_cast<double>(dropped) / cfg.n_mc;
    if (dropped > 0 && warnings)
        warnings->push_back(std::to_string(dropped) + " of " + std::to_string(cfg.n_mc) +
                            " benchmark samples excluded (continuation failure)");
    if (r.margins.empty()) throw NumericalError("run_mc_benchmark: every sample failed");
    detail::finish_result(r);

    r.timing.t_train_cpf = t_cpf;
    r.timing.n_cpf_evals = cfg.n_mc;
    r.timing.t_total = detail::seconds_since(t_start);
    return r;
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const AssessmentResult& r) {
    nlohmann::json j;
    j["method"] = method_name(r.method);
    j["n_samples"] = r.margins.size();
    j["mean_mw"] = r.stats.mean;
    j["std_mw"] = r.stats.std;
    j["q05_mw"] = r.stats.q05;
    j["q50_mw"] = r.stats.q50;
    j["q95_mw"] = r.stats.q95;
    j["exclusion_rate"] = r.exclusion_rate;
    j["eval_digest"] = r.eval_digest;
    if (r.method == AssessmentMethod::GPE) j["n_train_used"] = r.n_train_used;
    j["timing"] = {{"t_train_cpf_s", r.timing.t_train_cpf},
                   {"t_gpe_train_s", r.timing.t_gpe_train},
                   {"t_gpe_eval_s", r.timing.t_gpe_eval},
                   {"t_total_s", r.timing.t_total},
                   {"n_cpf_evals", r.timing.n_cpf_evals},
                   {"n_surrogate_evals", r.timing.n_surrogate_evals}};
    return j;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write '" + path.string() + "'");
    out << text;
}

}  // namespace detail

// Writes margins_<method>.csv, pdf_<method>.csv, summary_<method>.json and,
// for determinism audits, the evaluation design at each stage.
inline void write_outputs(const AssessmentResult& r, const ScenarioConfig& cfg,
                          const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const std::string m = method_name(r.method);

    std::ostringstream margins;
    margins.precision(17);
    margins << "margin_mw\n";
    for (double v : r.margins) margins << v << "\n";
    detail::write_text(fs::path(out_dir) / ("margins_" + m + ".csv"), margins.str());

    std::ostringstream pdf;
    pdf.precision(17);
    pdf << "margin_mw,density\n";
    for (const PdfPoint& p : r.pdf_points) pdf << p.x << "," << p.density << "\n";
    detail::write_text(fs::path(out_dir) / ("pdf_" + m + ".csv"), pdf.str());

    detail::write_text(fs::path(out_dir) / ("summary_" + m + ".json"),
                       to_json(r).dump(2) + "\n");

    const detail::EvalDesigns ev = detail::evaluation_designs(cfg);
    detail::write_text(fs::path(out_dir) / "design_eval_uniform.csv", design_to_csv(ev.uniform));
    detail::write_text(fs::path(out_dir) / "design_eval_correlated.csv",
                       design_to_csv(ev.correlated));
    detail::write_text(fs::path(out_dir) / "design_eval_physical.csv",
                       design_to_csv(ev.physical));

    if (r.method == AssessmentMethod::GPE) {
        DesignMatrix t = lhs(cfg.n_train, cfg.p(), cfg.seed);
        t.column_labels = cfg.input_names();
        const DesignMatrix tc = correlate(t, cfg.vine);
        const DesignMatrix tp = to_physical(tc, cfg.marginals());
        detail::write_text(fs::path(out_dir) / "design_train_uniform.csv", design_to_csv(t));
        detail::write_text(fs::path(out_dir) / "design_train_correlated.csv", design_to_csv(tc));
        detail::write_text(fs::path(out_dir) / "design_train_physical.csv", design_to_csv(tp));
    }
}

}  // namespace plm
