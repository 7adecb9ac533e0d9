// Command-line front end: scenario validation, PV-curve traces, and the
// full load-margin assessment (surrogate, direct MC, or both).
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "plm/pipeline.hpp"

namespace {

// Relative case paths resolve against the config file's directory, so a
// scenario can be launched from anywhere.
plm::NetworkCase load_case_for(const plm::ScenarioConfig& cfg, const std::string& config_path) {
    namespace fs = std::filesystem;
    fs::path case_path(cfg.case_path);
    if (case_path.is_relative()) {
        const fs::path beside = fs::path(config_path).parent_path() / case_path;
        if (fs::exists(beside)) case_path = beside;
    }
    std::ifstream in(case_path);
    if (!in) throw plm::ParseError("cannot open case file '" + case_path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return plm::parse_case(buf.str());
}

std::vector<double> parse_row(const std::string& row) {
    std::vector<double> out;
    std::stringstream ss(row);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            out.push_back(std::stod(tok));
        } catch (const std::exception&) {
            throw plm::ParseError("--sample: '" + tok + "' is not a number");
        }
    }
    return out;
}

void print_summary(const plm::AssessmentResult& r) {
    std::cout << "[" << plm::method_name(r.method) << "] n=" << r.margins.size()
              << " mean=" << r.stats.mean << " MW, std=" << r.stats.std
              << " MW, q05=" << r.stats.q05 << ", q50=" << r.stats.q50
              << ", q95=" << r.stats.q95;
    if (r.exclusion_rate > 0.0) std::cout << ", excluded=" << r.exclusion_rate * 100 << "%";
    std::cout << " (total " << r.timing.t_total << " s)\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Probabilistic load-margin assessment"};
    app.require_subcommand(1);

    std::string config_path, method = "gpe", out_dir, sample_row;
    std::uint64_t seed = 0;
    bool seed_set = false;

    auto* assess = app.add_subcommand("assess", "Run the load-margin assessment");
    assess->add_option("--config", config_path, "Scenario config (JSON)")->required();
    assess->add_option("--method", method, "gpe, mc, or both")
        ->check(CLI::IsMember({"gpe", "mc", "both"}));
    assess->add_option("--seed", seed, "Override the config seed")
        ->each([&](const std::string&) { seed_set = true; });
    assess->add_option("--out", out_dir, "Override the config output directory");

    auto* validate = app.add_subcommand("validate-config", "Check a scenario config");
    validate->add_option("--config", config_path, "Scenario config (JSON)")->required();

    auto* pv = app.add_subcommand("pv-curve", "Trace one PV curve to stdout");
    pv->add_option("--config", config_path, "Scenario config (JSON)")->required();
    pv->add_option("--sample", sample_row,
                   "Comma-separated physical input row (one value per config input)")
        ->required();

    CLI11_PARSE(app, argc, argv);

    try {
        plm::ScenarioConfig cfg = plm::load_scenario(config_path);
        if (seed_set) cfg.seed = seed;
        if (!out_dir.empty()) cfg.output_dir = out_dir;
        const plm::NetworkCase cs = load_case_for(cfg, config_path);
        cfg.validate(cs);

        if (validate->parsed()) {
            std::cout << "config ok: " << cfg.p() << " inputs, case '" << cfg.case_path
                      << "' (" << cs.n_bus() << " buses), target bus " << cfg.target_bus << "\n";
            return 0;
        }

        if (pv->parsed()) {
            const std::vector<double> row = parse_row(sample_row);
            if (static_cast<int>(row.size()) != cfg.p())
                throw plm::ValidationError("--sample needs " + std::to_string(cfg.p()) +
                                           " values, got " + std::to_string(row.size()));
            const Eigen::VectorXd x =
                Eigen::Map<const Eigen::VectorXd>(row.data(), static_cast<int>(row.size()));
            const plm::SampleScenario s = plm::apply_inputs(cs, x, cfg);
            const plm::ContinuationTrace trace =
                plm::trace_continuation(cs, s.inj, s.growth, cfg.cpf);
            std::cout << plm::trace_to_csv(trace, cs);
            std::cerr << "lambda_max=" << trace.lambda_max() << "\n";
            return 0;
        }

        std::vector<std::string> warnings;
        if (method == "gpe" || method == "both") {
            const plm::AssessmentResult r = plm::run_assessment(cs, cfg, &warnings);
            plm::write_outputs(r, cfg, cfg.output_dir);
            print_summary(r);
        }
        if (method == "mc" || method == "both") {
            const plm::AssessmentResult r = plm::run_mc_benchmark(cs, cfg, &warnings);
            plm::write_outputs(r, cfg, cfg.output_dir);
            print_summary(r);
        }
        for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
        std::cout << "outputs written to " << cfg.output_dir << "\n";
        return 0;
    } catch (const plm::ParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const plm::ValidationError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const plm::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
