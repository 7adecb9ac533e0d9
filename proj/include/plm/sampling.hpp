#pragma once

#include <Eigen/Core>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "plm/common.hpp"
#include "plm/uncertainty.hpp"

namespace plm {

enum class DesignStage { UniformIID, UniformCorrelated, Physical };

// n x p sample block with provenance through the transform chain
// uniform -> correlated-uniform -> physical.
struct DesignMatrix {
    Eigen::MatrixXd values;
    DesignStage stage = DesignStage::UniformIID;
    std::uint64_t seed = 0;
    std::vector<std::string> column_labels;

    int n() const { return static_cast<int>(values.rows()); }
    int p() const { return static_cast<int>(values.cols()); }
};

// Latin hypercube: one jittered sample per equal-width stratum per column.
inline DesignMatrix lhs(int n, int p, std::uint64_t seed) {
    if (n < 1 || p < 1) throw ValidationError("lhs: n and p must be >= 1");
    RngStream rng(seed, "design/lhs");
    DesignMatrix d;
    d.seed = seed;
    d.values.resize(n, p);
    std::vector<int> perm(n);
    for (int j = 0; j < p; ++j) {
        std::iota(perm.begin(), perm.end(), 0);
        for (int i = n - 1; i > 0; --i)  // Fisher-Yates on our own stream
            std::swap(perm[i], perm[static_cast<int>(rng.next_u64() % (i + 1))]);
        for (int i = 0; i < n; ++i)
            d.values(i, j) = (perm[i] + rng.uniform()) / n;
    }
    return d;
}

// Plain i.i.d. uniform Monte-Carlo design; n = 0 is a valid empty design.
inline DesignMatrix mc_uniform(int n, int p, std::uint64_t seed) {
    if (n < 0 || p < 1) throw ValidationError("mc_uniform: need n >= 0, p >= 1");
    RngStream rng(seed, "design/mc");
    DesignMatrix d;
    d.seed = seed;
    d.values.resize(n, p);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) d.values(i, j) = rng.uniform();
    return d;
}

// Rowwise inverse-Rosenblatt through the vine. The vine's variable_order
// maps vine position to design column; identity when absent.
inline DesignMatrix correlate(const DesignMatrix& d, const VineSpec& spec) {
    if (d.stage != DesignStage::UniformIID)
        throw ValidationError("correlate: design stage must be UniformIID");
    if (d.p() != spec.dim) throw ValidationError("correlate: column count != vine dimension");
    spec.validate();

    std::vector<int> order(spec.dim);
    if (spec.variable_order.empty())
        std::iota(order.begin(), order.end(), 0);
    else
        order = spec.variable_order;

    DesignMatrix out = d;
    out.stage = DesignStage::UniformCorrelated;
    std::vector<double> w(spec.dim);
    for (int i = 0; i < d.n(); ++i) {
        for (int j = 0; j < spec.dim; ++j) w[j] = d.values(i, order[j]);
        const std::vector<double> u = vine_sample_inverse(spec, w);
        for (int j = 0; j < spec.dim; ++j) out.values(i, order[j]) = u[j];
    }
    return out;
}

// Columnwise inverse-cdf into physical space.
inline DesignMatrix to_physical(const DesignMatrix& d, const std::vector<Marginal>& marginals) {
    if (d.stage == DesignStage::Physical)
        throw ValidationError("to_physical: design is already physical");
    if (static_cast<int>(marginals.size()) != d.p())
        throw ValidationError("to_physical: one marginal per column required");
    DesignMatrix out = d;
    out.stage = DesignStage::Physical;
    for (int j = 0; j < d.p(); ++j)
        for (int i = 0; i < d.n(); ++i) out.values(i, j) = marginals[j].inv_cdf(d.values(i, j));
    return out;
}

inline std::string stage_name(DesignStage s) {
    switch (s) {
        case DesignStage::UniformIID: return "uniform-iid";
        case DesignStage::UniformCorrelated: return "uniform-correlated";
        case DesignStage::Physical: return "physical";
    }
    return "?";
}

// CSV export, 17 significant digits for reproducible round-trips.
inline std::string design_to_csv(const DesignMatrix& d) {
    std::ostringstream out;
    out.precision(17);
    for (std::size_t j = 0; j < d.column_labels.size(); ++j)
        out << (j ? "," : "") << d.column_labels[j];
    if (!d.column_labels.empty()) out << "\n";
    for (int i = 0; i < d.n(); ++i) {
        for (int j = 0; j < d.p(); ++j) out << (j ? "," : "") << d.values(i, j);
        out << "\n";
    }
    return out.str();
}

}  // namespace plm
