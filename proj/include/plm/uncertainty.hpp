#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "plm/common.hpp"

namespace plm {

// ---------------------------------------------------------------------------
// Marginal distributions
// ---------------------------------------------------------------------------

struct GaussianMarginal {
    double mean = 0.0;
    double std = 1.0;
};
struct WeibullMarginal {
    double shape = 1.0;
    double scale = 1.0;
};

class Marginal {
public:
    Marginal(GaussianMarginal g) : dist_(g) {
        if (!(g.std > 0.0)) throw ValidationError("Gaussian marginal: std must be positive");
    }
    Marginal(WeibullMarginal w) : dist_(w) {
        if (!(w.shape > 0.0) || !(w.scale > 0.0))
            throw ValidationError("Weibull marginal: shape and scale must be positive");
    }

    double cdf(double x) const {
        if (auto* g = std::get_if<GaussianMarginal>(&dist_))
            return normal_cdf((x - g->mean) / g->std);
        const auto& w = std::get<WeibullMarginal>(dist_);
        if (x <= 0.0) return 0.0;
        return -std::expm1(-std::pow(x / w.scale, w.shape));
    }

    double inv_cdf(double u) const {
        if (!(u > 0.0 && u < 1.0))
            throw std::domain_error("marginal inv_cdf: u outside (0,1)");
        if (auto* g = std::get_if<GaussianMarginal>(&dist_))
            return g->mean + g->std * normal_inv_cdf(u);
        const auto& w = std::get<WeibullMarginal>(dist_);
        return w.scale * std::pow(-std::log1p(-u), 1.0 / w.shape);
    }

    double pdf(double x) const {
        if (auto* g = std::get_if<GaussianMarginal>(&dist_))
            return normal_pdf((x - g->mean) / g->std) / g->std;
        const auto& w = std::get<WeibullMarginal>(dist_);
        if (x <= 0.0) return 0.0;
        const double z = std::pow(x / w.scale, w.shape);
        return w.shape / w.scale * std::pow(x / w.scale, w.shape - 1.0) * std::exp(-z);
    }

    double mean() const {
        if (auto* g = std::get_if<GaussianMarginal>(&dist_)) return g->mean;
        const auto& w = std::get<WeibullMarginal>(dist_);
        return w.scale * std::tgamma(1.0 + 1.0 / w.shape);
    }

    bool is_gaussian() const { return std::holds_alternative<GaussianMarginal>(dist_); }
    const std::variant<GaussianMarginal, WeibullMarginal>& dist() const { return dist_; }

private:
    std::variant<GaussianMarginal, WeibullMarginal> dist_;
};

// ---------------------------------------------------------------------------
// Bivariate pair copulas
// ---------------------------------------------------------------------------

enum class CopulaFamily { Independence, Gaussian, Frank, Gumbel };

class PairCopula {
public:
    static PairCopula independence() { return PairCopula(CopulaFamily::Independence, 0.0); }
    static PairCopula gaussian(double rho) {
        if (!(rho > -1.0 && rho < 1.0))
            throw ValidationError("Gaussian copula: rho must be in (-1,1)");
        return PairCopula(CopulaFamily::Gaussian, rho);
    }
    static PairCopula frank(double theta) {
        if (theta == 0.0) throw ValidationError("Frank copula: theta must be nonzero");
        return PairCopula(CopulaFamily::Frank, theta);
    }
    static PairCopula gumbel(double theta) {
        if (!(theta >= 1.0)) throw ValidationError("Gumbel copula: theta must be >= 1");
        return PairCopula(CopulaFamily::Gumbel, theta);
    }

    CopulaFamily family() const { return family_; }
    double parameter() const { return par_; }

    // Copula cdf C(u,v).
    double cdf(double u, double v) const {
        check_domain(u, v);
        switch (family_) {
            case CopulaFamily::Independence:
                return u * v;
            case CopulaFamily::Frank: {
                const double t = par_;
                const double a = std::expm1(-t * u) * std::expm1(-t * v) / std::expm1(-t);
                return -std::log1p(a) / t;
            }
            case CopulaFamily::Gumbel: {
                if (par_ == 1.0) return u * v;
                const double s =
                    std::pow(-std::log(u), par_) + std::pow(-std::log(v), par_);
                return std::exp(-std::pow(s, 1.0 / par_));
            }
            case CopulaFamily::Gaussian: {
                // No closed form: integrate the conditional cdf over (0, v).
                const double uu = u;
                return integrate([this, uu](double t) { return t <= 0.0 || t >= 1.0
                                                               ? (t <= 0.0 ? 0.0 : uu)
                                                               : h(uu, t); },
                                 0.0, v, 1e-12);
            }
        }
        return 0.0;
    }

    // Copula density c(u,v).
    double density(double u, double v) const {
        check_domain(u, v);
        switch (family_) {
            case CopulaFamily::Independence:
                return 1.0;
            case CopulaFamily::Gaussian: {
                const double r = par_;
                if (r == 0.0) return 1.0;
                const double x = normal_inv_cdf(u), y = normal_inv_cdf(v);
                const double s = 1.0 - r * r;
                return std::exp(-(r * r * (x * x + y * y) - 2.0 * r * x * y) / (2.0 * s)) /
                       std::sqrt(s);
            }
            case CopulaFamily::Frank: {
                const double t = par_;
                const double a = -std::expm1(-t);        // 1 - e^{-t}
                const double b = -std::expm1(-t * u);    // 1 - e^{-tu}
                const double c = -std::expm1(-t * v);    // 1 - e^{-tv}
                const double d = a - b * c;
                return t * a * std::exp(-t * (u + v)) / (d * d);
            }
            case CopulaFamily::Gumbel: {
                const double t = par_;
                if (t == 1.0) return 1.0;
                const double x = -std::log(u), y = -std::log(v);
                const double s = std::pow(x, t) + std::pow(y, t);
                const double C = std::exp(-std::pow(s, 1.0 / t));
                return C / (u * v) * std::pow(x * y, t - 1.0) *
                       std::pow(s, 2.0 / t - 2.0) *
                       (1.0 + (t - 1.0) * std::pow(s, -1.0 / t));
            }
        }
        return 1.0;
    }

    // Conditional cdf h(u|v) = dC(u,v)/dv.
    double h(double u, double v) const {
        check_domain(u, v);
        double out;
        switch (family_) {
            case CopulaFamily::Independence:
                out = u;
                break;
            case CopulaFamily::Gaussian: {
                const double r = par_;
                if (r == 0.0) { out = u; break; }
                const double x = normal_inv_cdf(u), y = normal_inv_cdf(v);
                out = normal_cdf((x - r * y) / std::sqrt(1.0 - r * r));
                break;
            }
            case CopulaFamily::Frank: {
                const double t = par_;
                // e^{-tv}(e^{-tu}-1) / [(e^{-t}-1) + (e^{-tu}-1)(e^{-tv}-1)]
                const double eu = std::expm1(-t * u);
                const double ev = std::expm1(-t * v);
                const double et = std::expm1(-t);
                out = std::exp(-t * v) * eu / (et + eu * ev);
                break;
            }
            case CopulaFamily::Gumbel: {
                const double t = par_;
                if (t == 1.0) { out = u; break; }
                const double x = -std::log(u), y = -std::log(v);
                const double s = std::pow(x, t) + std::pow(y, t);
                out = std::exp(-std::pow(s, 1.0 / t)) * std::pow(s, 1.0 / t - 1.0) *
                      std::pow(y, t - 1.0) / v;
                break;
            }
            default:
                out = u;
        }
        return clamp_unit(out);
    }

    // Inverse of h in its first argument: u with h(u|v) = w.
    double h_inv(double w, double v) const {
        check_domain(w, v);
        switch (family_) {
            case CopulaFamily::Independence:
                return w;
            case CopulaFamily::Gaussian: {
                const double r = par_;
                if (r == 0.0) return w;
                const double y = normal_inv_cdf(v);
                return clamp_unit(
                    normal_cdf(normal_inv_cdf(w) * std::sqrt(1.0 - r * r) + r * y));
            }
            case CopulaFamily::Frank: {
                const double t = par_;
                const double ev = std::exp(-t * v);
                const double a = w * std::expm1(-t) / (ev - w * (ev - 1.0));
                return clamp_unit(-std::log1p(a) / t);
            }
            case CopulaFamily::Gumbel:
                return h_inv_numeric(w, v);
        }
        return w;
    }

private:
    PairCopula(CopulaFamily f, double p) : family_(f), par_(p) {}

    static void check_domain(double u, double v) {
        if (!(u > 0.0 && u < 1.0 && v > 0.0 && v < 1.0))
            throw std::domain_error("pair copula: arguments outside the open unit square");
    }

    // Bracketed bisection with Newton polish; h is monotone in u. The exit
    // test is on the u-bracket, not the residual: where the density (dh/du)
    // is nearly flat a tiny residual still allows a large u error.
    double h_inv_numeric(double w, double v) const {
        double lo = 1e-12, hi = 1.0 - 1e-12;
        double u = w;
        for (int iter = 0; iter < 200; ++iter) {
            const double f = h(u, v) - w;
            if (f > 0.0) hi = u;
            else lo = u;
            if (hi - lo < 1e-10) return 0.5 * (lo + hi);
            const double d = density(u, v);  // dh/du
            double u_new = d > 0.0 ? u - f / d : 0.5 * (lo + hi);
            if (!(u_new > lo && u_new < hi)) u_new = 0.5 * (lo + hi);
            u = u_new;
        }
        if (std::abs(h(u, v) - w) > 1e-9 && hi - lo > 1e-8)
            throw NumericalError("h_inv: numeric inversion failed at w=" + std::to_string(w) +
                                 ", v=" + std::to_string(v));
        return u;
    }

    CopulaFamily family_;
    double par_;
};

inline double pair_density(const PairCopula& c, double u, double v) { return c.density(u, v); }
inline double h_func(const PairCopula& c, double u, double v) { return c.h(u, v); }
inline double h_inv(const PairCopula& c, double w, double v) { return c.h_inv(w, v); }

// Kendall's tau implied by the family/parameter.
inline double tau_of(const PairCopula& c) {
    switch (c.family()) {
        case CopulaFamily::Independence:
            return 0.0;
        case CopulaFamily::Gaussian:
            return 2.0 * std::asin(c.parameter()) / M_PI;
        case CopulaFamily::Gumbel:
            return 1.0 - 1.0 / c.parameter();
        case CopulaFamily::Frank: {
            const double t = c.parameter();
            // D1: first Debye function by quadrature; x/(e^x - 1) has a
            // removable singularity at 0.
            auto integrand = [](double x) {
                return std::abs(x) < 1e-8 ? 1.0 - 0.5 * x : x / std::expm1(x);
            };
            const double d1 = integrate(integrand, 0.0, t, 1e-12) / t;
            return 1.0 - 4.0 / t * (1.0 - d1);
        }
    }
    return 0.0;
}

// ---------------------------------------------------------------------------
// C-/D-vine specification
// ---------------------------------------------------------------------------

enum class VineKind { CVine, DVine };

struct VineEdge {
    int tree = 1;   // 1..p-1
    int index = 1;  // 1..p-tree
    PairCopula copula = PairCopula::independence();
};

// Vine over p variables. variable_order maps vine position (0-based) to the
// caller's column index (0-based): vine variable j is column
// variable_order[j] of the design.
struct VineSpec {
    VineKind kind = VineKind::DVine;
    int dim = 2;
    std::vector<VineEdge> edges;          // length p(p-1)/2
    std::vector<int> variable_order;      // permutation of 0..p-1

    // Edge lookup table [tree-1][index-1].
    std::vector<std::vector<const PairCopula*>> table() const {
        std::vector<std::vector<const PairCopula*>> tab(dim - 1);
        for (int t = 1; t < dim; ++t) tab[t - 1].assign(dim - t, nullptr);
        for (const VineEdge& e : edges) {
            if (e.tree < 1 || e.tree > dim - 1 || e.index < 1 || e.index > dim - e.tree)
                throw ValidationError("vine edge (" + std::to_string(e.tree) + "," +
                                      std::to_string(e.index) + ") out of range");
            if (tab[e.tree - 1][e.index - 1])
                throw ValidationError("duplicate vine edge (" + std::to_string(e.tree) + "," +
                                      std::to_string(e.index) + ")");
            tab[e.tree - 1][e.index - 1] = &e.copula;
        }
        for (int t = 0; t < dim - 1; ++t)
            for (int i = 0; i < dim - 1 - t; ++i)
                if (!tab[t][i])
                    throw ValidationError("missing vine edge (" + std::to_string(t + 1) + "," +
                                          std::to_string(i + 1) + ")");
        return tab;
    }

    void validate() const {
        if (dim < 2) throw ValidationError("vine dimension must be >= 2");
        if (static_cast<int>(edges.size()) != dim * (dim - 1) / 2)
            throw ValidationError("vine needs p(p-1)/2 = " +
                                  std::to_string(dim * (dim - 1) / 2) + " edges, got " +
                                  std::to_string(edges.size()));
        (void)table();
        if (!variable_order.empty()) {
            if (static_cast<int>(variable_order.size()) != dim)
                throw ValidationError("variable_order length != dim");
            std::vector<int> seen(dim, 0);
            for (int v : variable_order) {
                if (v < 0 || v >= dim || seen[v]++)
                    throw ValidationError("variable_order is not a permutation");
            }
        }
    }

    static VineSpec all_independence(VineKind kind, int p) {
        VineSpec s;
        s.kind = kind;
        s.dim = p;
        for (int t = 1; t < p; ++t)
            for (int i = 1; i <= p - t; ++i)
                s.edges.push_back({t, i, PairCopula::independence()});
        return s;
    }
};

namespace detail {

// Conditional-cdf recursion over the vine. All vectors are in vine-variable
// space (0-based positions along the D-vine path / C-vine root order).
//
// D-vine: a(j,i) = F(u_i | u_j..u_{i-1}), b(j,i) = F(u_j | u_{j+1}..u_i);
// edge in tree i-j joins (j,i) given the block between them.
// C-vine: m(t,i) = F(u_i | u_1..u_{t-1}); edge in tree t joins (t,i).
struct VineEval {
    const VineSpec& spec;
    std::vector<std::vector<const PairCopula*>> tab;

    explicit VineEval(const VineSpec& s) : spec(s), tab(s.table()) {}

    const PairCopula& edge(int tree, int index) const { return *tab[tree - 1][index - 1]; }

    // Log copula density at u (vine order), marginals excluded.
    double log_density(const std::vector<double>& u) const {
        const int p = spec.dim;
        double ll = 0.0;
        if (spec.kind == VineKind::CVine) {
            // m[t][i], t=1..p, i=t..p (1-based)
            std::vector<std::vector<double>> m(p + 1, std::vector<double>(p + 1, 0.0));
            for (int i = 1; i <= p; ++i) m[1][i] = u[i - 1];
            for (int t = 1; t <= p - 1; ++t)
                for (int i = t + 1; i <= p; ++i) {
                    const PairCopula& c = edge(t, i - t);
                    ll += std::log(c.density(clamp_unit(m[t][t]), clamp_unit(m[t][i])));
                    m[t + 1][i] = c.h(clamp_unit(m[t][i]), clamp_unit(m[t][t]));
                }
        } else {
            // a[j][i] and b[j][i], 1 <= j <= i <= p
            std::vector<std::vector<double>> a(p + 1, std::vector<double>(p + 1, 0.0));
            auto b = a;
            for (int i = 1; i <= p; ++i) a[i][i] = b[i][i] = u[i - 1];
            for (int t = 1; t <= p - 1; ++t)
                for (int j = 1; j + t <= p; ++j) {
                    const int i = j + t;
                    const PairCopula& c = edge(t, j);
                    const double arg1 = clamp_unit(b[j][i - 1]);  // F(u_j | between)
                    const double arg2 = clamp_unit(a[j + 1][i]);  // F(u_i | between)
                    ll += std::log(c.density(arg1, arg2));
                    a[j][i] = c.h(arg2, arg1);
                    b[j][i] = c.h(arg1, arg2);
                }
        }
        return ll;
    }

    // Rosenblatt transform: dependent uniforms -> i.i.d. uniforms.
    std::vector<double> rosenblatt_forward(const std::vector<double>& u) const {
        const int p = spec.dim;
        std::vector<double> w(p);
        if (spec.kind == VineKind::CVine) {
            std::vector<std::vector<double>> m(p + 1, std::vector<double>(p + 1, 0.0));
            for (int i = 1; i <= p; ++i) m[1][i] = u[i - 1];
            w[0] = u[0];
            for (int t = 1; t <= p - 1; ++t)
                for (int i = t + 1; i <= p; ++i) {
                    m[t + 1][i] = edge(t, i - t).h(clamp_unit(m[t][i]), clamp_unit(m[t][t]));
                    if (i == t + 1) w[i - 1] = m[t + 1][i];
                }
        } else {
            std::vector<std::vector<double>> a(p + 1, std::vector<double>(p + 1, 0.0));
            auto b = a;
            for (int i = 1; i <= p; ++i) a[i][i] = b[i][i] = u[i - 1];
            w[0] = u[0];
            for (int t = 1; t <= p - 1; ++t)
                for (int j = 1; j + t <= p; ++j) {
                    const int i = j + t;
                    const PairCopula& c = edge(t, j);
                    const double arg1 = clamp_unit(b[j][i - 1]);
                    const double arg2 = clamp_unit(a[j + 1][i]);
                    a[j][i] = c.h(arg2, arg1);
                    b[j][i] = c.h(arg1, arg2);
                    if (j == 1) w[i - 1] = a[1][i];  // F(u_i | u_1..u_{i-1})
                }
        }
        return w;
    }

    // Inverse Rosenblatt: i.i.d. uniforms -> dependent uniforms.
    std::vector<double> sample_inverse(const std::vector<double>& w) const {
        const int p = spec.dim;
        std::vector<double> u(p);
        if (spec.kind == VineKind::CVine) {
            std::vector<std::vector<double>> m(p + 1, std::vector<double>(p + 1, 0.0));
            u[0] = w[0];
            m[1][1] = u[0];
            for (int i = 2; i <= p; ++i) {
                // invert the chain m[i][i] = w_i back to m[1][i] = u_i; the
                // diagonals m[t][t] = F(u_t | u_1..u_{t-1}) are already known
                double t_val = w[i - 1];
                for (int t = i - 1; t >= 1; --t)
                    t_val = edge(t, i - t).h_inv(clamp_unit(t_val), clamp_unit(m[t][t]));
                u[i - 1] = t_val;
                // forward pass fills column i, including the new diagonal
                m[1][i] = u[i - 1];
                for (int t = 1; t <= i - 1; ++t)
                    m[t + 1][i] = edge(t, i - t).h(clamp_unit(m[t][i]), clamp_unit(m[t][t]));
            }
        } else {
            std::vector<std::vector<double>> a(p + 1, std::vector<double>(p + 1, 0.0));
            auto b = a;
            u[0] = w[0];
            a[1][1] = b[1][1] = u[0];
            for (int i = 2; i <= p; ++i) {
                // a(1,i) = w_i; invert upward: a(j+1,i) = h_inv(a(j,i) | b(j+1,i-1))
                double t_val = w[i - 1];
                for (int j = 1; j <= i - 1; ++j)
                    t_val = edge(i - j, j).h_inv(clamp_unit(t_val), clamp_unit(b[j][i - 1]));
                u[i - 1] = t_val;
                a[i][i] = b[i][i] = u[i - 1];
                // fill column i of a/b for subsequent variables
                for (int t = 1; t <= i - 1; ++t) {
                    const int j = i - t;
                    const PairCopula& c = edge(t, j);
                    const double arg1 = clamp_unit(b[j][i - 1]);
                    const double arg2 = clamp_unit(a[j + 1][i]);
                    a[j][i] = c.h(arg2, arg1);
                    b[j][i] = c.h(arg1, arg2);
                }
            }
        }
        return u;
    }
};

}  // namespace detail

inline double vine_log_density(const VineSpec& spec, const std::vector<double>& u) {
    spec.validate();
    if (static_cast<int>(u.size()) != spec.dim)
        throw std::domain_error("vine_log_density: dimension mismatch");
    for (double ui : u)
        if (!(ui > 0.0 && ui < 1.0))
            throw std::domain_error("vine_log_density: u outside the open unit hypercube");
    return detail::VineEval(spec).log_density(u);
}

inline std::vector<double> vine_sample_inverse(const VineSpec& spec,
                                               const std::vector<double>& w) {
    spec.validate();
    if (static_cast<int>(w.size()) != spec.dim)
        throw std::domain_error("vine_sample_inverse: dimension mismatch");
    for (double wi : w)
        if (!(wi > 0.0 && wi < 1.0))
            throw std::domain_error("vine_sample_inverse: w outside (0,1)^p");
    return detail::VineEval(spec).sample_inverse(w);
}

inline std::vector<double> vine_rosenblatt_forward(const VineSpec& spec,
                                                   const std::vector<double>& u) {
    spec.validate();
    if (static_cast<int>(u.size()) != spec.dim)
        throw std::domain_error("vine_rosenblatt_forward: dimension mismatch");
    for (double ui : u)
        if (!(ui > 0.0 && ui < 1.0))
            throw std::domain_error("vine_rosenblatt_forward: u outside (0,1)^p");
    return detail::VineEval(spec).rosenblatt_forward(u);
}

// ---------------------------------------------------------------------------
// JSON (scenario config) serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const PairCopula& c) {
    switch (c.family()) {
        case CopulaFamily::Independence: return {{"family", "independence"}};
        case CopulaFamily::Gaussian:
            return {{"family", "gaussian"}, {"parameter", c.parameter()}};
        case CopulaFamily::Frank: return {{"family", "frank"}, {"parameter", c.parameter()}};
        case CopulaFamily::Gumbel: return {{"family", "gumbel"}, {"parameter", c.parameter()}};
    }
    return {};
}

inline PairCopula pair_copula_from_json(const nlohmann::json& j) {
    const std::string fam = j.at("family");
    if (fam == "independence") return PairCopula::independence();
    if (fam == "gaussian") return PairCopula::gaussian(j.at("parameter"));
    if (fam == "frank") return PairCopula::frank(j.at("parameter"));
    if (fam == "gumbel") return PairCopula::gumbel(j.at("parameter"));
    throw ParseError("unknown pair copula family '" + fam + "'");
}

inline nlohmann::json to_json(const VineSpec& s) {
    nlohmann::json j;
    j["kind"] = s.kind == VineKind::CVine ? "cvine" : "dvine";
    j["dim"] = s.dim;
    if (!s.variable_order.empty()) {
        std::vector<int> order1;  // 1-based in the config file
        for (int v : s.variable_order) order1.push_back(v + 1);
        j["variable_order"] = order1;
    }
    for (const VineEdge& e : s.edges) {
        nlohmann::json je = to_json(e.copula);
        je["tree"] = e.tree;
        je["index"] = e.index;
        j["edges"].push_back(je);
    }
    return j;
}

inline VineSpec vine_from_json(const nlohmann::json& j) {
    VineSpec s;
    const std::string kind = j.at("kind");
    if (kind == "cvine") s.kind = VineKind::CVine;
    else if (kind == "dvine") s.kind = VineKind::DVine;
    else throw ParseError("unknown vine kind '" + kind + "'");
    s.dim = j.at("dim");
    if (j.contains("variable_order"))
        for (int v : j.at("variable_order")) s.variable_order.push_back(v - 1);
    for (const auto& je : j.at("edges"))
        s.edges.push_back({je.at("tree"), je.at("index"), pair_copula_from_json(je)});
    s.validate();
    return s;
}

}  // namespace plm
