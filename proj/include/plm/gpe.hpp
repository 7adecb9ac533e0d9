#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "plm/common.hpp"

namespace plm {

// ---------------------------------------------------------------------------
// Trend bases
// ---------------------------------------------------------------------------

enum class BasisKind { Constant, Linear, PureQuadratic };

struct BasisSpec {
    BasisKind kind = BasisKind::Constant;

    int width(int p) const {
        switch (kind) {
            case BasisKind::Constant: return 1;
            case BasisKind::Linear: return 1 + p;
            case BasisKind::PureQuadratic: return 1 + 2 * p;
        }
        return 1;
    }
};

inline Eigen::RowVectorXd basis_row(const BasisSpec& b, const Eigen::VectorXd& x) {
    const int p = static_cast<int>(x.size());
    Eigen::RowVectorXd row(b.width(p));
    row[0] = 1.0;
    if (b.kind == BasisKind::Linear || b.kind == BasisKind::PureQuadratic)
        row.segment(1, p) = x.transpose();
    if (b.kind == BasisKind::PureQuadratic)
        row.segment(1 + p, p) = x.array().square().matrix().transpose();
    return row;
}

inline Eigen::MatrixXd basis_matrix(const BasisSpec& b, const Eigen::MatrixXd& X) {
    Eigen::MatrixXd H(X.rows(), b.width(static_cast<int>(X.cols())));
    for (int i = 0; i < X.rows(); ++i) H.row(i) = basis_row(b, X.row(i).transpose());
    return H;
}

// ---------------------------------------------------------------------------
// Covariance kernels
// ---------------------------------------------------------------------------

enum class KernelFamily { SquaredExponential, Exponential, RationalQuadratic, Matern32 };

struct KernelSpec {
    KernelFamily family = KernelFamily::Matern32;
    double tau2 = 1.0;                 // signal variance tau^2
    Eigen::VectorXd lengthscales;      // one per input dimension
    double rq_alpha = 2.0;             // only used by RationalQuadratic

    void check() const {
        if (!(tau2 > 0.0)) throw ValidationError("kernel: tau^2 must be positive");
        if (!(lengthscales.array() > 0.0).all())
            throw ValidationError("kernel: lengthscales must be positive");
        if (family == KernelFamily::RationalQuadratic && !(rq_alpha > 0.0))
            throw ValidationError("kernel: RQ alpha must be positive");
    }
};

inline double kernel_eval(const KernelSpec& k, const Eigen::VectorXd& xi,
                          const Eigen::VectorXd& xj) {
    const Eigen::ArrayXd r = (xi - xj).array().abs() / k.lengthscales.array();
    switch (k.family) {
        case KernelFamily::SquaredExponential:
            return k.tau2 * std::exp(-0.5 * r.square().sum());
        case KernelFamily::Exponential:
            return k.tau2 * std::exp(-r.sum());
        case KernelFamily::RationalQuadratic:
            return k.tau2 * std::pow(1.0 + r.square().sum() / (2.0 * k.rq_alpha), -k.rq_alpha);
        case KernelFamily::Matern32: {
            const double s = std::sqrt(3.0) * r.sum();
            return k.tau2 * (1.0 + s) * std::exp(-s);
        }
    }
    return 0.0;
}

inline Eigen::MatrixXd kernel_matrix(const KernelSpec& k, const Eigen::MatrixXd& A,
                                     const Eigen::MatrixXd& B) {
    Eigen::MatrixXd K(A.rows(), B.rows());
    for (int i = 0; i < A.rows(); ++i)
        for (int j = 0; j < B.rows(); ++j)
            K(i, j) = kernel_eval(k, A.row(i).transpose(), B.row(j).transpose());
    return K;
}

// ---------------------------------------------------------------------------
// Log marginal likelihood and the profiled trend estimate
// ---------------------------------------------------------------------------

struct Hyperparameters {
    double sigma2 = 0.0;      // nugget variance
    Eigen::VectorXd beta;     // trend coefficients
    KernelSpec kernel;
};

namespace detail {

struct LikelihoodTerms {
    Eigen::LLT<Eigen::MatrixXd> llt;  // of K11 = K + sigma2 I
    double log_det = 0.0;
};

inline std::optional<LikelihoodTerms> factor_k11(const KernelSpec& kernel, double sigma2,
                                                 const Eigen::MatrixXd& X) {
    Eigen::MatrixXd K = kernel_matrix(kernel, X, X);
    K.diagonal().array() += sigma2;
    LikelihoodTerms t;
    t.llt.compute(K);
    if (t.llt.info() != Eigen::Success) return std::nullopt;
    t.log_det = 2.0 * t.llt.matrixLLT().diagonal().array().log().sum();
    return t;
}

}  // namespace detail

// Weighted least-squares trend estimate given the kernel hyperparameters.
inline Eigen::VectorXd beta_profile(const Eigen::MatrixXd& X, const Eigen::VectorXd& Y,
                                    const BasisSpec& basis, const KernelSpec& kernel,
                                    double sigma2) {
    const Eigen::MatrixXd H = basis_matrix(basis, X);
    if (H.rows() < H.cols())
        throw ValidationError("beta_profile: " + std::to_string(H.cols()) +
                              " basis columns need at least as many training points; "
                              "increase n");
    auto terms = detail::factor_k11(kernel, sigma2, X);
    if (!terms) throw NumericalError("beta_profile: K11 factorization failed");
    const Eigen::MatrixXd KiH = terms->llt.solve(H);
    const Eigen::VectorXd KiY = terms->llt.solve(Y);
    const Eigen::MatrixXd A = H.transpose() * KiH;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    if (!lu.isInvertible())
        throw ValidationError("beta_profile: basis matrix is rank deficient; increase n");
    return lu.solve(H.transpose() * KiY);
}

// Marginal log-likelihood at fixed hyperparameters.
inline double log_marginal_likelihood(const Eigen::MatrixXd& X, const Eigen::VectorXd& Y,
                                      const BasisSpec& basis, const KernelSpec& kernel,
                                      double sigma2, const Eigen::VectorXd& beta) {
    auto terms = detail::factor_k11(kernel, sigma2, X);
    if (!terms) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(kernel_matrix(kernel, X, X));
        throw NumericalError(
            "log_marginal_likelihood: K11 not positive definite (min eigenvalue " +
            std::to_string(es.eigenvalues().minCoeff() + sigma2) + ")");
    }
    const Eigen::VectorXd r = Y - basis_matrix(basis, X) * beta;
    const double n = static_cast<double>(X.rows());
    return -0.5 * r.dot(terms->llt.solve(r)) - 0.5 * n * std::log(2.0 * M_PI) -
           0.5 * terms->log_det;
}

// Profiled version: beta eliminated by its weighted least-squares estimate.
inline double profiled_log_likelihood(const Eigen::MatrixXd& X, const Eigen::VectorXd& Y,
                                      const BasisSpec& basis, const KernelSpec& kernel,
                                      double sigma2) {
    const Eigen::VectorXd beta = beta_profile(X, Y, basis, kernel, sigma2);
    return log_marginal_likelihood(X, Y, basis, kernel, sigma2, beta);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainOptions {
    int multi_starts = 8;
    int max_opt_iter = 200;
    double nugget_floor = 1e-8;   // in standardized output units
    bool optimize_nugget = true;
    std::uint64_t seed = 0;
};

struct Standardization {
    Eigen::VectorXd x_mean, x_scale;
    double y_mean = 0.0, y_scale = 1.0;
};

class TrainedEmulator {
public:
    Eigen::MatrixXd x_train;   // standardized
    Eigen::VectorXd y_train;   // standardized
    BasisSpec basis;
    Hyperparameters eta_hat;   // in standardized units
    Standardization std_par;
    bool warning_no_improvement = false;
    double ll_opt = 0.0;         // profiled LL at the returned hyperparameters
    double ll_best_start = 0.0;  // best profiled LL over the multi-start inits

    // cached factorization pieces
    Eigen::LLT<Eigen::MatrixXd> chol_k11;
    Eigen::VectorXd alpha_vec;  // K11^{-1} (Y - H beta)

    Eigen::VectorXd standardize(const Eigen::VectorXd& x_raw) const {
        return ((x_raw - std_par.x_mean).array() / std_par.x_scale.array()).matrix();
    }

    double predict_mean(const Eigen::VectorXd& x_raw) const {
        const Eigen::VectorXd x = standardize(x_raw);
        Eigen::VectorXd k21(x_train.rows());
        for (int i = 0; i < x_train.rows(); ++i)
            k21[i] = kernel_eval(eta_hat.kernel, x, x_train.row(i).transpose());
        const double mu = basis_row(basis, x).dot(eta_hat.beta) + k21.dot(alpha_vec);
        return std_par.y_mean + std_par.y_scale * mu;
    }

    Eigen::VectorXd predict_mean_batch(const Eigen::MatrixXd& X_raw) const {
        Eigen::VectorXd out(X_raw.rows());
        for (int i = 0; i < X_raw.rows(); ++i)
            out[i] = predict_mean(Eigen::VectorXd(X_raw.row(i).transpose()));
        return out;
    }

    // Posterior covariance over a query block; nugget included in K22 by
    // default, excludable for noise-free prediction bands.
    Eigen::MatrixXd predict_cov(const Eigen::MatrixXd& Xs_raw, bool include_nugget = true) const {
        const int m = static_cast<int>(Xs_raw.rows());
        Eigen::MatrixXd Xs(m, Xs_raw.cols());
        for (int i = 0; i < m; ++i) Xs.row(i) = standardize(Xs_raw.row(i).transpose());
        const Eigen::MatrixXd K21 = kernel_matrix(eta_hat.kernel, Xs, x_train);
        Eigen::MatrixXd K22 = kernel_matrix(eta_hat.kernel, Xs, Xs);
        if (include_nugget) K22.diagonal().array() += eta_hat.sigma2;
        Eigen::MatrixXd cov = K22 - K21 * chol_k11.solve(K21.transpose());
        return cov * (std_par.y_scale * std_par.y_scale);
    }

    nlohmann::json to_json() const;
    static TrainedEmulator from_json(const nlohmann::json& j);
};

namespace detail {

// Derivative-free-friendly objective in log space: v = [log tau2,
// log l_1..l_p, log(sigma2 - floor)]; returns -infinity on factorization
// failure so the optimizer backs away.
struct GpObjective {
    const Eigen::MatrixXd& X;
    const Eigen::VectorXd& Y;
    BasisSpec basis;
    KernelFamily family;
    double rq_alpha;
    double nugget_floor;
    bool optimize_nugget;

    int dim() const { return static_cast<int>(X.cols()) + 1 + (optimize_nugget ? 1 : 0); }

    KernelSpec kernel_of(const Eigen::VectorXd& v) const {
        KernelSpec k;
        k.family = family;
        k.rq_alpha = rq_alpha;
        k.tau2 = std::exp(v[0]);
        k.lengthscales = v.segment(1, X.cols()).array().exp();
        return k;
    }
    double sigma2_of(const Eigen::VectorXd& v) const {
        return optimize_nugget ? nugget_floor + std::exp(v[dim() - 1]) : nugget_floor;
    }

    double operator()(const Eigen::VectorXd& v) const {
        const KernelSpec k = kernel_of(v);
        if (!(k.tau2 > 1e-12) || !(k.tau2 < 1e12)) return -std::numeric_limits<double>::infinity();
        try {
            return profiled_log_likelihood(X, Y, basis, k, sigma2_of(v));
        } catch (const std::exception&) {
            return -std::numeric_limits<double>::infinity();
        }
    }
};

// Quasi-Newton (BFGS) maximization with central-difference gradients and
// Armijo backtracking. Small dimension, smooth objective.
inline Eigen::VectorXd bfgs_maximize(const GpObjective& obj, Eigen::VectorXd v, int max_iter) {
    const int d = static_cast<int>(v.size());
    const double fd_h = 1e-5;
    auto gradient = [&](const Eigen::VectorXd& at) {
        Eigen::VectorXd g(d);
        for (int i = 0; i < d; ++i) {
            Eigen::VectorXd hp = at, hm = at;
            hp[i] += fd_h;
            hm[i] -= fd_h;
            g[i] = (obj(hp) - obj(hm)) / (2.0 * fd_h);
        }
        return g;
    };

    double f = obj(v);
    if (!std::isfinite(f)) return v;
    Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(d, d);
    Eigen::VectorXd g = gradient(v);

    for (int iter = 0; iter < max_iter; ++iter) {
        if (g.norm() < 1e-8) break;
        Eigen::VectorXd dir = Hinv * g;  // ascent
        if (dir.dot(g) <= 0.0) {
            Hinv.setIdentity();
            dir = g;
        }
        double step = 1.0;
        double f_new = -std::numeric_limits<double>::infinity();
        Eigen::VectorXd v_new;
        bool ok = false;
        for (int ls = 0; ls < 30; ++ls) {
            v_new = v + step * dir;
            f_new = obj(v_new);
            if (std::isfinite(f_new) && f_new >= f + 1e-4 * step * dir.dot(g)) {
                ok = true;
                break;
            }
            step *= 0.5;
        }
        if (!ok) break;

        const Eigen::VectorXd g_new = gradient(v_new);
        const Eigen::VectorXd s = v_new - v;
        const Eigen::VectorXd yk = g - g_new;  // note: maximization
        const double sy = s.dot(yk);
        if (sy > 1e-12) {
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
            Hinv = (I - s * yk.transpose() / sy) * Hinv * (I - yk * s.transpose() / sy) +
                   s * s.transpose() / sy;
        }
        v = v_new;
        f = f_new;
        g = g_new;
        if (s.norm() < 1e-10) break;
    }
    return v;
}

}  // namespace detail

// Profiled maximum-likelihood training with multi-start quasi-Newton search.
inline TrainedEmulator train(const Eigen::MatrixXd& X_raw, const Eigen::VectorXd& Y_raw,
                             const BasisSpec& basis, KernelFamily family,
                             const TrainOptions& opt = {}) {
    const int n = static_cast<int>(X_raw.rows());
    const int p = static_cast<int>(X_raw.cols());
    if (n < basis.width(p) + 1)
        throw ValidationError("train: need at least " + std::to_string(basis.width(p) + 1) +
                              " training points for this basis, got " + std::to_string(n));

    // standardize inputs and outputs on the training set
    Standardization sp;
    sp.x_mean = X_raw.colwise().mean();
    sp.x_scale.resize(p);
    for (int j = 0; j < p; ++j) {
        const double var =
            (X_raw.col(j).array() - sp.x_mean[j]).square().sum() / std::max(1, n - 1);
        sp.x_scale[j] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    sp.y_mean = Y_raw.mean();
    const double y_var = (Y_raw.array() - sp.y_mean).square().sum() / std::max(1, n - 1);
    sp.y_scale = y_var > 0.0 ? std::sqrt(y_var) : 1.0;

    Eigen::MatrixXd X(n, p);
    for (int j = 0; j < p; ++j) X.col(j) = (X_raw.col(j).array() - sp.x_mean[j]) / sp.x_scale[j];
    const Eigen::VectorXd Y = (Y_raw.array() - sp.y_mean) / sp.y_scale;

    double floor = opt.nugget_floor;
    for (int attempt = 0; attempt < 4; ++attempt) {
        detail::GpObjective obj{X, Y, basis, family, 2.0, floor, opt.optimize_nugget};
        const int d = obj.dim();

        // base start: lengthscale = per-dimension standardized range,
        // tau2 = output variance (1 after standardization), sigma2 small
        Eigen::VectorXd v0(d);
        v0[0] = 0.0;
        for (int j = 0; j < p; ++j) {
            const double range = X.col(j).maxCoeff() - X.col(j).minCoeff();
            v0[1 + j] = std::log(std::max(range, 1e-3));
        }
        if (opt.optimize_nugget) v0[d - 1] = std::log(1e-4);

        RngStream rng(opt.seed, "gpe/multistart");
        static const double jitter[3] = {0.1, 1.0, 10.0};
        std::vector<Eigen::VectorXd> starts;
        starts.push_back(v0);
        for (int s = 1; s < opt.multi_starts; ++s) {
            Eigen::VectorXd v = v0;
            for (int i = 0; i < d; ++i)
                v[i] += std::log(jitter[rng.next_u64() % 3]) + 0.25 * (rng.uniform() - 0.5);
            starts.push_back(v);
        }

        double best_f = -std::numeric_limits<double>::infinity();
        double best_start_f = -std::numeric_limits<double>::infinity();
        Eigen::VectorXd best_v;
        for (const auto& s : starts) {
            const double f0 = obj(s);
            best_start_f = std::max(best_start_f, f0);
            const Eigen::VectorXd v = detail::bfgs_maximize(obj, s, opt.max_opt_iter);
            const double f = obj(v);
            if (f > best_f) {
                best_f = f;
                best_v = v;
            }
        }
        if (!std::isfinite(best_f)) {
            floor *= 10.0;  // every start failed to factorize; raise and retry
            continue;
        }

        TrainedEmulator em;
        em.x_train = X;
        em.y_train = Y;
        em.basis = basis;
        em.std_par = sp;
        em.eta_hat.kernel = obj.kernel_of(best_v);
        em.eta_hat.sigma2 = obj.sigma2_of(best_v);
        em.eta_hat.beta = beta_profile(X, Y, basis, em.eta_hat.kernel, em.eta_hat.sigma2);
        em.warning_no_improvement = !(best_f > best_start_f);
        em.ll_opt = best_f;
        em.ll_best_start = best_start_f;

        auto terms = detail::factor_k11(em.eta_hat.kernel, em.eta_hat.sigma2, X);
        if (!terms) {
            floor *= 10.0;
            continue;
        }
        em.chol_k11 = terms->llt;
        em.alpha_vec = em.chol_k11.solve(Y - basis_matrix(basis, X) * em.eta_hat.beta);
        return em;
    }
    throw NumericalError("train: K11 remained non-positive-definite after raising the nugget");
}

// ---------------------------------------------------------------------------
// Serialization (reload without retraining)
// ---------------------------------------------------------------------------

inline std::string kernel_family_name(KernelFamily f) {
    switch (f) {
        case KernelFamily::SquaredExponential: return "squared-exponential";
        case KernelFamily::Exponential: return "exponential";
        case KernelFamily::RationalQuadratic: return "rational-quadratic";
        case KernelFamily::Matern32: return "matern32";
    }
    return "?";
}

inline KernelFamily kernel_family_from_name(const std::string& s) {
    if (s == "squared-exponential") return KernelFamily::SquaredExponential;
    if (s == "exponential") return KernelFamily::Exponential;
    if (s == "rational-quadratic") return KernelFamily::RationalQuadratic;
    if (s == "matern32") return KernelFamily::Matern32;
    throw ParseError("unknown kernel family '" + s + "'");
}

inline std::string basis_name(BasisKind b) {
    switch (b) {
        case BasisKind::Constant: return "constant";
        case BasisKind::Linear: return "linear";
        case BasisKind::PureQuadratic: return "pure-quadratic";
    }
    return "?";
}

inline BasisKind basis_from_name(const std::string& s) {
    if (s == "constant") return BasisKind::Constant;
    if (s == "linear") return BasisKind::Linear;
    if (s == "pure-quadratic") return BasisKind::PureQuadratic;
    throw ParseError("unknown basis '" + s + "'");
}

inline nlohmann::json TrainedEmulator::to_json() const {
    nlohmann::json j;
    j["basis"] = basis_name(basis.kind);
    j["kernel"] = kernel_family_name(eta_hat.kernel.family);
    j["tau2"] = eta_hat.kernel.tau2;
    j["lengthscales"] =
        std::vector<double>(eta_hat.kernel.lengthscales.begin(), eta_hat.kernel.lengthscales.end());
    j["rq_alpha"] = eta_hat.kernel.rq_alpha;
    j["sigma2"] = eta_hat.sigma2;
    j["beta"] = std::vector<double>(eta_hat.beta.begin(), eta_hat.beta.end());
    j["x_mean"] = std::vector<double>(std_par.x_mean.begin(), std_par.x_mean.end());
    j["x_scale"] = std::vector<double>(std_par.x_scale.begin(), std_par.x_scale.end());
    j["y_mean"] = std_par.y_mean;
    j["y_scale"] = std_par.y_scale;
    for (int i = 0; i < x_train.rows(); ++i)
        j["x_train"].push_back(std::vector<double>(x_train.row(i).begin(), x_train.row(i).end()));
    j["y_train"] = std::vector<double>(y_train.begin(), y_train.end());
    return j;
}

inline TrainedEmulator TrainedEmulator::from_json(const nlohmann::json& j) {
    TrainedEmulator em;
    em.basis.kind = basis_from_name(j.at("basis"));
    em.eta_hat.kernel.family = kernel_family_from_name(j.at("kernel"));
    em.eta_hat.kernel.tau2 = j.at("tau2");
    const std::vector<double> ls = j.at("lengthscales");
    em.eta_hat.kernel.lengthscales =
        Eigen::Map<const Eigen::VectorXd>(ls.data(), static_cast<int>(ls.size()));
    em.eta_hat.kernel.rq_alpha = j.at("rq_alpha");
    em.eta_hat.sigma2 = j.at("sigma2");
    const std::vector<double> beta = j.at("beta");
    em.eta_hat.beta = Eigen::Map<const Eigen::VectorXd>(beta.data(), static_cast<int>(beta.size()));
    const std::vector<double> xm = j.at("x_mean"), xs = j.at("x_scale");
    em.std_par.x_mean = Eigen::Map<const Eigen::VectorXd>(xm.data(), static_cast<int>(xm.size()));
    em.std_par.x_scale = Eigen::Map<const Eigen::VectorXd>(xs.data(), static_cast<int>(xs.size()));
    em.std_par.y_mean = j.at("y_mean");
    em.std_par.y_scale = j.at("y_scale");
    const auto& jx = j.at("x_train");
    em.x_train.resize(jx.size(), em.std_par.x_mean.size());
    for (std::size_t i = 0; i < jx.size(); ++i) {
        const std::vector<double> row = jx[i];
        em.x_train.row(static_cast<int>(i)) =
            Eigen::Map<const Eigen::RowVectorXd>(row.data(), static_cast<int>(row.size()));
    }
    const std::vector<double> y = j.at("y_train");
    em.y_train = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<int>(y.size()));

    auto terms = detail::factor_k11(em.eta_hat.kernel, em.eta_hat.sigma2, em.x_train);
    if (!terms) throw NumericalError("emulator reload: cached K11 not positive definite");
    em.chol_k11 = terms->llt;
    em.alpha_vec =
        em.chol_k11.solve(em.y_train - basis_matrix(em.basis, em.x_train) * em.eta_hat.beta);
    return em;
}

}  // namespace plm
