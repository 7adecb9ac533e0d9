#include <catch2/catch_amalgamated.hpp>

#include "plm/gpe.hpp"

using namespace plm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_inputs(int n, int p, std::uint64_t seed) {
    RngStream rng(seed, "test/gpe-x");
    MatrixXd X(n, p);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) X(i, j) = 4.0 * rng.uniform() - 2.0;
    return X;
}

VectorXd smooth_outputs(const MatrixXd& X) {
    VectorXd y(X.rows());
    for (int i = 0; i < X.rows(); ++i) {
        const VectorXd x = X.row(i).transpose();
        y[i] = 1.0 + x.sum() + 0.3 * x.squaredNorm() + 0.1 * std::sin(2.0 * x[0]);
    }
    return y;
}

KernelSpec moderate_kernel(KernelFamily f, int p) {
    KernelSpec k;
    k.family = f;
    k.tau2 = 1.3;
    k.lengthscales = VectorXd::Constant(p, 1.1);
    return k;
}

// Emulator with identity standardization so raw-space checks against the
// dense algebra need no unscaling.
TrainedEmulator make_emulator(const MatrixXd& X, const VectorXd& Y, const BasisSpec& basis,
                              const KernelSpec& kernel, double sigma2) {
    TrainedEmulator em;
    em.x_train = X;
    em.y_train = Y;
    em.basis = basis;
    em.std_par.x_mean = VectorXd::Zero(X.cols());
    em.std_par.x_scale = VectorXd::Ones(X.cols());
    em.eta_hat.kernel = kernel;
    em.eta_hat.sigma2 = sigma2;
    em.eta_hat.beta = beta_profile(X, Y, basis, kernel, sigma2);
    auto terms = detail::factor_k11(kernel, sigma2, X);
    REQUIRE(terms);
    em.chol_k11 = terms->llt;
    em.alpha_vec = em.chol_k11.solve(Y - basis_matrix(basis, X) * em.eta_hat.beta);
    return em;
}

}  // namespace

TEST_CASE("basis rows") {
    VectorXd x(2);
    x << 2.0, 3.0;
    CHECK(basis_row({BasisKind::Constant}, x) == Eigen::RowVectorXd::Ones(1));
    Eigen::RowVectorXd lin(3);
    lin << 1, 2, 3;
    CHECK(basis_row({BasisKind::Linear}, x) == lin);
    Eigen::RowVectorXd quad(5);
    quad << 1, 2, 3, 4, 9;
    CHECK(basis_row({BasisKind::PureQuadratic}, x) == quad);
}

TEST_CASE("kernel evaluations match their defining formulas") {
    VectorXd xi(2), xj(2), l(2);
    xi << 0.3, -1.0;
    xj << 1.1, 0.5;
    l << 0.7, 1.4;
    const Eigen::ArrayXd r = (xi - xj).array().abs() / l.array();
    KernelSpec k;
    k.tau2 = 2.5;
    k.lengthscales = l;

    k.family = KernelFamily::SquaredExponential;
    CHECK(kernel_eval(k, xi, xj) == Catch::Approx(2.5 * std::exp(-0.5 * r.square().sum())));
    k.family = KernelFamily::Exponential;
    CHECK(kernel_eval(k, xi, xj) == Catch::Approx(2.5 * std::exp(-r.sum())));
    k.family = KernelFamily::RationalQuadratic;
    k.rq_alpha = 2.0;
    CHECK(kernel_eval(k, xi, xj) ==
          Catch::Approx(2.5 * std::pow(1.0 + r.square().sum() / 4.0, -2.0)));
    k.family = KernelFamily::Matern32;
    const double s = std::sqrt(3.0) * r.sum();
    CHECK(kernel_eval(k, xi, xj) == Catch::Approx(2.5 * (1.0 + s) * std::exp(-s)));

    for (auto f : {KernelFamily::SquaredExponential, KernelFamily::Exponential,
                   KernelFamily::RationalQuadratic, KernelFamily::Matern32}) {
        k.family = f;
        CHECK(kernel_eval(k, xi, xj) == kernel_eval(k, xj, xi));
        CHECK(kernel_eval(k, xi, xi) == Catch::Approx(2.5));
    }
    k.tau2 = -1.0;
    CHECK_THROWS_AS(k.check(), ValidationError);
}

TEST_CASE("likelihood, trend profile, and posterior match the dense oracle") {
    for (auto f : {KernelFamily::SquaredExponential, KernelFamily::Exponential,
                   KernelFamily::RationalQuadratic, KernelFamily::Matern32}) {
        const int n = 6, p = 3;
        const MatrixXd X = random_inputs(n, p, 17 + static_cast<int>(f));
        const VectorXd Y = smooth_outputs(X);
        const BasisSpec basis{BasisKind::Linear};
        const KernelSpec kernel = moderate_kernel(f, p);
        const double sigma2 = 1e-4;

        // dense oracle: explicit inverses, no factorizations shared with the
        // implementation under test
        MatrixXd K = kernel_matrix(kernel, X, X);
        K.diagonal().array() += sigma2;
        const MatrixXd Ki = K.inverse();
        const MatrixXd H = basis_matrix(basis, X);
        const VectorXd beta_o = (H.transpose() * Ki * H).inverse() * H.transpose() * Ki * Y;

        const VectorXd beta = beta_profile(X, Y, basis, kernel, sigma2);
        CHECK((beta - beta_o).cwiseAbs().maxCoeff() < 1e-8);

        const VectorXd r = Y - H * beta_o;
        const double ll_o = -0.5 * r.dot(Ki * r) - 0.5 * n * std::log(2.0 * M_PI) -
                            0.5 * std::log(K.determinant());
        CHECK(std::abs(log_marginal_likelihood(X, Y, basis, kernel, sigma2, beta_o) - ll_o) <
              1e-8);

        const TrainedEmulator em = make_emulator(X, Y, basis, kernel, sigma2);
        MatrixXd Xq = random_inputs(4, p, 99);
        const MatrixXd K21 = kernel_matrix(kernel, Xq, X);
        for (int i = 0; i < Xq.rows(); ++i) {
            const VectorXd xq = Xq.row(i).transpose();
            const double mean_o =
                basis_row(basis, xq).dot(beta_o) + K21.row(i).dot((Ki * r).eval());
            CHECK(std::abs(em.predict_mean(xq) - mean_o) < 1e-8);
        }
        MatrixXd cov_o = kernel_matrix(kernel, Xq, Xq) - K21 * Ki * K21.transpose();
        cov_o.diagonal().array() += sigma2;
        const MatrixXd cov = em.predict_cov(Xq);
        CHECK((cov - cov_o).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("trained emulator interpolates the data at the nugget floor") {
    const MatrixXd X = random_inputs(12, 2, 5);
    const VectorXd Y = smooth_outputs(X);
    TrainOptions opt;
    opt.optimize_nugget = false;  // pin sigma2 at the floor
    const TrainedEmulator em = train(X, Y, {BasisKind::Linear}, KernelFamily::Matern32, opt);

    const double scale = em.std_par.y_scale;
    double worst = 0.0;
    for (int i = 0; i < X.rows(); ++i)
        worst = std::max(worst, std::abs(em.predict_mean(X.row(i).transpose()) - Y[i]));
    CHECK(worst <= 1e-6 * scale);
}

TEST_CASE("optimization never ends below its best start") {
    const MatrixXd X = random_inputs(15, 3, 11);
    const VectorXd Y = smooth_outputs(X);
    for (auto f : {KernelFamily::SquaredExponential, KernelFamily::Matern32}) {
        const TrainedEmulator em = train(X, Y, {BasisKind::PureQuadratic}, f);
        CHECK(em.ll_opt >= em.ll_best_start - 1e-9);
        CHECK_FALSE(em.warning_no_improvement);
        CHECK(em.eta_hat.sigma2 >= 1e-8);
    }
}

TEST_CASE("training is affine-equivariant") {
    const MatrixXd X = random_inputs(14, 2, 23);
    const VectorXd Y = smooth_outputs(X);
    const double a = 3.0, b = -5.0, c = 0.25, d = 7.0;
    const MatrixXd X2 = (a * X.array() + b).matrix();
    const VectorXd Y2 = (c * Y.array() + d).matrix();

    TrainOptions opt;
    const TrainedEmulator em1 = train(X, Y, {BasisKind::Linear}, KernelFamily::Matern32, opt);
    const TrainedEmulator em2 = train(X2, Y2, {BasisKind::Linear}, KernelFamily::Matern32, opt);

    RngStream rng(3, "test/gpe-affine");
    for (int rep = 0; rep < 10; ++rep) {
        VectorXd xq(2);
        xq << 4.0 * rng.uniform() - 2.0, 4.0 * rng.uniform() - 2.0;
        const VectorXd xq2 = (a * xq.array() + b).matrix();
        const double want = c * em1.predict_mean(xq) + d;
        // relative: ulp differences in the standardized data shift the
        // optimizer path slightly, so exact absolute agreement is too strict
        CHECK(std::abs(em2.predict_mean(xq2) - want) < 1e-6 * std::max(1.0, std::abs(want)));
    }
}

TEST_CASE("far from the data the posterior reverts to the prior") {
    const MatrixXd X = random_inputs(10, 2, 31);
    const VectorXd Y = smooth_outputs(X);
    const BasisSpec basis{BasisKind::Linear};
    const KernelSpec kernel = moderate_kernel(KernelFamily::SquaredExponential, 2);
    const TrainedEmulator em = make_emulator(X, Y, basis, kernel, 1e-6);

    VectorXd far(2);
    far << 60.0, -55.0;
    // mean falls back to the trend
    CHECK(std::abs(em.predict_mean(far) - basis_row(basis, far).dot(em.eta_hat.beta)) <
          1e-6 * kernel.tau2);
    // variance falls back to tau^2 + sigma^2
    MatrixXd q(1, 2);
    q.row(0) = far.transpose();
    CHECK(std::abs(em.predict_cov(q)(0, 0) - (kernel.tau2 + 1e-6)) < 1e-6);
    CHECK(std::abs(em.predict_cov(q, false)(0, 0) - kernel.tau2) < 1e-6);
}

TEST_CASE("posterior covariance is PSD and capped at the prior variance") {
    const MatrixXd X = random_inputs(8, 2, 37);
    const VectorXd Y = smooth_outputs(X);
    const KernelSpec kernel = moderate_kernel(KernelFamily::Matern32, 2);
    const TrainedEmulator em = make_emulator(X, Y, {BasisKind::Constant}, kernel, 1e-5);

    const MatrixXd Xq = random_inputs(6, 2, 41);
    const MatrixXd cov = em.predict_cov(Xq);
    CHECK((cov - cov.transpose()).cwiseAbs().maxCoeff() < 1e-10);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov);
    CHECK(es.eigenvalues().minCoeff() > -1e-8);
    for (int i = 0; i < cov.rows(); ++i) CHECK(cov(i, i) <= kernel.tau2 + 1e-5 + 1e-8);

    // near-zero variance at a training point when the nugget is excluded
    MatrixXd q(1, 2);
    q.row(0) = X.row(0);
    CHECK(std::abs(em.predict_cov(q, false)(0, 0)) < 1e-4);
}

TEST_CASE("posterior mean is linear in the observations") {
    const MatrixXd X = random_inputs(9, 2, 53);
    const VectorXd Y1 = smooth_outputs(X);
    const VectorXd Y2 = (Y1.array().square() * 0.1).matrix();
    const KernelSpec kernel = moderate_kernel(KernelFamily::Exponential, 2);
    const BasisSpec basis{BasisKind::Linear};
    const TrainedEmulator a = make_emulator(X, Y1, basis, kernel, 1e-5);
    const TrainedEmulator b = make_emulator(X, Y2, basis, kernel, 1e-5);
    const TrainedEmulator ab = make_emulator(X, Y1 + Y2, basis, kernel, 1e-5);
    VectorXd xq(2);
    xq << 0.4, -0.9;
    CHECK(std::abs(ab.predict_mean(xq) - (a.predict_mean(xq) + b.predict_mean(xq))) < 1e-8);
}

TEST_CASE("serialization reloads to bit-identical predictions") {
    const MatrixXd X = random_inputs(15, 3, 61);
    const VectorXd Y = smooth_outputs(X);
    const TrainedEmulator em = train(X, Y, {BasisKind::PureQuadratic}, KernelFamily::Matern32);
    const TrainedEmulator back = TrainedEmulator::from_json(em.to_json());

    RngStream rng(8, "test/gpe-json");
    for (int rep = 0; rep < 20; ++rep) {
        VectorXd xq(3);
        for (int j = 0; j < 3; ++j) xq[j] = 4.0 * rng.uniform() - 2.0;
        CHECK(back.predict_mean(xq) == em.predict_mean(xq));
    }
    CHECK(back.eta_hat.sigma2 == em.eta_hat.sigma2);
    CHECK(back.eta_hat.kernel.tau2 == em.eta_hat.kernel.tau2);
}

TEST_CASE("training rejects underdetermined problems") {
    const MatrixXd X = random_inputs(5, 3, 71);  // PureQuadratic needs 8 points
    const VectorXd Y = smooth_outputs(X);
    CHECK_THROWS_AS(train(X, Y, {BasisKind::PureQuadratic}, KernelFamily::Matern32),
                    ValidationError);

    // rank-deficient trend: every input identical
    MatrixXd Xc = MatrixXd::Zero(6, 2);
    CHECK_THROWS_AS(
        beta_profile(Xc, VectorXd::Ones(6), {BasisKind::Linear},
                     moderate_kernel(KernelFamily::SquaredExponential, 2), 1e-4),
        ValidationError);
}
