#include "helpers.hpp"

#include "ntkadv/dataset.hpp"
#include "ntkadv/errors.hpp"
#include "ntkadv/regression.hpp"

#include <doctest.h>

#include <thread>

using namespace ntkadv;

namespace {

const KernelModel kTwo = KernelModel::two_layer_frozen_relu();

struct Problem {
    Eigen::MatrixXd X;
    Eigen::MatrixXd Y;
};

Problem problem(Eigen::Index n, Eigen::Index d, Eigen::Index k, std::uint64_t seed) {
    return {testing::unit_rows(n, d, seed), testing::gaussian(n, k, seed + 1)};
}

// Direct route: Cholesky solve of the jittered Gram, no eigendecomposition.
Eigen::VectorXd direct_f_inf(const Problem& p, const Eigen::VectorXd& x) {
    const Eigen::MatrixXd G = gram(kTwo, p.X).values;
    const Eigen::MatrixXd alpha = G.llt().solve(p.Y);
    return alpha.transpose() * kernel_cross(kTwo, x, p.X);
}

}  // namespace

TEST_CASE("eigendecompose: trivial systems") {
    const EigenSystem id = eigendecompose(Eigen::MatrixXd::Identity(3, 3));
    CHECK(id.eigenvalues == Eigen::Vector3d(1, 1, 1));
    CHECK((id.eigenvectors.transpose() * id.eigenvectors - Eigen::MatrixXd::Identity(3, 3)).norm() <= 1e-12);

    const EigenSystem dg = eigendecompose(Eigen::Vector3d(3, 1, 2).asDiagonal().toDenseMatrix());
    CHECK(dg.eigenvalues == Eigen::Vector3d(3, 2, 1));
    Eigen::Matrix3d perm;
    perm << 1, 0, 0, 0, 0, 1, 0, 1, 0;
    CHECK((dg.eigenvectors - perm).norm() <= 1e-12);
}

TEST_CASE("eigendecompose: invariants on a random PSD matrix") {
    const Eigen::MatrixXd G = testing::random_psd(50, 60, 3);
    const EigenSystem es = eigendecompose(G);
    for (Eigen::Index i = 1; i < 50; ++i) CHECK(es.eigenvalues(i - 1) >= es.eigenvalues(i));
    CHECK((es.eigenvectors.transpose() * es.eigenvectors - Eigen::MatrixXd::Identity(50, 50)).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK((es.reconstruct() - G).norm() <= 1e-8 * G.norm());
    for (Eigen::Index c = 0; c < 50; ++c) {
        Eigen::Index arg = 0;
        es.eigenvectors.col(c).cwiseAbs().maxCoeff(&arg);
        CHECK(es.eigenvectors(arg, c) > 0);
    }
    const EigenSystem again = eigendecompose(G);
    CHECK(again.eigenvectors == es.eigenvectors);
    CHECK_THROWS((void)eigendecompose(Eigen::MatrixXd::Constant(2, 2, std::numeric_limits<double>::quiet_NaN())));
}

TEST_CASE("f_inf interpolates the training labels") {
    const Problem p = problem(30, 6, 2, 10);
    const Predictor pred(make_kernel(kTwo), p.X, p.Y);
    for (Eigen::Index j = 0; j < 30; ++j) {
        const Eigen::VectorXd f = pred.predict_infinite_time(p.X.row(j).transpose());
        CHECK((f - p.Y.row(j).transpose()).norm() <= 1e-5 * p.Y.row(j).norm());
    }
}

TEST_CASE("zero labels and zero time give zero") {
    const Problem p = problem(10, 4, 1, 11);
    const Predictor pred(make_kernel(kTwo), p.X, Eigen::MatrixXd::Zero(10, 1));
    const Eigen::VectorXd x = testing::gaussian_vec(4, 12);
    CHECK(pred.predict_infinite_time(x).norm() == 0.0);
    CHECK(pred.prediction_input_gradient(x, kInfiniteTime).norm() == 0.0);
    const Predictor full(make_kernel(kTwo), p.X, p.Y);
    CHECK(full.predict(x, 0.0).norm() == 0.0);
    CHECK_THROWS_AS((void)full.predict(x, -1.0), ParameterError);
}

TEST_CASE("long times reach f_inf; approach is monotone on the training set") {
    const Problem p = problem(20, 5, 1, 13);
    const Predictor pred(make_kernel(kTwo), p.X, p.Y, 0.5);
    const double lam_min = pred.eigen().eigenvalues.minCoeff();
    const double t_big = 50.0 / (0.5 * lam_min);
    for (std::uint64_t s = 0; s < 10; ++s) {
        const Eigen::VectorXd x = testing::gaussian_vec(5, 100 + s);
        const Eigen::VectorXd finf = pred.predict_infinite_time(x);
        CHECK((pred.predict(x, t_big) - finf).norm() <= 1e-10 * finf.norm());
    }
    // Over the whole training set f_t(X) - f_inf(X) = -V exp(-lr L t) V^T Y up to jitter, whose norm
    // shrinks monotonically. A single point (training or not) mixes exponentials of both signs.
    auto train_gap = [&](double t) {
        double sq = 0;
        for (Eigen::Index j = 0; j < p.X.rows(); ++j) {
            const Eigen::VectorXd x = p.X.row(j).transpose();
            sq += (pred.predict(x, t) - pred.predict_infinite_time(x)).squaredNorm();
        }
        return std::sqrt(sq);
    };
    double prev = std::numeric_limits<double>::infinity();
    for (double t : {0.0, 0.1, 1.0, 3.0, 10.0, 100.0, 1e3, 1e5, 1e8}) {
        const double gap = train_gap(t);
        CHECK(gap <= prev * (1 + 1e-9) + 1e-12);
        prev = gap;
    }
}

TEST_CASE("spectral and direct solves agree") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Problem p = problem(40, 7, 3, 20 + 3 * s);
        const Predictor pred(make_kernel(kTwo), p.X, p.Y);
        const Eigen::VectorXd x = testing::gaussian_vec(7, 30 + s);
        const Eigen::VectorXd direct = direct_f_inf(p, x);
        CHECK((pred.predict_infinite_time(x) - direct).norm() <= 1e-8 * direct.norm());
    }
}

TEST_CASE("finite time matches the matrix exponential") {
    const Problem p = problem(15, 4, 1, 40);
    const double lr = 0.3, t = 2.0;
    const Predictor pred(make_kernel(kTwo), p.X, p.Y, lr);
    const Eigen::MatrixXd G = gram(kTwo, p.X).values;
    // I - exp(-lr G t) from a truncated Taylor series (|lr G t| is small here)
    const Eigen::MatrixXd A = -lr * t * G;
    Eigen::MatrixXd term = Eigen::MatrixXd::Identity(15, 15), expA = term;
    for (int k = 1; k < 80; ++k) {
        term = term * A / k;
        expA += term;
    }
    const Eigen::MatrixXd coef = G.llt().solve((Eigen::MatrixXd::Identity(15, 15) - expA) * p.Y);
    const Eigen::VectorXd x = testing::gaussian_vec(4, 41);
    const Eigen::VectorXd expected = coef.transpose() * kernel_cross(kTwo, x, p.X);
    CHECK((pred.predict(x, t) - expected).norm() <= 1e-8 * expected.norm());
    CHECK((pred.coefficients(t) - coef).norm() <= 1e-8 * coef.norm());
}

TEST_CASE("linear in the labels") {
    const Problem p = problem(20, 5, 2, 50);
    const Eigen::MatrixXd Y2 = testing::gaussian(20, 2, 51);
    const Predictor p1(make_kernel(kTwo), p.X, p.Y, 0.7);
    const Predictor p2 = p1.with_labels(Y2);
    const Predictor p12 = p1.with_labels(2.0 * p.Y - 3.0 * Y2);
    const Eigen::VectorXd x = testing::gaussian_vec(5, 52);
    for (double t : {0.5, 5.0, kInfiniteTime}) {
        const Eigen::VectorXd lhs = p12.predict(x, t);
        const Eigen::VectorXd rhs = 2.0 * p1.predict(x, t) - 3.0 * p2.predict(x, t);
        CHECK((lhs - rhs).norm() <= 1e-10 * std::max(1.0, rhs.norm()));
    }
    const Predictor neg = p1.with_labels(-p.Y);
    CHECK(neg.prediction_input_gradient(x, 3.0) == -p1.prediction_input_gradient(x, 3.0));
}

TEST_CASE("multiclass columns match separate single-output predictors") {
    const Problem p = problem(25, 5, 3, 60);
    const Predictor multi(make_kernel(kTwo), p.X, p.Y);
    const Eigen::VectorXd x = testing::gaussian_vec(5, 61);
    for (Eigen::Index c = 0; c < 3; ++c) {
        const Predictor one(make_kernel(kTwo), p.X, p.Y.col(c));
        CHECK(multi.predict(x, 4.0)(c) == doctest::Approx(one.predict(x, 4.0)(0)).epsilon(1e-12));
    }
}

TEST_CASE("prediction gradient agrees with finite differences") {
    const Problem p = problem(30, 6, 2, 70);
    const Predictor pred(make_kernel(kTwo), p.X, p.Y, 0.4);
    for (double t : {1.0, kInfiniteTime}) {
        for (std::uint64_t s = 0; s < 10; ++s) {
            const Eigen::VectorXd x = testing::gaussian_vec(6, 80 + s);
            const Eigen::MatrixXd g = pred.prediction_input_gradient(x, t);
            REQUIRE(g.rows() == 6);
            REQUIRE(g.cols() == 2);
            for (Eigen::Index c = 0; c < 2; ++c) {
                const Eigen::VectorXd fd = testing::fd_gradient([&](const Eigen::VectorXd& z) { return pred.predict(z, t)(c); }, x, 1e-5);
                CHECK(testing::rel_err(g.col(c), fd) <= 1e-4);
            }
        }
    }
}

TEST_CASE("continuity across jitter scales") {
    const Problem p = problem(20, 5, 1, 90);
    const Predictor a(make_kernel(kTwo), p.X, p.Y, 1.0, 1e-8);
    const Predictor b(make_kernel(kTwo), p.X, p.Y, 1.0, 1e-10);
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Eigen::VectorXd x = testing::gaussian_vec(5, 91 + s);
        for (double t : {1.0, 100.0, kInfiniteTime}) {
            const Eigen::VectorXd fa = a.predict(x, t), fb = b.predict(x, t);
            CHECK((fa - fb).norm() <= 1e-4 * fb.norm());
        }
    }
}

TEST_CASE("small eigenvalues use the lr*t limit") {
    // Gram with one zero mode resolved only by a tiny jitter: weight stays lr*t, not 0/0.
    Eigen::MatrixXd X(3, 2);
    X << 1, 0, 0, 1, 1, 0;  // duplicate row
    const Predictor pred(make_kernel(kTwo), X, Eigen::Vector3d(1, -1, 1), 0.5, 1e-14);
    const Eigen::Index last = pred.size() - 1;
    CHECK(std::isfinite(pred.spectral_weight(last, 3.0)));
    CHECK(pred.spectral_weight(last, 3.0) == doctest::Approx(1.5).epsilon(1e-6));
}

TEST_CASE("singular Gram without jitter is a numerical error") {
    Eigen::MatrixXd X(3, 2);
    X << 1, 0, 0, 1, 1, 0;
    const Predictor pred(make_kernel(kTwo), X, Eigen::Vector3d(1, -1, 1), 1.0, 0.0);
    CHECK_THROWS_AS((void)pred.predict_infinite_time(Eigen::Vector2d(1, 1)), NumericalError);
    CHECK(std::isfinite(pred.predict(Eigen::Vector2d(1, 1), 2.0)(0)));
}

TEST_CASE("parameter validation") {
    const Problem p = problem(5, 3, 1, 95);
    CHECK_THROWS_AS((void)Predictor(make_kernel(kTwo), p.X, p.Y, 0.0), ParameterError);
    CHECK_THROWS_AS((void)Predictor(make_kernel(kTwo), p.X, Eigen::MatrixXd::Zero(4, 1)), ParameterError);
    const Predictor pred(make_kernel(kTwo), p.X, p.Y);
    CHECK_THROWS_AS((void)pred.predict(Eigen::VectorXd::Ones(4), 1.0), ParameterError);
}

TEST_CASE("concurrent predictions share one cache") {
    const Problem p = problem(40, 6, 1, 97);
    const Predictor pred(make_kernel(kTwo), p.X, p.Y, 0.2);
    const Eigen::MatrixXd Q = testing::gaussian(64, 6, 98);
    Eigen::VectorXd serial(64), parallel(64);
    for (Eigen::Index i = 0; i < 64; ++i) serial(i) = Predictor(pred).predict(Q.row(i).transpose(), 7.0)(0);
    std::vector<std::thread> pool;
    for (int w = 0; w < 4; ++w)
        pool.emplace_back([&, w] {
            for (Eigen::Index i = w; i < 64; i += 4) parallel(i) = pred.predict(Q.row(i).transpose(), 7.0)(0);
        });
    for (auto& th : pool) th.join();
    CHECK(serial == parallel);
}
