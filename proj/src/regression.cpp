#include "ntkadv/regression.hpp"

#include "ntkadv/errors.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <map>
#include <mutex>
#include <sstream>

namespace ntkadv {

Eigen::MatrixXd EigenSystem::reconstruct() const {
    return eigenvectors * eigenvalues.asDiagonal() * eigenvectors.transpose();
}

EigenSystem eigendecompose(const Eigen::MatrixXd& symmetric) {
    if (symmetric.rows() != symmetric.cols()) throw ParameterError("eigendecompose: matrix is not square");
    if (!symmetric.allFinite()) throw NumericalError("eigendecompose: matrix has non-finite entries");
    const Eigen::Index n = symmetric.rows();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(symmetric);
    if (solver.info() != Eigen::Success) {
        std::ostringstream msg;
        msg << "symmetric eigensolver did not converge (n=" << n << ", frobenius=" << symmetric.norm()
            << ", diag range=[" << symmetric.diagonal().minCoeff() << ", " << symmetric.diagonal().maxCoeff() << "])";
        throw NumericalError(msg.str());
    }
    EigenSystem out;
    out.eigenvalues = solver.eigenvalues().reverse();
    out.eigenvectors = solver.eigenvectors().rowwise().reverse();
    for (Eigen::Index c = 0; c < n; ++c) {
        auto col = out.eigenvectors.col(c);
        Eigen::Index pivot = 0;
        double best = -1.0;
        for (Eigen::Index r = 0; r < n; ++r) {
            if (std::abs(col(r)) > best) {
                best = std::abs(col(r));
                pivot = r;
            }
        }
        if (col(pivot) < 0) col = -col;
    }
    return out;
}

struct Predictor::Cache {
    std::mutex mutex;
    std::map<double, Eigen::MatrixXd> by_time;
};

namespace {
constexpr std::size_t kMaxCachedTimes = 256;
}

Predictor::Predictor(std::shared_ptr<const Kernel> kernel, std::shared_ptr<const Eigen::MatrixXd> inputs,
                     Eigen::MatrixXd labels, std::shared_ptr<const EigenSystem> eigen, double learning_rate,
                     double jitter, std::vector<bool> retained)
    : kernel_(std::move(kernel)),
      inputs_(std::move(inputs)),
      labels_(std::move(labels)),
      eigen_(std::move(eigen)),
      learning_rate_(learning_rate),
      jitter_(jitter),
      retained_(std::move(retained)),
      cache_(std::make_shared<Cache>()) {
    if (!kernel_) throw ParameterError("predictor needs a kernel");
    if (!(learning_rate_ > 0)) throw ParameterError("learning_rate must be positive");
    if (labels_.rows() != inputs_->rows())
        throw ParameterError("label rows " + std::to_string(labels_.rows()) + " != training rows " +
                             std::to_string(inputs_->rows()));
    if (labels_.cols() < 1) throw ParameterError("labels need at least one column");
    if (eigen_->size() != inputs_->rows()) throw ParameterError("eigensystem size does not match training set");
    if (static_cast<Eigen::Index>(retained_.size()) != eigen_->size())
        throw ParameterError("retained mask size does not match eigensystem");
    projected_labels_ = eigen_->eigenvectors.transpose() * labels_;
}

Predictor::Predictor(std::shared_ptr<const Kernel> kernel, Eigen::MatrixXd train_inputs, Eigen::MatrixXd labels,
                     double learning_rate, double jitter_scale)
    : Predictor(build(std::move(kernel), std::move(train_inputs), std::move(labels), learning_rate, jitter_scale)) {}

Predictor Predictor::build(std::shared_ptr<const Kernel> kernel, Eigen::MatrixXd train_inputs, Eigen::MatrixXd labels,
                           double learning_rate, double jitter_scale) {
    if (!kernel) throw ParameterError("predictor needs a kernel");
    double jitter = 0.0;
    const Eigen::MatrixXd g = gram_values(*kernel, train_inputs, jitter_scale, &jitter);
    return from_gram(std::move(kernel), std::move(train_inputs), std::move(labels), g, learning_rate, jitter);
}

Predictor Predictor::from_gram(std::shared_ptr<const Kernel> kernel, Eigen::MatrixXd train_inputs,
                               Eigen::MatrixXd labels, const Eigen::MatrixXd& gram, double learning_rate,
                               double jitter) {
    if (gram.rows() != train_inputs.rows() || gram.cols() != train_inputs.rows())
        throw ParameterError("Gram matrix shape does not match training set");
    auto eig = std::make_shared<const EigenSystem>(eigendecompose(gram));
    std::vector<bool> all(static_cast<std::size_t>(train_inputs.rows()), true);
    return Predictor(std::move(kernel), std::make_shared<const Eigen::MatrixXd>(std::move(train_inputs)),
                     std::move(labels), std::move(eig), learning_rate, jitter, std::move(all));
}

Predictor Predictor::restricted_to(const std::vector<bool>& retained) const {
    return Predictor(kernel_, inputs_, labels_, eigen_, learning_rate_, jitter_, retained);
}

Predictor Predictor::with_labels(Eigen::MatrixXd labels) const {
    return Predictor(kernel_, inputs_, std::move(labels), eigen_, learning_rate_, jitter_, retained_);
}

double Predictor::spectral_weight(Eigen::Index i, double t) const {
    if (!retained_[static_cast<std::size_t>(i)]) return 0.0;
    const double top = eigen_->eigenvalues(0);
    const double lambda = eigen_->eigenvalues(i);
    if (std::isinf(t)) {
        if (!(lambda > kEigenvalueFloor * top))
            throw NumericalError("eigenvalue " + std::to_string(i + 1) + " (" + std::to_string(lambda) +
                                 ") below floor " + std::to_string(kEigenvalueFloor) + " * lambda_1; Gram is singular");
        return 1.0 / lambda;
    }
    if (lambda <= 0) return learning_rate_ * t;  // limit of (1 - exp(-lr lambda t)) / lambda
    return -std::expm1(-learning_rate_ * lambda * t) / lambda;
}

Eigen::MatrixXd Predictor::coefficients(double t) const {
    if (t < 0 || std::isnan(t)) throw ParameterError("time must be nonnegative");
    std::lock_guard lock(cache_->mutex);
    if (auto it = cache_->by_time.find(t); it != cache_->by_time.end()) return it->second;
    if (cache_->by_time.size() >= kMaxCachedTimes) cache_->by_time.clear();
    Eigen::VectorXd weights(eigen_->size());
    for (Eigen::Index i = 0; i < eigen_->size(); ++i) weights(i) = spectral_weight(i, t);
    Eigen::MatrixXd coeffs = eigen_->eigenvectors * (weights.asDiagonal() * projected_labels_);
    return cache_->by_time.emplace(t, std::move(coeffs)).first->second;
}

Eigen::VectorXd Predictor::kernel_row(const VecRef& x) const {
    if (x.size() != inputs_->cols()) throw ParameterError("input dimension mismatch");
    return kernel_->cross(x, *inputs_);
}

Eigen::MatrixXd Predictor::input_jacobian(const VecRef& x) const {
    if (x.size() != inputs_->cols()) throw ParameterError("input dimension mismatch");
    return kernel_->cross_gradient(x, *inputs_);
}

Eigen::VectorXd Predictor::predict(const VecRef& x, double t) const {
    const Eigen::MatrixXd c = coefficients(t);
    return c.transpose() * kernel_row(x);
}

Eigen::VectorXd Predictor::predict_at_time(const VecRef& x, double t) const {
    if (t < 0 || std::isnan(t)) throw ParameterError("predict_at_time: t must be nonnegative");
    return predict(x, t);
}

Eigen::MatrixXd Predictor::prediction_input_gradient(const VecRef& x, double t) const {
    const Eigen::MatrixXd c = coefficients(t);
    return input_jacobian(x).transpose() * c;
}

}  // namespace ntkadv
