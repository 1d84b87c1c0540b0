#pragma once

#include "ntkadv/ntk.hpp"

#include <Eigen/Dense>

#include <limits>
#include <memory>
#include <vector>

namespace ntkadv {

/// Eigenpairs of a symmetric matrix: eigenvalues descending, eigenvectors in columns.
/// Each eigenvector's largest-magnitude entry is positive (ties: lowest index).
struct EigenSystem {
    Eigen::VectorXd eigenvalues;
    Eigen::MatrixXd eigenvectors;

    [[nodiscard]] Eigen::Index size() const noexcept { return eigenvalues.size(); }
    [[nodiscard]] Eigen::MatrixXd reconstruct() const;
};

[[nodiscard]] EigenSystem eigendecompose(const Eigen::MatrixXd& symmetric);
[[nodiscard]] inline EigenSystem eigendecompose(const GramMatrix& g) { return eigendecompose(g.values); }

inline constexpr double kInfiniteTime = std::numeric_limits<double>::infinity();

/// Eigenvalues below this fraction of the largest are treated as singular.
inline constexpr double kEigenvalueFloor = 1e-12;

/// Kernel-regression predictor
///   f_t(x) = Theta(x, X)^T Theta^{-1} (I - exp(-lr Theta t)) Y
/// evaluated through one eigendecomposition of the jittered Gram matrix. A retained-eigenvalue
/// mask restricts the inverse to a subspace (pseudo-inverse), which is how filtered predictors
/// are expressed.
///
/// Immutable after construction; the per-time coefficient cache is internally synchronised so
/// concurrent predictions are safe.
class Predictor {
public:
    Predictor(std::shared_ptr<const Kernel> kernel, Eigen::MatrixXd train_inputs, Eigen::MatrixXd labels,
              double learning_rate = 1.0, double jitter_scale = kDefaultJitterScale);

    /// Uses a precomputed (already jittered) Gram matrix, e.g. an empirical NTK.
    static Predictor from_gram(std::shared_ptr<const Kernel> kernel, Eigen::MatrixXd train_inputs,
                               Eigen::MatrixXd labels, const Eigen::MatrixXd& gram, double learning_rate = 1.0,
                               double jitter = 0.0);

    /// Same kernel and data, inverse restricted to the eigen-indices flagged in `retained`.
    [[nodiscard]] Predictor restricted_to(const std::vector<bool>& retained) const;

    /// Same kernel and eigensystem with different labels (linearity checks, label-noise runs).
    [[nodiscard]] Predictor with_labels(Eigen::MatrixXd labels) const;

    [[nodiscard]] Eigen::VectorXd predict(const VecRef& x, double t) const;
    [[nodiscard]] Eigen::VectorXd predict_infinite_time(const VecRef& x) const { return predict(x, kInfiniteTime); }
    [[nodiscard]] Eigen::VectorXd predict_at_time(const VecRef& x, double t) const;

    /// Theta(x, X).
    [[nodiscard]] Eigen::VectorXd kernel_row(const VecRef& x) const;
    /// D: row j is the gradient of Theta(x, x_j) in x (n x d).
    [[nodiscard]] Eigen::MatrixXd input_jacobian(const VecRef& x) const;
    /// grad_x f_t(x) as a d x k matrix (column r is the gradient of output r).
    [[nodiscard]] Eigen::MatrixXd prediction_input_gradient(const VecRef& x, double t) const;

    /// Theta^{-1}(I - exp(-lr Theta t)) Y, n x k; computed once per t and cached.
    [[nodiscard]] Eigen::MatrixXd coefficients(double t) const;
    /// Spectral weight applied to eigen-direction i at time t.
    [[nodiscard]] double spectral_weight(Eigen::Index i, double t) const;

    [[nodiscard]] const EigenSystem& eigen() const noexcept { return *eigen_; }
    [[nodiscard]] const Eigen::MatrixXd& train_inputs() const noexcept { return *inputs_; }
    [[nodiscard]] const Eigen::MatrixXd& labels() const noexcept { return labels_; }
    [[nodiscard]] const Kernel& kernel() const noexcept { return *kernel_; }
    [[nodiscard]] std::shared_ptr<const Kernel> kernel_ptr() const noexcept { return kernel_; }
    [[nodiscard]] double learning_rate() const noexcept { return learning_rate_; }
    [[nodiscard]] double jitter() const noexcept { return jitter_; }
    [[nodiscard]] const std::vector<bool>& retained() const noexcept { return retained_; }
    [[nodiscard]] Eigen::Index num_outputs() const noexcept { return labels_.cols(); }
    [[nodiscard]] Eigen::Index size() const noexcept { return inputs_->rows(); }

private:
    struct Cache;

    static Predictor build(std::shared_ptr<const Kernel> kernel, Eigen::MatrixXd train_inputs, Eigen::MatrixXd labels,
                           double learning_rate, double jitter_scale);

    Predictor(std::shared_ptr<const Kernel> kernel, std::shared_ptr<const Eigen::MatrixXd> inputs, Eigen::MatrixXd labels,
              std::shared_ptr<const EigenSystem> eigen, double learning_rate, double jitter, std::vector<bool> retained);

    std::shared_ptr<const Kernel> kernel_;
    std::shared_ptr<const Eigen::MatrixXd> inputs_;
    Eigen::MatrixXd labels_;
    std::shared_ptr<const EigenSystem> eigen_;
    Eigen::MatrixXd projected_labels_;  // V^T Y
    double learning_rate_;
    double jitter_;
    std::vector<bool> retained_;
    std::shared_ptr<Cache> cache_;
};

}  // namespace ntkadv
