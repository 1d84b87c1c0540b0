#pragma once

#include "ntkadv/attacks.hpp"
#include "ntkadv/dataset.hpp"
#include "ntkadv/regression.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <vector>

namespace ntkadv {

/// Rank-one spectral component of the converged predictor,
///   f^(i)(x) = lambda_i^{-1} Theta(x, X)^T v_i v_i^T Y.
/// Summing every component recovers f_inf. Holds a non-owning pointer to its predictor.
struct FeatureFunction {
    int index = 1;  ///< 1-based, in descending eigenvalue order
    double eigenvalue = 0.0;
    Eigen::MatrixXd projection;  ///< v_i v_i^T Y, n x k
    const Predictor* parent = nullptr;
};

/// Throws NumericalError naming the index if lambda_i is below the eigenvalue floor.
[[nodiscard]] FeatureFunction make_feature(const Predictor& p, int index);

[[nodiscard]] Eigen::VectorXd feature_eval(const FeatureFunction& f, const VecRef& x);

/// grad_x f^(i)(x). Multiclass features return the gradient of output `label` (the true class).
[[nodiscard]] Eigen::VectorXd feature_gradient_image(const FeatureFunction& f, const VecRef& x, int label = 0);

/// A single feature as a classifier (sign for one output, argmax otherwise).
class FeatureClassifier final : public Classifier {
public:
    explicit FeatureClassifier(const FeatureFunction& f) : feature_(&f) {}
    [[nodiscard]] Eigen::VectorXd logits(const VecRef& x) const override { return feature_eval(*feature_, x); }
    [[nodiscard]] Eigen::MatrixXd logit_gradient(const VecRef& x) const override;
    [[nodiscard]] Eigen::Index num_outputs() const override { return feature_->projection.cols(); }

private:
    const FeatureFunction* feature_;
};

struct GradientDecomposition {
    /// alpha_i = (sigma(f_inf) - yhat) / (sigma(f^(i)) - yhat), yhat = (y+1)/2.
    Eigen::VectorXd alpha;
    /// 1-based feature indices whose denominator magnitude fell below 1e-12.
    std::vector<int> anomalies;
};

/// Coefficients with grad L(f_inf) = sum_i alpha_i grad L(f^(i)) for the sigmoid cross-entropy.
[[nodiscard]] GradientDecomposition gradient_decomposition_coeffs(const Predictor& p, const VecRef& x, int y);

struct FeatureScore {
    int index = 1;
    double eigenvalue = 0.0;
    double usefulness = 0.0;  ///< clean accuracy of the feature's classifier
    double robustness = 0.0;  ///< accuracy under an attack on the same feature (clean-and-adversarial correct)
    bool useful_flag = false;  ///< usefulness above the majority-class rate
    double epsilon = 0.0;
};

[[nodiscard]] FeatureScore score_feature(const FeatureFunction& f, const Dataset& val, const AttackConfig& cfg);

/// Scores the first `max_features` features (0 = all). attack_steps = 1 scores with FGSM,
/// more steps with PGD at step size 2.5 eps / steps.
[[nodiscard]] std::vector<FeatureScore> score_features(const Predictor& p, const Dataset& val, double epsilon,
                                                       int attack_steps = 1, int max_features = 0);

/// 1-based feature indices sorted by robustness, descending (stable in index on ties).
[[nodiscard]] std::vector<int> robustness_ranking(const std::vector<FeatureScore>& scores);

/// Keeps the first r indices of `ranking` with their original eigenvalues and inverts on that
/// subspace only.
[[nodiscard]] Predictor filtered_predictor(const Predictor& p, const std::vector<int>& ranking, int r);

/// Columns: index, eigenvalue, usefulness, robustness, useful_flag.
void write_feature_scores_csv(const std::vector<FeatureScore>& scores, const std::filesystem::path& path);

}  // namespace ntkadv
