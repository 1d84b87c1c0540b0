#include "ntkadv/features.hpp"

#include "ntkadv/csv.hpp"
#include "ntkadv/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ntkadv {

namespace {

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// sigma(f) - (y+1)/2 without cancellation
double loss_slope(double f, int y) { return y == 1 ? -sigmoid(-f) : sigmoid(f); }

// Values precomputed at one point; only valid when queried at that point.
class FrozenClassifier final : public Classifier {
public:
    FrozenClassifier(Eigen::VectorXd logits, Eigen::MatrixXd gradient)
        : logits_(std::move(logits)), gradient_(std::move(gradient)) {}
    [[nodiscard]] Eigen::VectorXd logits(const VecRef&) const override { return logits_; }
    [[nodiscard]] Eigen::MatrixXd logit_gradient(const VecRef&) const override { return gradient_; }
    [[nodiscard]] Eigen::Index num_outputs() const override { return logits_.size(); }

private:
    Eigen::VectorXd logits_;
    Eigen::MatrixXd gradient_;
};

}  // namespace

FeatureFunction make_feature(const Predictor& p, int index) {
    if (index < 1 || index > p.size())
        throw ParameterError("feature index " + std::to_string(index) + " outside [1," + std::to_string(p.size()) + "]");
    const auto& eig = p.eigen();
    const Eigen::Index i = index - 1;
    const double lambda = eig.eigenvalues(i);
    if (!(lambda > kEigenvalueFloor * eig.eigenvalues(0)))
        throw NumericalError("feature " + std::to_string(index) + ": eigenvalue " + std::to_string(lambda) +
                             " below floor");
    FeatureFunction f;
    f.index = index;
    f.eigenvalue = lambda;
    const Eigen::VectorXd v = eig.eigenvectors.col(i);
    f.projection = v * (v.transpose() * p.labels());
    f.parent = &p;
    return f;
}

Eigen::VectorXd feature_eval(const FeatureFunction& f, const VecRef& x) {
    return f.projection.transpose() * f.parent->kernel_row(x) / f.eigenvalue;
}

Eigen::MatrixXd FeatureClassifier::logit_gradient(const VecRef& x) const {
    return feature_->parent->input_jacobian(x).transpose() * feature_->projection / feature_->eigenvalue;
}

Eigen::VectorXd feature_gradient_image(const FeatureFunction& f, const VecRef& x, int label) {
    const Eigen::Index column = f.projection.cols() == 1 ? 0 : label;
    if (column < 0 || column >= f.projection.cols()) throw ParameterError("feature image: label out of range");
    return f.parent->input_jacobian(x).transpose() * f.projection.col(column) / f.eigenvalue;
}

GradientDecomposition gradient_decomposition_coeffs(const Predictor& p, const VecRef& x, int y) {
    if (y != 1 && y != -1) throw ParameterError("gradient decomposition expects y in {-1, +1}");
    if (p.num_outputs() != 1) throw ParameterError("gradient decomposition is defined for binary predictors");
    const Eigen::VectorXd row = p.kernel_row(x);
    const double f_inf = (p.coefficients(kInfiniteTime).transpose() * row)(0);
    const double numerator = loss_slope(f_inf, y);
    GradientDecomposition out;
    out.alpha.resize(p.size());
    for (int i = 1; i <= p.size(); ++i) {
        const FeatureFunction f = make_feature(p, i);
        const double fi = (f.projection.transpose() * row)(0) / f.eigenvalue;
        const double denominator = loss_slope(fi, y);
        if (std::abs(denominator) < 1e-12) out.anomalies.push_back(i);
        out.alpha(i - 1) = numerator / denominator;
    }
    return out;
}

FeatureScore score_feature(const FeatureFunction& f, const Dataset& val, const AttackConfig& cfg) {
    if (val.size() == 0) throw ParameterError("score_feature needs a nonempty validation set");
    cfg.validate();
    const FeatureClassifier model(f);
    const Predictor& p = *f.parent;
    Eigen::Index clean_ok = 0;
    Eigen::Index robust_ok = 0;
    for (Eigen::Index i = 0; i < val.size(); ++i) {
        const Eigen::VectorXd x = val.inputs.row(i).transpose();
        const int label = val.labels[static_cast<std::size_t>(i)];
        const Eigen::VectorXd clean = model.logits(x);
        if (predicted_class(clean) != label) continue;
        ++clean_ok;
        Perturbation pert;
        if (cfg.steps == 1) {
            const Eigen::MatrixXd grad = p.input_jacobian(x).transpose() * f.projection / f.eigenvalue;
            pert = fgsm(FrozenClassifier(clean, grad), x, label, cfg.epsilon, cfg.clamp_box);
        } else {
            pert = pgd(model, x, label, cfg);
        }
        if (predicted_class(model.logits(x + pert.delta)) == label) ++robust_ok;
    }
    FeatureScore s;
    s.index = f.index;
    s.eigenvalue = f.eigenvalue;
    s.usefulness = static_cast<double>(clean_ok) / static_cast<double>(val.size());
    s.robustness = static_cast<double>(robust_ok) / static_cast<double>(val.size());
    s.useful_flag = s.usefulness > majority_rate(val);
    s.epsilon = cfg.epsilon;
    return s;
}

std::vector<FeatureScore> score_features(const Predictor& p, const Dataset& val, double epsilon, int attack_steps,
                                         int max_features) {
    if (val.size() == 0) throw ParameterError("score_features needs a nonempty validation set");
    if (attack_steps < 1) throw ParameterError("attack_steps must be >= 1");
    AttackConfig cfg;
    cfg.epsilon = epsilon;
    cfg.steps = attack_steps;
    cfg.step_size = attack_steps > 1 ? 2.5 * epsilon / attack_steps : epsilon;
    const int count = max_features > 0 ? std::min<int>(max_features, static_cast<int>(p.size())) : static_cast<int>(p.size());

    std::vector<FeatureFunction> features;
    features.reserve(static_cast<std::size_t>(count));
    for (int i = 1; i <= count; ++i) features.push_back(make_feature(p, i));

    if (attack_steps > 1) {
        std::vector<FeatureScore> scores;
        for (const auto& f : features) scores.push_back(score_feature(f, val, cfg));
        return scores;
    }

    // One-step scoring: share Theta(x, X) and its Jacobian across features for each example.
    std::vector<Eigen::Index> clean_ok(features.size(), 0);
    std::vector<Eigen::Index> robust_ok(features.size(), 0);
    for (Eigen::Index e = 0; e < val.size(); ++e) {
        const Eigen::VectorXd x = val.inputs.row(e).transpose();
        const int label = val.labels[static_cast<std::size_t>(e)];
        const Eigen::VectorXd row = p.kernel_row(x);
        const Eigen::MatrixXd jac_t = p.input_jacobian(x).transpose();
        for (std::size_t fi = 0; fi < features.size(); ++fi) {
            const FeatureFunction& f = features[fi];
            const Eigen::VectorXd clean = f.projection.transpose() * row / f.eigenvalue;
            if (predicted_class(clean) != label) continue;
            ++clean_ok[fi];
            const Eigen::MatrixXd grad = jac_t * f.projection / f.eigenvalue;
            const Perturbation pert = fgsm(FrozenClassifier(clean, grad), x, label, epsilon);
            if (predicted_class(feature_eval(f, x + pert.delta)) == label) ++robust_ok[fi];
        }
    }
    const double majority = majority_rate(val);
    std::vector<FeatureScore> scores;
    for (std::size_t fi = 0; fi < features.size(); ++fi) {
        FeatureScore s;
        s.index = features[fi].index;
        s.eigenvalue = features[fi].eigenvalue;
        s.usefulness = static_cast<double>(clean_ok[fi]) / static_cast<double>(val.size());
        s.robustness = static_cast<double>(robust_ok[fi]) / static_cast<double>(val.size());
        s.useful_flag = s.usefulness > majority;
        s.epsilon = epsilon;
        scores.push_back(s);
    }
    return scores;
}

std::vector<int> robustness_ranking(const std::vector<FeatureScore>& scores) {
    std::vector<FeatureScore> sorted = scores;
    std::stable_sort(sorted.begin(), sorted.end(), [](const FeatureScore& a, const FeatureScore& b) {
        if (a.robustness != b.robustness) return a.robustness > b.robustness;
        return a.index < b.index;
    });
    std::vector<int> ranking;
    ranking.reserve(sorted.size());
    for (const auto& s : sorted) ranking.push_back(s.index);
    return ranking;
}

Predictor filtered_predictor(const Predictor& p, const std::vector<int>& ranking, int r) {
    if (r < 1 || r > p.size() || r > static_cast<int>(ranking.size()))
        throw ParameterError("filtered_predictor: r=" + std::to_string(r) + " outside [1," +
                             std::to_string(std::min<Eigen::Index>(p.size(), static_cast<Eigen::Index>(ranking.size()))) + "]");
    std::vector<bool> retained(static_cast<std::size_t>(p.size()), false);
    for (int j = 0; j < r; ++j) {
        const int idx = ranking[static_cast<std::size_t>(j)];
        if (idx < 1 || idx > p.size()) throw ParameterError("ranking contains invalid feature index " + std::to_string(idx));
        retained[static_cast<std::size_t>(idx - 1)] = true;
    }
    return p.restricted_to(retained);
}

void write_feature_scores_csv(const std::vector<FeatureScore>& scores, const std::filesystem::path& path) {
    CsvWriter csv(path, {"index", "eigenvalue", "usefulness", "robustness", "useful_flag"});
    for (const auto& s : scores) {
        csv.field(s.index).field(s.eigenvalue).field(s.usefulness).field(s.robustness).field(s.useful_flag);
        csv.end_row();
    }
}

}  // namespace ntkadv
