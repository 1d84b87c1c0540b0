#pragma once

#include "ntkadv/dataset.hpp"
#include "ntkadv/regression.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace ntkadv {

/// A differentiable model seen through its logits. One output means a binary classifier
/// (class 1 iff logit > 0, label y = +-1); k >= 2 outputs are softmax logits.
class Classifier {
public:
    virtual ~Classifier() = default;
    [[nodiscard]] virtual Eigen::VectorXd logits(const VecRef& x) const = 0;
    /// d x k; column r is grad_x of logit r.
    [[nodiscard]] virtual Eigen::MatrixXd logit_gradient(const VecRef& x) const = 0;
    [[nodiscard]] virtual Eigen::Index num_outputs() const = 0;
};

/// Kernel predictor f_t as a classifier.
class KernelClassifier final : public Classifier {
public:
    KernelClassifier(const Predictor& predictor, double t) : predictor_(&predictor), time_(t) {}

    [[nodiscard]] Eigen::VectorXd logits(const VecRef& x) const override { return predictor_->predict(x, time_); }
    [[nodiscard]] Eigen::MatrixXd logit_gradient(const VecRef& x) const override {
        return predictor_->prediction_input_gradient(x, time_);
    }
    [[nodiscard]] Eigen::Index num_outputs() const override { return predictor_->num_outputs(); }
    [[nodiscard]] const Predictor& predictor() const noexcept { return *predictor_; }
    [[nodiscard]] double time() const noexcept { return time_; }

private:
    const Predictor* predictor_;
    double time_;
};

[[nodiscard]] inline int signed_label(int class_index) { return class_index == 1 ? 1 : -1; }

[[nodiscard]] int predicted_class(const Eigen::VectorXd& logits);

/// Sigmoid cross-entropy (one output) or softmax cross-entropy (k outputs), numerically stable.
[[nodiscard]] double classification_loss(const Eigen::VectorXd& logits, int label);

/// Exact gradient of classification_loss in x.
[[nodiscard]] Eigen::VectorXd loss_input_gradient(const Classifier& model, const VecRef& x, int label);

/// A positive multiple of loss_input_gradient. For one output this is -y grad f, which keeps its
/// sign even when sigma(f) saturates in double precision.
[[nodiscard]] Eigen::VectorXd ascent_direction(const Classifier& model, const VecRef& x, int label);

/// Coordinatewise sign with sign(0) = 0.
[[nodiscard]] Eigen::VectorXd sign_of(const Eigen::VectorXd& v);

struct ClampBox {
    double lo = 0.0;
    double hi = 1.0;
};

struct AttackConfig {
    double epsilon = 0.1;
    int steps = 1;
    double step_size = 0.0;  ///< PGD alpha; ignored when steps == 1
    std::optional<ClampBox> clamp_box;

    void validate() const;
    /// alpha > epsilon is allowed but usually a mistake.
    [[nodiscard]] bool step_exceeds_budget() const noexcept { return steps > 1 && step_size > epsilon; }
};

/// delta for one example; |delta|_inf <= budget.
struct Perturbation {
    Eigen::VectorXd delta;
    double budget = 0.0;
};

/// Projects delta onto the epsilon ball and, if given, keeps x + delta in the box.
[[nodiscard]] Eigen::VectorXd project_perturbation(const Eigen::VectorXd& delta, const VecRef& x, double epsilon,
                                                   const std::optional<ClampBox>& box);

[[nodiscard]] Perturbation fgsm(const Classifier& model, const VecRef& x, int label, double epsilon,
                                const std::optional<ClampBox>& box = std::nullopt);

/// Sign-gradient ascent from delta = 0 (no random start), projected after every step.
[[nodiscard]] Perturbation pgd(const Classifier& model, const VecRef& x, int label, const AttackConfig& cfg);

/// x~ = x - y eps sign(grad_x f_t(x)), y in {-1, +1}.
[[nodiscard]] Perturbation fgsm_kernel_binary(const Predictor& p, const VecRef& x, int y, double t, double epsilon);

/// eps sign(-grad f_{t,y} + sum_r softmax_r grad f_{t,r}).
[[nodiscard]] Perturbation fgsm_kernel_multiclass(const Predictor& p, const VecRef& x, int label, double t,
                                                  double epsilon);

[[nodiscard]] Perturbation pgd_kernel(const Predictor& p, const VecRef& x, int label, double t,
                                      const AttackConfig& cfg);

/// First-order Taylor attacks around the converged predictor: z_r = A^T Theta^{-1} Y_{:,r}.
[[nodiscard]] Perturbation taylor_attack_binary(const Predictor& p, const VecRef& x, int y, double epsilon);
[[nodiscard]] Perturbation taylor_attack_max_l1(const Predictor& p, const VecRef& x, int label, double epsilon);
[[nodiscard]] Perturbation taylor_attack_sum_dz(const Predictor& p, const VecRef& x, int label, double epsilon);

enum class AttackMethod { None, Fgsm, Pgd, Taylor, TaylorMaxL1, TaylorSumDz };

[[nodiscard]] AttackMethod parse_attack_method(const std::string& name);
[[nodiscard]] std::string to_string(AttackMethod method);

/// Produces delta for (x, class label).
using AttackFn = std::function<Perturbation(const VecRef& x, int label)>;

/// FGSM/PGD/None against any classifier. The returned function keeps a reference to `source`.
[[nodiscard]] AttackFn make_attack(AttackMethod method, const Classifier& source, const AttackConfig& cfg);

/// Every method against a kernel predictor at time t (Taylor methods always use t = infinity).
[[nodiscard]] AttackFn make_kernel_attack(AttackMethod method, const Predictor& source, double t,
                                          const AttackConfig& cfg);

struct AttackRecord {
    Eigen::Index example_id = 0;
    int label = 0;
    int clean_pred = 0;
    int adv_pred = 0;
    double loss_clean = 0.0;
    double loss_adv = 0.0;
    double linf_norm = 0.0;
};

/// Attacks every example of `ds` with `attack` and evaluates `target` on the result.
[[nodiscard]] std::vector<AttackRecord> attack_dataset(const Classifier& target, const Dataset& ds,
                                                       const AttackFn& attack);

/// Fraction correct both before and after the attack (the unperturbed point is inside the ball).
[[nodiscard]] double robust_accuracy(const std::vector<AttackRecord>& records);
[[nodiscard]] double robust_accuracy(const Classifier& target, const Dataset& ds, const AttackFn& attack);
[[nodiscard]] double clean_accuracy(const Classifier& target, const Dataset& ds);

/// Columns: example_id, clean_pred, adv_pred, loss_clean, loss_adv, linf_norm.
void write_attack_csv(const std::vector<AttackRecord>& records, const std::filesystem::path& path);

}  // namespace ntkadv
