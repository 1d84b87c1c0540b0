#include "ntkadv/attacks.hpp"

#include "ntkadv/csv.hpp"
#include "ntkadv/errors.hpp"

#include <algorithm>
#include <cmath>

namespace ntkadv {

namespace {

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
    const Eigen::ArrayXd shifted = (logits.array() - logits.maxCoeff()).exp();
    return (shifted / shifted.sum()).matrix();
}

void check_label(Eigen::Index outputs, int label) {
    const Eigen::Index classes = outputs == 1 ? 2 : outputs;
    if (label < 0 || label >= classes)
        throw ParameterError("label " + std::to_string(label) + " outside [0," + std::to_string(classes) + ")");
}

void check_signed(int y) {
    if (y != 1 && y != -1) throw ParameterError("binary attack expects y in {-1, +1}");
}

Perturbation finish(Eigen::VectorXd delta, const VecRef& x, double epsilon, const std::optional<ClampBox>& box) {
    return Perturbation{project_perturbation(delta, x, epsilon, box), epsilon};
}

}  // namespace

int predicted_class(const Eigen::VectorXd& logits) {
    if (logits.size() == 1) return logits(0) > 0 ? 1 : 0;
    Eigen::Index best = 0;
    logits.maxCoeff(&best);  // first maximum on ties
    return static_cast<int>(best);
}

double classification_loss(const Eigen::VectorXd& logits, int label) {
    check_label(logits.size(), label);
    if (logits.size() == 1) return softplus(-signed_label(label) * logits(0));
    const double top = logits.maxCoeff();
    const double lse = top + std::log((logits.array() - top).exp().sum());
    return lse - logits(label);
}

Eigen::VectorXd loss_input_gradient(const Classifier& model, const VecRef& x, int label) {
    check_label(model.num_outputs(), label);
    const Eigen::VectorXd f = model.logits(x);
    const Eigen::MatrixXd g = model.logit_gradient(x);
    if (f.size() == 1) {
        const int y = signed_label(label);
        // sigma(f) - (y+1)/2 = -y sigma(-y f)
        return (-y * sigmoid(-y * f(0))) * g.col(0);
    }
    Eigen::VectorXd residual = softmax(f);
    residual(label) -= 1.0;
    return g * residual;
}

Eigen::VectorXd ascent_direction(const Classifier& model, const VecRef& x, int label) {
    check_label(model.num_outputs(), label);
    if (model.num_outputs() == 1) return -signed_label(label) * model.logit_gradient(x).col(0);
    return loss_input_gradient(model, x, label);
}

Eigen::VectorXd sign_of(const Eigen::VectorXd& v) {
    return v.unaryExpr([](double a) { return a > 0 ? 1.0 : (a < 0 ? -1.0 : 0.0); });
}

void AttackConfig::validate() const {
    if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw ParameterError("attack epsilon must be a finite nonnegative number");
    if (steps < 1) throw ParameterError("attack steps must be >= 1");
    if (steps > 1 && !(step_size > 0)) throw ParameterError("PGD step_size must be positive");
    if (clamp_box && !(clamp_box->lo < clamp_box->hi)) throw ParameterError("clamp box needs lo < hi");
}

Eigen::VectorXd project_perturbation(const Eigen::VectorXd& delta, const VecRef& x, double epsilon,
                                     const std::optional<ClampBox>& box) {
    Eigen::VectorXd out = delta.cwiseMax(-epsilon).cwiseMin(epsilon);
    if (box) {
        const Eigen::VectorXd moved = (x + out).cwiseMax(box->lo).cwiseMin(box->hi);
        for (Eigen::Index i = 0; i < out.size(); ++i)
            if (moved(i) != x(i) + out(i)) out(i) = std::clamp(moved(i) - x(i), -epsilon, epsilon);
    }
    return out;
}

Perturbation fgsm(const Classifier& model, const VecRef& x, int label, double epsilon,
                  const std::optional<ClampBox>& box) {
    return finish(epsilon * sign_of(ascent_direction(model, x, label)), x, epsilon, box);
}

Perturbation pgd(const Classifier& model, const VecRef& x, int label, const AttackConfig& cfg) {
    cfg.validate();
    const double alpha = cfg.steps == 1 ? cfg.epsilon : cfg.step_size;
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(x.size());
    for (int s = 0; s < cfg.steps; ++s) {
        const Eigen::VectorXd point = x + delta;
        delta += alpha * sign_of(ascent_direction(model, point, label));
        delta = project_perturbation(delta, x, cfg.epsilon, cfg.clamp_box);
    }
    return Perturbation{delta, cfg.epsilon};
}

Perturbation fgsm_kernel_binary(const Predictor& p, const VecRef& x, int y, double t, double epsilon) {
    check_signed(y);
    if (p.num_outputs() != 1) throw ParameterError("fgsm_kernel_binary needs a scalar predictor");
    const Eigen::VectorXd grad = p.prediction_input_gradient(x, t).col(0);
    return finish(-(y * epsilon) * sign_of(grad), x, epsilon, std::nullopt);
}

Perturbation fgsm_kernel_multiclass(const Predictor& p, const VecRef& x, int label, double t, double epsilon) {
    if (p.num_outputs() < 2) throw ParameterError("fgsm_kernel_multiclass needs k >= 2 outputs");
    return fgsm(KernelClassifier(p, t), x, label, epsilon);
}

Perturbation pgd_kernel(const Predictor& p, const VecRef& x, int label, double t, const AttackConfig& cfg) {
    return pgd(KernelClassifier(p, t), x, label, cfg);
}

Perturbation taylor_attack_binary(const Predictor& p, const VecRef& x, int y, double epsilon) {
    check_signed(y);
    if (p.num_outputs() != 1) throw ParameterError("taylor_attack_binary needs a scalar predictor");
    const Eigen::VectorXd z = p.prediction_input_gradient(x, kInfiniteTime).col(0);
    return finish(-(epsilon * y) * sign_of(z), x, epsilon, std::nullopt);
}

Perturbation taylor_attack_max_l1(const Predictor& p, const VecRef& x, int label, double epsilon) {
    const Eigen::Index k = p.num_outputs();
    if (k < 2) throw ParameterError("taylor_attack_max_l1 needs k >= 2 outputs");
    check_label(k, label);
    const Eigen::MatrixXd z = p.prediction_input_gradient(x, kInfiniteTime);
    Eigen::Index best = -1;
    double best_norm = -1.0;
    for (Eigen::Index r = 0; r < k; ++r) {
        if (r == label) continue;
        const double norm = (z.col(r) - z.col(label)).lpNorm<1>();
        if (norm > best_norm) {
            best_norm = norm;
            best = r;
        }
    }
    return finish(epsilon * sign_of(z.col(best) - z.col(label)), x, epsilon, std::nullopt);
}

Perturbation taylor_attack_sum_dz(const Predictor& p, const VecRef& x, int label, double epsilon) {
    const Eigen::Index k = p.num_outputs();
    if (k < 2) throw ParameterError("taylor_attack_sum_dz needs k >= 2 outputs");
    check_label(k, label);
    const Eigen::MatrixXd z = p.prediction_input_gradient(x, kInfiniteTime);
    Eigen::VectorXd total = Eigen::VectorXd::Zero(z.rows());
    for (Eigen::Index r = 0; r < k; ++r)
        if (r != label) total += z.col(r) - z.col(label);
    return finish(epsilon * sign_of(total), x, epsilon, std::nullopt);
}

AttackMethod parse_attack_method(const std::string& name) {
    if (name == "none") return AttackMethod::None;
    if (name == "fgsm") return AttackMethod::Fgsm;
    if (name == "pgd") return AttackMethod::Pgd;
    if (name == "taylor") return AttackMethod::Taylor;
    if (name == "max_l1") return AttackMethod::TaylorMaxL1;
    if (name == "sum_dz") return AttackMethod::TaylorSumDz;
    throw ParameterError("unknown attack method '" + name + "' (expected none|fgsm|pgd|taylor|max_l1|sum_dz)");
}

std::string to_string(AttackMethod method) {
    switch (method) {
        case AttackMethod::None: return "none";
        case AttackMethod::Fgsm: return "fgsm";
        case AttackMethod::Pgd: return "pgd";
        case AttackMethod::Taylor: return "taylor";
        case AttackMethod::TaylorMaxL1: return "max_l1";
        case AttackMethod::TaylorSumDz: return "sum_dz";
    }
    return "unknown";
}

AttackFn make_attack(AttackMethod method, const Classifier& source, const AttackConfig& cfg) {
    cfg.validate();
    switch (method) {
        case AttackMethod::None:
            return [](const VecRef& x, int) { return Perturbation{Eigen::VectorXd::Zero(x.size()), 0.0}; };
        case AttackMethod::Fgsm:
            return [&source, cfg](const VecRef& x, int label) {
                return fgsm(source, x, label, cfg.epsilon, cfg.clamp_box);
            };
        case AttackMethod::Pgd:
            return [&source, cfg](const VecRef& x, int label) { return pgd(source, x, label, cfg); };
        default:
            throw ParameterError("attack '" + to_string(method) + "' needs a kernel predictor as its source");
    }
}

AttackFn make_kernel_attack(AttackMethod method, const Predictor& source, double t, const AttackConfig& cfg) {
    cfg.validate();
    const Predictor* p = &source;
    auto clamp = [cfg](Perturbation pert, const VecRef& x) {
        pert.delta = project_perturbation(pert.delta, x, cfg.epsilon, cfg.clamp_box);
        return pert;
    };
    switch (method) {
        case AttackMethod::None:
            return [](const VecRef& x, int) { return Perturbation{Eigen::VectorXd::Zero(x.size()), 0.0}; };
        case AttackMethod::Fgsm:
            return [p, t, cfg, clamp](const VecRef& x, int label) {
                auto pert = p->num_outputs() == 1 ? fgsm_kernel_binary(*p, x, signed_label(label), t, cfg.epsilon)
                                                  : fgsm_kernel_multiclass(*p, x, label, t, cfg.epsilon);
                return clamp(std::move(pert), x);
            };
        case AttackMethod::Pgd:
            return [p, t, cfg](const VecRef& x, int label) { return pgd_kernel(*p, x, label, t, cfg); };
        case AttackMethod::Taylor:
            if (source.num_outputs() != 1)
                throw ParameterError("attack 'taylor' is the binary rule; use max_l1 or sum_dz for k >= 2");
            return [p, cfg, clamp](const VecRef& x, int label) {
                return clamp(taylor_attack_binary(*p, x, signed_label(label), cfg.epsilon), x);
            };
        case AttackMethod::TaylorMaxL1:
            return [p, cfg, clamp](const VecRef& x, int label) {
                return clamp(taylor_attack_max_l1(*p, x, label, cfg.epsilon), x);
            };
        case AttackMethod::TaylorSumDz:
            return [p, cfg, clamp](const VecRef& x, int label) {
                return clamp(taylor_attack_sum_dz(*p, x, label, cfg.epsilon), x);
            };
    }
    throw ParameterError("unknown attack method");
}

std::vector<AttackRecord> attack_dataset(const Classifier& target, const Dataset& ds, const AttackFn& attack) {
    std::vector<AttackRecord> records;
    records.reserve(static_cast<std::size_t>(ds.size()));
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
        const Eigen::VectorXd x = ds.inputs.row(i).transpose();
        const int label = ds.labels[static_cast<std::size_t>(i)];
        const Eigen::VectorXd clean = target.logits(x);
        const Perturbation pert = attack(x, label);
        const Eigen::VectorXd adv = target.logits(x + pert.delta);
        AttackRecord rec;
        rec.example_id = i;
        rec.label = label;
        rec.clean_pred = predicted_class(clean);
        rec.adv_pred = predicted_class(adv);
        rec.loss_clean = classification_loss(clean, label);
        rec.loss_adv = classification_loss(adv, label);
        rec.linf_norm = pert.delta.size() ? pert.delta.lpNorm<Eigen::Infinity>() : 0.0;
        records.push_back(rec);
    }
    return records;
}

double robust_accuracy(const std::vector<AttackRecord>& records) {
    if (records.empty()) throw ParameterError("robust_accuracy needs a nonempty evaluation set");
    const auto correct = std::count_if(records.begin(), records.end(), [](const AttackRecord& r) {
        return r.clean_pred == r.label && r.adv_pred == r.label;
    });
    return static_cast<double>(correct) / static_cast<double>(records.size());
}

double robust_accuracy(const Classifier& target, const Dataset& ds, const AttackFn& attack) {
    return robust_accuracy(attack_dataset(target, ds, attack));
}

double clean_accuracy(const Classifier& target, const Dataset& ds) {
    if (ds.size() == 0) throw ParameterError("clean_accuracy needs a nonempty evaluation set");
    Eigen::Index correct = 0;
    for (Eigen::Index i = 0; i < ds.size(); ++i)
        if (predicted_class(target.logits(ds.inputs.row(i).transpose())) == ds.labels[static_cast<std::size_t>(i)]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

void write_attack_csv(const std::vector<AttackRecord>& records, const std::filesystem::path& path) {
    CsvWriter csv(path, {"example_id", "clean_pred", "adv_pred", "loss_clean", "loss_adv", "linf_norm"});
    for (const auto& r : records) {
        csv.field(static_cast<long long>(r.example_id)).field(r.clean_pred).field(r.adv_pred);
        csv.field(r.loss_clean).field(r.loss_adv).field(r.linf_norm);
        csv.end_row();
    }
}

}  // namespace ntkadv
