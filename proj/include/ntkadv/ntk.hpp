#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

namespace ntkadv {

enum class KernelFamily { TwoLayerFrozenReLU, FullyConnectedReLU };

/// Architecture selector for an analytical NTK.
///
/// TwoLayerFrozenReLU is the kernel of f(x) = m^{-1/2} A^T relu(W x) with A frozen in {+-1}:
///   Theta(x, x') = (1/2 - arccos(rho) / (2 pi)) <x, x'>,  rho = cos angle(x, x').
/// FullyConnectedReLU with `depth` hidden ReLU layers uses the arc-cosine recursion
///   Sigma^0 = <x,x'>, Sigma^l = N^l kappa1(rho^l), dSigma^l = kappa0(rho^l),
///   Theta^1 = Sigma^0, Theta^{l+1} = Sigma^l + Theta^l dSigma^l,
/// and returns Theta^{depth+1}.
struct KernelModel {
    KernelFamily family = KernelFamily::TwoLayerFrozenReLU;
    int depth = 0;

    static KernelModel two_layer_frozen_relu() { return {KernelFamily::TwoLayerFrozenReLU, 0}; }
    static KernelModel fully_connected_relu(int depth);

    void validate() const;
    [[nodiscard]] std::string name() const;

    friend bool operator==(const KernelModel&, const KernelModel&) = default;
};

using VecRef = Eigen::Ref<const Eigen::VectorXd>;

[[nodiscard]] double kernel_value(const KernelModel& k, const VecRef& x, const VecRef& x2);

/// Gradient of Theta(x, x2) with respect to its first argument.
/// Analytic for TwoLayerFrozenReLU (arccos derivative replaced by 0 once |rho| >= 1 - 1e-9);
/// central differences with h = 1e-5 max(1, |x|) for FullyConnectedReLU.
[[nodiscard]] Eigen::VectorXd kernel_input_gradient(const KernelModel& k, const VecRef& x, const VecRef& x2);

/// Theta(x, X) for every row of X; no jitter.
[[nodiscard]] Eigen::VectorXd kernel_cross(const KernelModel& k, const VecRef& x, const Eigen::MatrixXd& X);

struct GramMatrix {
    Eigen::MatrixXd values;  ///< includes the diagonal jitter
    KernelModel kernel;
    double jitter = 0.0;
};

inline constexpr double kDefaultJitterScale = 1e-8;

/// Theta(X, X) + jitter I with jitter = jitter_scale * trace / n. Upper triangle computed, then mirrored.
[[nodiscard]] GramMatrix gram(const KernelModel& k, const Eigen::MatrixXd& X,
                              double jitter_scale = kDefaultJitterScale);

/// Exact Jacobian Gram of one random finite-width network of the matching architecture
/// (single output). TwoLayerFrozenReLU differentiates W only, as in the frozen-head model.
[[nodiscard]] Eigen::MatrixXd empirical_ntk_oracle(const KernelModel& k, int width, std::uint64_t seed,
                                                   const Eigen::MatrixXd& X);

/// Binary layout: "NTKG", u32 n, f64 jitter, then the row-major lower triangle as little-endian f64.
void save_gram(const GramMatrix& g, const std::filesystem::path& path);
[[nodiscard]] GramMatrix load_gram(const std::filesystem::path& path, const KernelModel& kernel);

/// Kernel interface consumed by the predictor. Analytical NTKs and empirical NTKs
/// of concrete networks both implement it.
class Kernel {
public:
    virtual ~Kernel() = default;
    [[nodiscard]] virtual double value(const VecRef& x, const VecRef& x2) const = 0;
    [[nodiscard]] virtual Eigen::VectorXd input_gradient(const VecRef& x, const VecRef& x2) const = 0;
    [[nodiscard]] virtual std::string name() const = 0;

    /// Theta(x, X) over the rows of X.
    [[nodiscard]] virtual Eigen::VectorXd cross(const VecRef& x, const Eigen::MatrixXd& X) const;
    /// Row j is grad_x Theta(x, x_j); n x d.
    [[nodiscard]] virtual Eigen::MatrixXd cross_gradient(const VecRef& x, const Eigen::MatrixXd& X) const;
};

class AnalyticKernel final : public Kernel {
public:
    explicit AnalyticKernel(KernelModel model) : model_(model) { model_.validate(); }

    [[nodiscard]] double value(const VecRef& x, const VecRef& x2) const override { return kernel_value(model_, x, x2); }
    [[nodiscard]] Eigen::VectorXd input_gradient(const VecRef& x, const VecRef& x2) const override {
        return kernel_input_gradient(model_, x, x2);
    }
    [[nodiscard]] std::string name() const override { return model_.name(); }
    [[nodiscard]] const KernelModel& model() const noexcept { return model_; }

private:
    KernelModel model_;
};

[[nodiscard]] inline std::shared_ptr<const Kernel> make_kernel(const KernelModel& model) {
    return std::make_shared<AnalyticKernel>(model);
}

/// Gram assembly for any Kernel (same jitter rule as `gram`).
[[nodiscard]] Eigen::MatrixXd gram_values(const Kernel& k, const Eigen::MatrixXd& X, double jitter_scale,
                                          double* jitter_out = nullptr);

}  // namespace ntkadv
