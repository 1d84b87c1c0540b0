#pragma once

#include "ntkadv/attacks.hpp"
#include "ntkadv/dataset.hpp"
#include "ntkadv/regression.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace ntkadv {

/// A finite network with a flat vector of trainable parameters w.
///
/// Besides the forward pass, networks expose the products with the weight Jacobian J(x) = df/dw
/// that training, empirical NTKs and linearized models need, so none of them has to materialise
/// J for wide nets.
class Network {
public:
    virtual ~Network() = default;

    [[nodiscard]] virtual Eigen::Index input_dim() const = 0;
    [[nodiscard]] virtual Eigen::Index output_dim() const = 0;
    [[nodiscard]] virtual Eigen::Index num_parameters() const = 0;
    [[nodiscard]] virtual Eigen::VectorXd parameters() const = 0;
    virtual void set_parameters(const Eigen::VectorXd& w) = 0;

    /// Rows of X are inputs; returns n x k outputs.
    [[nodiscard]] virtual Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& X) const = 0;
    [[nodiscard]] Eigen::VectorXd forward(const VecRef& x) const;

    /// grad_x f as d x k.
    [[nodiscard]] virtual Eigen::MatrixXd input_jacobian(const VecRef& x) const = 0;

    /// sum_i J(x_i)^T r_i with residual rows R (n x k).
    [[nodiscard]] virtual Eigen::VectorXd vjp_batch(const Eigen::MatrixXd& X, const Eigen::MatrixXd& R) const = 0;
    /// Rows J(x_i) u, n x k.
    [[nodiscard]] virtual Eigen::MatrixXd jvp_batch(const Eigen::MatrixXd& X, const Eigen::VectorXd& u) const = 0;
    /// grad_x [J(x) u] as d x k (activation patterns held fixed, ReLU'(0) = 0).
    [[nodiscard]] virtual Eigen::MatrixXd tangent_input_jacobian(const VecRef& x, const Eigen::VectorXd& u) const = 0;

    /// Theta(x_i, x_j) = sum_o grad_w f_o(x_i) . grad_w f_o(x_j), exact.
    [[nodiscard]] virtual Eigen::MatrixXd empirical_ntk(const Eigen::MatrixXd& X) const;
    /// P x k.
    [[nodiscard]] virtual Eigen::MatrixXd parameter_jacobian(const VecRef& x) const;

    /// Gradient of 1/2 |f(X) - Y|^2 (summed over examples) in w.
    [[nodiscard]] Eigen::VectorXd loss_gradient(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) const;
    [[nodiscard]] double loss(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) const;

    [[nodiscard]] virtual bool same_architecture(const Network& other) const = 0;
    [[nodiscard]] virtual std::unique_ptr<Network> clone() const = 0;
    [[nodiscard]] virtual std::string kind() const = 0;
};

/// f(x) = m^{-1/2} A^T relu(W x) with W (m x d) trained and A in {+-1}^{m x k} frozen.
class FrozenHeadNet final : public Network {
public:
    FrozenHeadNet(Eigen::MatrixXd W, Eigen::MatrixXd A);

    [[nodiscard]] Eigen::Index input_dim() const override { return W_.cols(); }
    [[nodiscard]] Eigen::Index output_dim() const override { return A_.cols(); }
    [[nodiscard]] Eigen::Index num_parameters() const override { return W_.size(); }
    [[nodiscard]] Eigen::Index width() const noexcept { return W_.rows(); }
    [[nodiscard]] Eigen::VectorXd parameters() const override;
    void set_parameters(const Eigen::VectorXd& w) override;

    [[nodiscard]] Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& X) const override;
    [[nodiscard]] Eigen::MatrixXd input_jacobian(const VecRef& x) const override;
    [[nodiscard]] Eigen::VectorXd vjp_batch(const Eigen::MatrixXd& X, const Eigen::MatrixXd& R) const override;
    [[nodiscard]] Eigen::MatrixXd jvp_batch(const Eigen::MatrixXd& X, const Eigen::VectorXd& u) const override;
    [[nodiscard]] Eigen::MatrixXd tangent_input_jacobian(const VecRef& x, const Eigen::VectorXd& u) const override;
    [[nodiscard]] Eigen::MatrixXd empirical_ntk(const Eigen::MatrixXd& X) const override;

    [[nodiscard]] bool same_architecture(const Network& other) const override;
    [[nodiscard]] std::unique_ptr<Network> clone() const override { return std::make_unique<FrozenHeadNet>(*this); }
    [[nodiscard]] std::string kind() const override { return "frozen_head"; }

    [[nodiscard]] const Eigen::MatrixXd& weights() const noexcept { return W_; }
    [[nodiscard]] const Eigen::MatrixXd& head() const noexcept { return A_; }

private:
    Eigen::MatrixXd W_;
    Eigen::MatrixXd A_;
};

/// W ~ N(0, 0.01^2), A uniform in {+-1}; deterministic per seed.
[[nodiscard]] FrozenHeadNet init_net(int m, int d, int k, std::uint64_t seed);

/// Fully trainable ReLU MLP (weights and biases of every layer), He-normal init, zero biases.
class Mlp final : public Network {
public:
    struct Layer {
        Eigen::MatrixXd W;  // out x in
        Eigen::VectorXd b;
    };

    explicit Mlp(std::vector<Layer> layers);

    [[nodiscard]] Eigen::Index input_dim() const override { return layers_.front().W.cols(); }
    [[nodiscard]] Eigen::Index output_dim() const override { return layers_.back().W.rows(); }
    [[nodiscard]] Eigen::Index num_parameters() const override { return num_params_; }
    [[nodiscard]] Eigen::VectorXd parameters() const override;
    void set_parameters(const Eigen::VectorXd& w) override;

    [[nodiscard]] Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& X) const override;
    [[nodiscard]] Eigen::MatrixXd input_jacobian(const VecRef& x) const override;
    [[nodiscard]] Eigen::VectorXd vjp_batch(const Eigen::MatrixXd& X, const Eigen::MatrixXd& R) const override;
    [[nodiscard]] Eigen::MatrixXd jvp_batch(const Eigen::MatrixXd& X, const Eigen::VectorXd& u) const override;
    [[nodiscard]] Eigen::MatrixXd tangent_input_jacobian(const VecRef& x, const Eigen::VectorXd& u) const override;

    [[nodiscard]] bool same_architecture(const Network& other) const override;
    [[nodiscard]] std::unique_ptr<Network> clone() const override { return std::make_unique<Mlp>(*this); }
    [[nodiscard]] std::string kind() const override { return "mlp"; }

    [[nodiscard]] const std::vector<Layer>& layers() const noexcept { return layers_; }

private:
    struct Forward {
        std::vector<Eigen::MatrixXd> pre;   // per layer, out x n
        std::vector<Eigen::MatrixXd> post;  // post[0] = X^T, post[l] = relu(pre[l-1]) for hidden layers
    };
    [[nodiscard]] Forward run(const Eigen::MatrixXd& Xt) const;
    [[nodiscard]] std::vector<Layer> unflatten(const Eigen::VectorXd& w) const;

    std::vector<Layer> layers_;
    Eigen::Index num_params_ = 0;
};

/// sizes = {d, hidden..., k}.
[[nodiscard]] Mlp make_mlp(const std::vector<int>& sizes, std::uint64_t seed);

/// First-order expansion of a network around its current weights w0:
///   f_lin(x; w) = f(x; w0) + J(x; w0) (w - w0).
/// Its weight Jacobian, and therefore its empirical NTK, never changes.
class LinearizedNetwork final : public Network {
public:
    explicit LinearizedNetwork(const Network& expansion_point);
    LinearizedNetwork(const LinearizedNetwork& other);
    LinearizedNetwork& operator=(const LinearizedNetwork&) = delete;

    [[nodiscard]] Eigen::Index input_dim() const override { return base_->input_dim(); }
    [[nodiscard]] Eigen::Index output_dim() const override { return base_->output_dim(); }
    [[nodiscard]] Eigen::Index num_parameters() const override { return base_->num_parameters(); }
    [[nodiscard]] Eigen::VectorXd parameters() const override { return w_; }
    void set_parameters(const Eigen::VectorXd& w) override;

    [[nodiscard]] Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& X) const override;
    [[nodiscard]] Eigen::MatrixXd input_jacobian(const VecRef& x) const override;
    [[nodiscard]] Eigen::VectorXd vjp_batch(const Eigen::MatrixXd& X, const Eigen::MatrixXd& R) const override {
        return base_->vjp_batch(X, R);
    }
    [[nodiscard]] Eigen::MatrixXd jvp_batch(const Eigen::MatrixXd& X, const Eigen::VectorXd& u) const override {
        return base_->jvp_batch(X, u);
    }
    [[nodiscard]] Eigen::MatrixXd tangent_input_jacobian(const VecRef& x, const Eigen::VectorXd& u) const override {
        return base_->tangent_input_jacobian(x, u);
    }
    [[nodiscard]] Eigen::MatrixXd empirical_ntk(const Eigen::MatrixXd& X) const override { return base_->empirical_ntk(X); }

    [[nodiscard]] bool same_architecture(const Network& other) const override;
    [[nodiscard]] std::unique_ptr<Network> clone() const override { return std::make_unique<LinearizedNetwork>(*this); }
    [[nodiscard]] std::string kind() const override { return "linearized_" + base_->kind(); }

    [[nodiscard]] const Network& expansion_point() const noexcept { return *base_; }

private:
    std::unique_ptr<Network> base_;
    Eigen::VectorXd w0_;
    Eigen::VectorXd w_;
};

/// Raw network outputs as logits.
class NetClassifier final : public Classifier {
public:
    explicit NetClassifier(const Network& net) : net_(&net) {}
    [[nodiscard]] Eigen::VectorXd logits(const VecRef& x) const override { return net_->forward(x); }
    [[nodiscard]] Eigen::MatrixXd logit_gradient(const VecRef& x) const override { return net_->input_jacobian(x); }
    [[nodiscard]] Eigen::Index num_outputs() const override { return net_->output_dim(); }

private:
    const Network* net_;
};

/// Centered outputs f(x; w) - f(x; w_init) as logits.
class CenteredNetClassifier final : public Classifier {
public:
    CenteredNetClassifier(const Network& net, const Network& init);
    [[nodiscard]] Eigen::VectorXd logits(const VecRef& x) const override;
    [[nodiscard]] Eigen::MatrixXd logit_gradient(const VecRef& x) const override;
    [[nodiscard]] Eigen::Index num_outputs() const override { return net_->output_dim(); }

private:
    const Network* net_;
    const Network* init_;
};

/// f(x; W) - f(x; W_init). Throws ParameterError for mismatched architectures.
[[nodiscard]] Eigen::VectorXd centered_prediction(const Network& net, const Network& init, const VecRef& x);

enum class TrainMode { Standard, AdvFGSM, AdvPGD };

[[nodiscard]] TrainMode parse_train_mode(const std::string& name);
[[nodiscard]] std::string to_string(TrainMode mode);

struct TrainConfig {
    double learning_rate = 1e-2;  ///< 0 is allowed (weights stay fixed)
    int epochs = 100;
    TrainMode mode = TrainMode::Standard;
    AttackConfig attack;          ///< used by adversarial modes and robust evaluation
    int batch_size = 0;           ///< 0 = full batch
    std::uint64_t seed = 0;       ///< minibatch order
    std::vector<int> checkpoint_epochs;
    bool eval_robust = false;     ///< robust validation accuracy each epoch (FGSM on the raw net)

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double loss = 0.0;  ///< 1/2 |f(X) - Y|^2 on the clean training set after the epoch
    double train_acc = 0.0;
    std::optional<double> val_acc;
    std::optional<double> robust_val_acc;
};

struct TrainTrace {
    std::vector<EpochRecord> records;
    std::vector<std::pair<int, Eigen::VectorXd>> checkpoints;
};

/// Called with epoch 0 before the first update and after every epoch.
using EpochHook = std::function<void(int epoch, const Network& net)>;

/// Adversarial inputs for a batch, regenerated from the current weights.
[[nodiscard]] Eigen::MatrixXd adversarial_inputs(const Network& net, const Eigen::MatrixXd& X,
                                                 const std::vector<int>& labels, TrainMode mode,
                                                 const AttackConfig& attack);

/// Gradient descent on 1/2 |f(X) - Y|^2, optionally at attacked inputs. Labels follow
/// label_matrix(train). Throws DivergenceError when the loss is non-finite or exceeds
/// 1e6 x the initial loss.
TrainTrace train(Network& net, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
                 const EpochHook& hook = {});

struct LinearizedRun {
    std::unique_ptr<LinearizedNetwork> model;
    TrainTrace trace;
};

/// Freezes the weight Jacobian at the given network and keeps training the linear model;
/// attacks during adversarial modes are computed on the linear model as well.
[[nodiscard]] LinearizedRun linearize_and_continue(const Network& net_at_t0, const Dataset& train_set,
                                                   const Dataset* val_set, const TrainConfig& cfg,
                                                   const EpochHook& hook = {});

/// Cosine between grad_x L(f - f0, y) of the net and grad_x L(f_t, y) of the kernel predictor at
/// t = epoch_to_time * epoch. Undefined (nullopt) when either gradient vanishes.
[[nodiscard]] std::vector<std::optional<double>> gradient_cosine_similarity(const Network& net, const Network& init,
                                                                           const Predictor& pred, const Dataset& ds,
                                                                           double epoch, double epoch_to_time);

/// a.b / (|a||b|); nullopt when either vector is zero.
[[nodiscard]] std::optional<double> cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// Mean over defined entries; nullopt if none.
[[nodiscard]] std::optional<double> mean_defined(const std::vector<std::optional<double>>& values);

/// "NTKW", u32 m, u32 d, u32 k, row-major little-endian f64 W, row-major i8 A.
void save_checkpoint(const FrozenHeadNet& net, const std::filesystem::path& path);
[[nodiscard]] FrozenHeadNet load_checkpoint(const std::filesystem::path& path);

/// Columns: epoch, loss, train_acc, val_acc, robust_val_acc.
void write_trace_csv(const TrainTrace& trace, const std::filesystem::path& path);

/// Empirical NTK of a network snapshot as a Kernel (evaluates the Jacobian Gram of two inputs).
class EmpiricalKernel final : public Kernel {
public:
    explicit EmpiricalKernel(const Network& net) : net_(net.clone()) {}
    [[nodiscard]] double value(const VecRef& x, const VecRef& x2) const override;
    [[nodiscard]] Eigen::VectorXd input_gradient(const VecRef& x, const VecRef& x2) const override;
    [[nodiscard]] std::string name() const override { return "empirical_" + net_->kind(); }
    [[nodiscard]] Eigen::VectorXd cross(const VecRef& x, const Eigen::MatrixXd& X) const override;
    [[nodiscard]] Eigen::MatrixXd cross_gradient(const VecRef& x, const Eigen::MatrixXd& X) const override;
    [[nodiscard]] const Network& network() const noexcept { return *net_; }

private:
    std::unique_ptr<Network> net_;
};

}  // namespace ntkadv
