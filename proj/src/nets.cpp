#include "ntkadv/nets.hpp"

#include "ntkadv/csv.hpp"
#include "ntkadv/errors.hpp"
#include "ntkadv/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace ntkadv {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

Eigen::MatrixXd relu_mask(const Eigen::MatrixXd& pre) { return (pre.array() > 0.0).cast<double>().matrix(); }

void check_rows(const Network& net, const Eigen::MatrixXd& X) {
    if (X.cols() != net.input_dim())
        throw ParameterError("input dimension " + std::to_string(X.cols()) + " != network input " +
                             std::to_string(net.input_dim()));
}

void check_input(const Network& net, const VecRef& x) {
    if (x.size() != net.input_dim())
        throw ParameterError("input dimension " + std::to_string(x.size()) + " != network input " +
                             std::to_string(net.input_dim()));
}

void check_params(const Network& net, const Eigen::VectorXd& w) {
    if (w.size() != net.num_parameters())
        throw ParameterError("parameter vector has " + std::to_string(w.size()) + " entries, expected " +
                             std::to_string(net.num_parameters()));
}

}  // namespace

// ---------------------------------------------------------------- Network

Eigen::VectorXd Network::forward(const VecRef& x) const {
    check_input(*this, x);
    return forward_batch(x.transpose()).row(0).transpose();
}

Eigen::MatrixXd Network::parameter_jacobian(const VecRef& x) const {
    check_input(*this, x);
    const Eigen::MatrixXd X = x.transpose();
    const Eigen::Index k = output_dim();
    Eigen::MatrixXd J(num_parameters(), k);
    for (Eigen::Index o = 0; o < k; ++o) {
        Eigen::MatrixXd e = Eigen::MatrixXd::Zero(1, k);
        e(0, o) = 1.0;
        J.col(o) = vjp_batch(X, e);
    }
    return J;
}

Eigen::MatrixXd Network::empirical_ntk(const Eigen::MatrixXd& X) const {
    check_rows(*this, X);
    const Eigen::Index n = X.rows();
    std::vector<Eigen::MatrixXd> jac;
    jac.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) jac.push_back(parameter_jacobian(X.row(i).transpose()));
    Eigen::MatrixXd K(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i; j < n; ++j) {
            const double v = (jac[static_cast<std::size_t>(i)].array() * jac[static_cast<std::size_t>(j)].array()).sum();
            K(i, j) = v;
            K(j, i) = v;
        }
    return K;
}

Eigen::VectorXd Network::loss_gradient(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) const {
    check_rows(*this, X);
    if (Y.rows() != X.rows() || Y.cols() != output_dim()) throw ParameterError("target shape mismatch");
    return vjp_batch(X, forward_batch(X) - Y);
}

double Network::loss(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) const {
    check_rows(*this, X);
    if (Y.rows() != X.rows() || Y.cols() != output_dim()) throw ParameterError("target shape mismatch");
    return 0.5 * (forward_batch(X) - Y).squaredNorm();
}

// ---------------------------------------------------------------- FrozenHeadNet

FrozenHeadNet::FrozenHeadNet(Eigen::MatrixXd W, Eigen::MatrixXd A) : W_(std::move(W)), A_(std::move(A)) {
    if (W_.rows() < 1 || W_.cols() < 1) throw ParameterError("frozen-head net needs a nonempty W");
    if (A_.rows() != W_.rows() || A_.cols() < 1) throw ParameterError("head must be width x k with k >= 1");
}

Eigen::VectorXd FrozenHeadNet::parameters() const { return Eigen::Map<const Eigen::VectorXd>(W_.data(), W_.size()); }

void FrozenHeadNet::set_parameters(const Eigen::VectorXd& w) {
    check_params(*this, w);
    W_ = Eigen::Map<const Eigen::MatrixXd>(w.data(), W_.rows(), W_.cols());
}

Eigen::MatrixXd FrozenHeadNet::forward_batch(const Eigen::MatrixXd& X) const {
    check_rows(*this, X);
    const double scale = 1.0 / std::sqrt(static_cast<double>(width()));
    return (X * W_.transpose()).cwiseMax(0.0) * A_ * scale;
}

Eigen::MatrixXd FrozenHeadNet::input_jacobian(const VecRef& x) const {
    check_input(*this, x);
    const double scale = 1.0 / std::sqrt(static_cast<double>(width()));
    const Eigen::VectorXd mask = relu_mask(W_ * x);
    return W_.transpose() * (mask.asDiagonal() * A_) * scale;
}

Eigen::VectorXd FrozenHeadNet::vjp_batch(const Eigen::MatrixXd& X, const Eigen::MatrixXd& R) const {
    check_rows(*this, X);
    if (R.rows() != X.rows() || R.cols() != output_dim()) throw ParameterError("residual shape mismatch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(width()));
    const Eigen::MatrixXd M = relu_mask(X * W_.transpose());
    const Eigen::MatrixXd G = ((R * A_.transpose()).array() * M.array()).matrix();
    const Eigen::MatrixXd gW = G.transpose() * X * scale;
    return Eigen::Map<const Eigen::VectorXd>(gW.data(), gW.size());
}

Eigen::MatrixXd FrozenHeadNet::jvp_batch(const Eigen::MatrixXd& X, const Eigen::VectorXd& u) const {
    check_rows(*this, X);
    check_params(*this, u);
    const double scale = 1.0 / std::sqrt(static_cast<double>(width()));
    const Eigen::Map<const Eigen::MatrixXd> U(u.data(), W_.rows(), W_.cols());
    const Eigen::MatrixXd M = relu_mask(X * W_.transpose());
    return ((X * U.transpose()).array() * M.array()).matrix() * A_ * scale;
}

Eigen::MatrixXd FrozenHeadNet::tangent_input_jacobian(const VecRef& x, const Eigen::VectorXd& u) const {
    check_input(*this, x);
    check_params(*this, u);
    const double scale = 1.0 / std::sqrt(static_cast<double>(width()));
    const Eigen::Map<const Eigen::MatrixXd> U(u.data(), W_.rows(), W_.cols());
    const Eigen::VectorXd mask = relu_mask(W_ * x);
    return U.transpose() * (mask.asDiagonal() * A_) * scale;
}

Eigen::MatrixXd FrozenHeadNet::empirical_ntk(const Eigen::MatrixXd& X) const {
    check_rows(*this, X);
    const Eigen::MatrixXd M = relu_mask(X * W_.transpose());
    const Eigen::VectorXd s = A_.rowwise().squaredNorm();
    const Eigen::MatrixXd act = M * s.asDiagonal() * M.transpose() / static_cast<double>(width());
    return (act.array() * (X * X.transpose()).array()).matrix();
}

bool FrozenHeadNet::same_architecture(const Network& other) const {
    const auto* o = dynamic_cast<const FrozenHeadNet*>(&other);
    return o != nullptr && o->W_.rows() == W_.rows() && o->W_.cols() == W_.cols() && o->A_ == A_;
}

FrozenHeadNet init_net(int m, int d, int k, std::uint64_t seed) {
    if (m < 1 || d < 1 || k < 1) throw ParameterError("init_net: m, d, k must be positive");
    Rng w_rng = make_rng(substream_seed(seed, "weights"));
    Rng a_rng = make_rng(substream_seed(seed, "head"));
    std::normal_distribution<double> normal(0.0, 0.01);
    std::bernoulli_distribution coin(0.5);
    Eigen::MatrixXd W(m, d);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < d; ++j) W(i, j) = normal(w_rng);
    Eigen::MatrixXd A(m, k);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < k; ++j) A(i, j) = coin(a_rng) ? 1.0 : -1.0;
    return FrozenHeadNet(std::move(W), std::move(A));
}

// ---------------------------------------------------------------- Mlp

Mlp::Mlp(std::vector<Layer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw ParameterError("mlp needs at least one layer");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& L = layers_[l];
        if (L.W.rows() < 1 || L.W.cols() < 1 || L.b.size() != L.W.rows())
            throw ParameterError("mlp layer " + std::to_string(l) + " has inconsistent shapes");
        if (l > 0 && L.W.cols() != layers_[l - 1].W.rows())
            throw ParameterError("mlp layer " + std::to_string(l) + " input does not match previous output");
        num_params_ += L.W.size() + L.b.size();
    }
}

Eigen::VectorXd Mlp::parameters() const {
    Eigen::VectorXd w(num_params_);
    Eigen::Index at = 0;
    for (const auto& L : layers_) {
        w.segment(at, L.W.size()) = Eigen::Map<const Eigen::VectorXd>(L.W.data(), L.W.size());
        at += L.W.size();
        w.segment(at, L.b.size()) = L.b;
        at += L.b.size();
    }
    return w;
}

std::vector<Mlp::Layer> Mlp::unflatten(const Eigen::VectorXd& w) const {
    check_params(*this, w);
    std::vector<Layer> out;
    out.reserve(layers_.size());
    Eigen::Index at = 0;
    for (const auto& L : layers_) {
        Layer n;
        n.W = Eigen::Map<const Eigen::MatrixXd>(w.data() + at, L.W.rows(), L.W.cols());
        at += L.W.size();
        n.b = w.segment(at, L.b.size());
        at += L.b.size();
        out.push_back(std::move(n));
    }
    return out;
}

void Mlp::set_parameters(const Eigen::VectorXd& w) { layers_ = unflatten(w); }

Mlp::Forward Mlp::run(const Eigen::MatrixXd& Xt) const {
    Forward f;
    f.post.push_back(Xt);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        Eigen::MatrixXd pre = layers_[l].W * f.post.back();
        pre.colwise() += layers_[l].b;
        if (l + 1 < layers_.size()) f.post.push_back(pre.cwiseMax(0.0));
        f.pre.push_back(std::move(pre));
    }
    return f;
}

Eigen::MatrixXd Mlp::forward_batch(const Eigen::MatrixXd& X) const {
    check_rows(*this, X);
    return run(X.transpose()).pre.back().transpose();
}

Eigen::MatrixXd Mlp::input_jacobian(const VecRef& x) const {
    check_input(*this, x);
    const Forward f = run(x);
    Eigen::MatrixXd G = layers_.back().W;  // k x width
    for (std::size_t l = layers_.size() - 1; l-- > 0;) {
        G = G * relu_mask(f.pre[l]).col(0).asDiagonal();
        G = G * layers_[l].W;
    }
    return G.transpose();
}

Eigen::VectorXd Mlp::vjp_batch(const Eigen::MatrixXd& X, const Eigen::MatrixXd& R) const {
    check_rows(*this, X);
    if (R.rows() != X.rows() || R.cols() != output_dim()) throw ParameterError("residual shape mismatch");
    const Forward f = run(X.transpose());
    std::vector<Layer> grads(layers_.size());
    Eigen::MatrixXd delta = R.transpose();
    for (std::size_t l = layers_.size(); l-- > 0;) {
        grads[l].W = delta * f.post[l].transpose();
        grads[l].b = delta.rowwise().sum();
        if (l > 0) delta = ((layers_[l].W.transpose() * delta).array() * relu_mask(f.pre[l - 1]).array()).matrix();
    }
    Eigen::VectorXd g(num_params_);
    Eigen::Index at = 0;
    for (const auto& L : grads) {
        g.segment(at, L.W.size()) = Eigen::Map<const Eigen::VectorXd>(L.W.data(), L.W.size());
        at += L.W.size();
        g.segment(at, L.b.size()) = L.b;
        at += L.b.size();
    }
    return g;
}

Eigen::MatrixXd Mlp::jvp_batch(const Eigen::MatrixXd& X, const Eigen::VectorXd& u) const {
    check_rows(*this, X);
    const std::vector<Layer> U = unflatten(u);
    const Forward f = run(X.transpose());
    Eigen::MatrixXd tpost = Eigen::MatrixXd::Zero(X.cols(), X.rows());
    Eigen::MatrixXd tpre;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        tpre = U[l].W * f.post[l] + layers_[l].W * tpost;
        tpre.colwise() += U[l].b;
        if (l + 1 < layers_.size()) tpost = (tpre.array() * relu_mask(f.pre[l]).array()).matrix();
    }
    return tpre.transpose();
}

Eigen::MatrixXd Mlp::tangent_input_jacobian(const VecRef& x, const Eigen::VectorXd& u) const {
    check_input(*this, x);
    const std::vector<Layer> U = unflatten(u);
    const Forward f = run(x);
    const Eigen::Index k = output_dim();
    // adjoints of (h, hdot) for every output at once
    Eigen::MatrixXd g_h = Eigen::MatrixXd::Zero(k, k);
    Eigen::MatrixXd g_ht = Eigen::MatrixXd::Identity(k, k);
    for (std::size_t l = layers_.size(); l-- > 0;) {
        Eigen::MatrixXd g_a = layers_[l].W.transpose() * g_h + U[l].W.transpose() * g_ht;
        Eigen::MatrixXd g_at = layers_[l].W.transpose() * g_ht;
        if (l == 0) return g_a;
        const Eigen::VectorXd mask = relu_mask(f.pre[l - 1]).col(0);
        g_h = mask.asDiagonal() * g_a;
        g_ht = mask.asDiagonal() * g_at;
    }
    return {};
}

bool Mlp::same_architecture(const Network& other) const {
    const auto* o = dynamic_cast<const Mlp*>(&other);
    if (o == nullptr || o->layers_.size() != layers_.size()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l)
        if (o->layers_[l].W.rows() != layers_[l].W.rows() || o->layers_[l].W.cols() != layers_[l].W.cols()) return false;
    return true;
}

Mlp make_mlp(const std::vector<int>& sizes, std::uint64_t seed) {
    if (sizes.size() < 2) throw ParameterError("make_mlp needs at least input and output sizes");
    for (int s : sizes)
        if (s < 1) throw ParameterError("make_mlp: layer sizes must be positive");
    Rng rng = make_rng(substream_seed(seed, "mlp"));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Mlp::Layer> layers;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        const bool last = l + 2 == sizes.size();
        const double sd = std::sqrt((last ? 1.0 : 2.0) / sizes[l]);
        Mlp::Layer L;
        L.W.resize(sizes[l + 1], sizes[l]);
        for (Eigen::Index j = 0; j < L.W.cols(); ++j)
            for (Eigen::Index i = 0; i < L.W.rows(); ++i) L.W(i, j) = sd * normal(rng);
        L.b = Eigen::VectorXd::Zero(sizes[l + 1]);
        layers.push_back(std::move(L));
    }
    return Mlp(std::move(layers));
}

// ---------------------------------------------------------------- LinearizedNetwork

LinearizedNetwork::LinearizedNetwork(const Network& expansion_point)
    : base_(expansion_point.clone()), w0_(expansion_point.parameters()), w_(w0_) {}

LinearizedNetwork::LinearizedNetwork(const LinearizedNetwork& other)
    : base_(other.base_->clone()), w0_(other.w0_), w_(other.w_) {}

void LinearizedNetwork::set_parameters(const Eigen::VectorXd& w) {
    check_params(*this, w);
    w_ = w;
}

Eigen::MatrixXd LinearizedNetwork::forward_batch(const Eigen::MatrixXd& X) const {
    check_rows(*this, X);
    return base_->forward_batch(X) + base_->jvp_batch(X, w_ - w0_);
}

Eigen::MatrixXd LinearizedNetwork::input_jacobian(const VecRef& x) const {
    return base_->input_jacobian(x) + base_->tangent_input_jacobian(x, w_ - w0_);
}

bool LinearizedNetwork::same_architecture(const Network& other) const {
    const auto* o = dynamic_cast<const LinearizedNetwork*>(&other);
    return o != nullptr && base_->same_architecture(*o->base_);
}

// ---------------------------------------------------------------- classifiers

CenteredNetClassifier::CenteredNetClassifier(const Network& net, const Network& init) : net_(&net), init_(&init) {
    if (!net.same_architecture(init)) throw ParameterError("centered classifier: architectures differ");
}

Eigen::VectorXd CenteredNetClassifier::logits(const VecRef& x) const { return net_->forward(x) - init_->forward(x); }

Eigen::MatrixXd CenteredNetClassifier::logit_gradient(const VecRef& x) const {
    return net_->input_jacobian(x) - init_->input_jacobian(x);
}

Eigen::VectorXd centered_prediction(const Network& net, const Network& init, const VecRef& x) {
    if (!net.same_architecture(init)) throw ParameterError("centered_prediction: architectures differ");
    return net.forward(x) - init.forward(x);
}

// ---------------------------------------------------------------- training

TrainMode parse_train_mode(const std::string& name) {
    if (name == "standard") return TrainMode::Standard;
    if (name == "adv_fgsm") return TrainMode::AdvFGSM;
    if (name == "adv_pgd") return TrainMode::AdvPGD;
    throw ParameterError("unknown training mode '" + name + "' (expected standard|adv_fgsm|adv_pgd)");
}

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::Standard: return "standard";
        case TrainMode::AdvFGSM: return "adv_fgsm";
        case TrainMode::AdvPGD: return "adv_pgd";
    }
    return "standard";
}

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ParameterError("learning_rate must be >= 0");
    if (epochs < 0) throw ParameterError("epochs must be >= 0");
    if (batch_size < 0) throw ParameterError("batch_size must be >= 0");
    for (int e : checkpoint_epochs)
        if (e < 0 || e > epochs) throw ParameterError("checkpoint epoch " + std::to_string(e) + " outside [0, epochs]");
    if (mode != TrainMode::Standard || eval_robust) attack.validate();
}

Eigen::MatrixXd adversarial_inputs(const Network& net, const Eigen::MatrixXd& X, const std::vector<int>& labels,
                                   TrainMode mode, const AttackConfig& attack) {
    if (static_cast<Eigen::Index>(labels.size()) != X.rows()) throw ParameterError("labels do not match inputs");
    if (mode == TrainMode::Standard) return X;
    const NetClassifier model(net);
    Eigen::MatrixXd out = X;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const Eigen::VectorXd x = X.row(i).transpose();
        const int label = labels[static_cast<std::size_t>(i)];
        const Perturbation p = mode == TrainMode::AdvFGSM ? fgsm(model, x, label, attack.epsilon, attack.clamp_box)
                                                          : pgd(model, x, label, attack);
        out.row(i) += p.delta.transpose();
    }
    return out;
}

namespace {

double batch_accuracy(const Network& net, const Dataset& ds) {
    if (ds.size() == 0) return 0.0;
    const Eigen::MatrixXd F = net.forward_batch(ds.inputs);
    Eigen::Index ok = 0;
    for (Eigen::Index i = 0; i < ds.size(); ++i)
        if (predicted_class(F.row(i).transpose()) == ds.labels[static_cast<std::size_t>(i)]) ++ok;
    return static_cast<double>(ok) / static_cast<double>(ds.size());
}

}  // namespace

TrainTrace train(Network& net, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
                 const EpochHook& hook) {
    cfg.validate();
    train_set.validate();
    if (train_set.size() == 0) throw ParameterError("training set is empty");
    check_rows(net, train_set.inputs);
    const Eigen::MatrixXd Y = label_matrix(train_set);
    if (Y.cols() != net.output_dim())
        throw ParameterError("label encoding has " + std::to_string(Y.cols()) + " columns, network has " +
                             std::to_string(net.output_dim()) + " outputs");
    if (val_set != nullptr) {
        val_set->validate();
        check_rows(net, val_set->inputs);
    }

    const Eigen::Index n = train_set.size();
    const Eigen::Index batch = cfg.batch_size == 0 ? n : std::min<Eigen::Index>(cfg.batch_size, n);
    Rng rng = make_rng(substream_seed(cfg.seed, "minibatch"));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});

    TrainTrace trace;
    const auto checkpoint = [&](int epoch) {
        if (std::find(cfg.checkpoint_epochs.begin(), cfg.checkpoint_epochs.end(), epoch) != cfg.checkpoint_epochs.end())
            trace.checkpoints.emplace_back(epoch, net.parameters());
    };
    const auto record = [&](int epoch, double loss) {
        EpochRecord r;
        r.epoch = epoch;
        r.loss = loss;
        r.train_acc = batch_accuracy(net, train_set);
        if (val_set != nullptr && val_set->size() > 0) {
            r.val_acc = batch_accuracy(net, *val_set);
            if (cfg.eval_robust) {
                const NetClassifier model(net);
                const AttackFn attack = make_attack(AttackMethod::Fgsm, model, cfg.attack);
                r.robust_val_acc = robust_accuracy(model, *val_set, attack);
            }
        }
        trace.records.push_back(r);
    };

    const double initial_loss = net.loss(train_set.inputs, Y);
    if (!std::isfinite(initial_loss)) throw DivergenceError("initial loss is not finite", 0);
    record(0, initial_loss);
    checkpoint(0);
    if (hook) hook(0, net);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (batch < n) {
            // Fisher-Yates, spelled out so the order does not depend on the standard library
            for (std::size_t i = order.size() - 1; i > 0; --i) {
                const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
                std::swap(order[i], order[j]);
            }
        }
        for (Eigen::Index start = 0; start < n; start += batch) {
            const Eigen::Index len = std::min(batch, n - start);
            Eigen::MatrixXd Xb(len, train_set.dim());
            Eigen::MatrixXd Yb(len, Y.cols());
            std::vector<int> lb(static_cast<std::size_t>(len));
            for (Eigen::Index i = 0; i < len; ++i) {
                const Eigen::Index r = order[static_cast<std::size_t>(start + i)];
                Xb.row(i) = train_set.inputs.row(r);
                Yb.row(i) = Y.row(r);
                lb[static_cast<std::size_t>(i)] = train_set.labels[static_cast<std::size_t>(r)];
            }
            if (cfg.mode != TrainMode::Standard) Xb = adversarial_inputs(net, Xb, lb, cfg.mode, cfg.attack);
            net.set_parameters(net.parameters() - cfg.learning_rate * net.loss_gradient(Xb, Yb));
        }
        const double loss = net.loss(train_set.inputs, Y);
        if (!std::isfinite(loss) || (initial_loss > 0.0 && loss > 1e6 * initial_loss))
            throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + " (loss " +
                                      format_real(loss) + ", initial " + format_real(initial_loss) + ")",
                                  epoch);
        record(epoch, loss);
        checkpoint(epoch);
        if (hook) hook(epoch, net);
    }
    return trace;
}

LinearizedRun linearize_and_continue(const Network& net_at_t0, const Dataset& train_set, const Dataset* val_set,
                                     const TrainConfig& cfg, const EpochHook& hook) {
    LinearizedRun run;
    run.model = std::make_unique<LinearizedNetwork>(net_at_t0);
    run.trace = train(*run.model, train_set, val_set, cfg, hook);
    return run;
}

std::vector<std::optional<double>> gradient_cosine_similarity(const Network& net, const Network& init,
                                                              const Predictor& pred, const Dataset& ds, double epoch,
                                                              double epoch_to_time) {
    if (epoch < 0 || !(epoch_to_time > 0)) throw ParameterError("epoch must be >= 0 and epoch_to_time > 0");
    const CenteredNetClassifier net_model(net, init);
    const KernelClassifier ker_model(pred, epoch * epoch_to_time);
    std::vector<std::optional<double>> out;
    out.reserve(static_cast<std::size_t>(ds.size()));
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
        const Eigen::VectorXd x = ds.inputs.row(i).transpose();
        const int label = ds.labels[static_cast<std::size_t>(i)];
        out.push_back(cosine_similarity(loss_input_gradient(net_model, x, label), loss_input_gradient(ker_model, x, label)));
    }
    return out;
}

std::optional<double> cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size()) throw ParameterError("cosine_similarity: size mismatch");
    const double na = a.norm();
    const double nb = b.norm();
    if (!(na > 0.0) || !(nb > 0.0)) return std::nullopt;
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

std::optional<double> mean_defined(const std::vector<std::optional<double>>& values) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& v : values)
        if (v) {
            sum += *v;
            ++count;
        }
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
}

// ---------------------------------------------------------------- checkpoint / trace I/O

void save_checkpoint(const FrozenHeadNet& net, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out.write("NTKW", 4);
    const std::uint32_t dims[3] = {static_cast<std::uint32_t>(net.width()), static_cast<std::uint32_t>(net.input_dim()),
                                   static_cast<std::uint32_t>(net.output_dim())};
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> W = net.weights();
    out.write(reinterpret_cast<const char*>(W.data()), static_cast<std::streamsize>(W.size() * sizeof(double)));
    for (Eigen::Index i = 0; i < net.head().rows(); ++i)
        for (Eigen::Index j = 0; j < net.head().cols(); ++j) {
            const auto a = static_cast<std::int8_t>(net.head()(i, j) > 0 ? 1 : -1);
            out.write(reinterpret_cast<const char*>(&a), 1);
        }
    if (!out) throw FormatError("write failed for " + path.string());
}

FrozenHeadNet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "NTKW") throw FormatError(path.string() + ": bad checkpoint magic");
    std::uint32_t dims[3] = {};
    in.read(reinterpret_cast<char*>(dims), sizeof dims);
    if (!in || dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw FormatError(path.string() + ": bad checkpoint header");
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> W(dims[0], dims[1]);
    in.read(reinterpret_cast<char*>(W.data()), static_cast<std::streamsize>(W.size() * sizeof(double)));
    if (!in) throw FormatError(path.string() + ": truncated weights");
    Eigen::MatrixXd A(dims[0], dims[2]);
    for (Eigen::Index i = 0; i < A.rows(); ++i)
        for (Eigen::Index j = 0; j < A.cols(); ++j) {
            std::int8_t a = 0;
            in.read(reinterpret_cast<char*>(&a), 1);
            if (!in) throw FormatError(path.string() + ": truncated head");
            if (a != 1 && a != -1) throw FormatError(path.string() + ": head entries must be +-1");
            A(i, j) = a;
        }
    return FrozenHeadNet(Eigen::MatrixXd(W), std::move(A));
}

void write_trace_csv(const TrainTrace& trace, const std::filesystem::path& path) {
    CsvWriter csv(path, {"epoch", "loss", "train_acc", "val_acc", "robust_val_acc"});
    for (const auto& r : trace.records) {
        csv.field(r.epoch).field(r.loss).field(r.train_acc).field(r.val_acc).field(r.robust_val_acc);
        csv.end_row();
    }
}

// ---------------------------------------------------------------- EmpiricalKernel

double EmpiricalKernel::value(const VecRef& x, const VecRef& x2) const {
    return (net_->parameter_jacobian(x).array() * net_->parameter_jacobian(x2).array()).sum();
}

// grad_x sum_o J_o(x) . J_o(x2) = sum_o column o of grad_x [J(x) J_o(x2)]
Eigen::VectorXd EmpiricalKernel::input_gradient(const VecRef& x, const VecRef& x2) const {
    const Eigen::MatrixXd J2 = net_->parameter_jacobian(x2);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(x.size());
    for (Eigen::Index o = 0; o < J2.cols(); ++o) g += net_->tangent_input_jacobian(x, J2.col(o)).col(o);
    return g;
}

Eigen::VectorXd EmpiricalKernel::cross(const VecRef& x, const Eigen::MatrixXd& X) const {
    const Eigen::MatrixXd J = net_->parameter_jacobian(x);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(X.rows());
    for (Eigen::Index o = 0; o < J.cols(); ++o) out += net_->jvp_batch(X, J.col(o)).col(o);
    return out;
}

Eigen::MatrixXd EmpiricalKernel::cross_gradient(const VecRef& x, const Eigen::MatrixXd& X) const {
    Eigen::MatrixXd D(X.rows(), X.cols());
    for (Eigen::Index j = 0; j < X.rows(); ++j) D.row(j) = input_gradient(x, X.row(j).transpose()).transpose();
    return D;
}

}  // namespace ntkadv
