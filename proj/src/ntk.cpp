#include "ntkadv/ntk.hpp"

#include "ntkadv/errors.hpp"
#include "ntkadv/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace ntkadv {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kRhoSingular = 1.0 - 1e-9;

double clamp_unit(double rho) { return std::clamp(rho, -1.0, 1.0); }

double kappa0(double rho) { return (kPi - std::acos(rho)) / kPi; }

double kappa1(double rho) { return (std::sqrt(std::max(0.0, 1.0 - rho * rho)) + (kPi - std::acos(rho)) * rho) / kPi; }

double fully_connected_value(int depth, double xx, double yy, double xy) {
    double theta = xy;
    double sigma = xy;
    const double norm = std::sqrt(xx * yy);
    for (int l = 0; l < depth; ++l) {
        // Sigma^l(x,x) = Sigma^{l-1}(x,x) because kappa1(1) = 1, so the normaliser is fixed.
        const double rho = norm > 0 ? clamp_unit(sigma / norm) : 0.0;
        sigma = norm * kappa1(rho);
        theta = sigma + theta * kappa0(rho);
    }
    return theta;
}

}  // namespace

KernelModel KernelModel::fully_connected_relu(int depth) {
    KernelModel k{KernelFamily::FullyConnectedReLU, depth};
    k.validate();
    return k;
}

void KernelModel::validate() const {
    if (family == KernelFamily::FullyConnectedReLU && depth < 1)
        throw ParameterError("FullyConnectedReLU depth must be >= 1");
    if (family == KernelFamily::TwoLayerFrozenReLU && depth != 0)
        throw ParameterError("TwoLayerFrozenReLU takes no depth");
}

std::string KernelModel::name() const {
    if (family == KernelFamily::TwoLayerFrozenReLU) return "two_layer_frozen_relu";
    return "fully_connected_relu_" + std::to_string(depth);
}

double kernel_value(const KernelModel& k, const VecRef& x, const VecRef& x2) {
    if (x.size() != x2.size()) throw ParameterError("kernel_value: dimension mismatch");
    const double xy = x.dot(x2);
    if (k.family == KernelFamily::TwoLayerFrozenReLU) {
        const double nx = x.norm();
        const double ny = x2.norm();
        if (!(nx > 0) || !(ny > 0)) throw DomainError("two-layer NTK undefined for zero-norm input");
        const double rho = clamp_unit(xy / (nx * ny));
        return (0.5 - std::acos(rho) / (2.0 * kPi)) * xy;
    }
    return fully_connected_value(k.depth, x.squaredNorm(), x2.squaredNorm(), xy);
}

Eigen::VectorXd kernel_input_gradient(const KernelModel& k, const VecRef& x, const VecRef& x2) {
    if (x.size() != x2.size()) throw ParameterError("kernel_input_gradient: dimension mismatch");
    if (k.family == KernelFamily::TwoLayerFrozenReLU) {
        const double nx = x.norm();
        const double ny = x2.norm();
        if (!(nx > 0) || !(ny > 0)) throw DomainError("two-layer NTK undefined for zero-norm input");
        const double xy = x.dot(x2);
        const double rho = clamp_unit(xy / (nx * ny));
        const double g = 0.5 - std::acos(rho) / (2.0 * kPi);
        Eigen::VectorXd grad = g * x2;
        if (std::abs(rho) < kRhoSingular) {
            const double dg = 1.0 / (2.0 * kPi * std::sqrt(1.0 - rho * rho));
            const Eigen::VectorXd drho = x2 / (nx * ny) - (rho / (nx * nx)) * x;
            grad += (xy * dg) * drho;
        }
        return grad;
    }
    const double h = 1e-5 * std::max(1.0, x.norm());
    Eigen::VectorXd grad(x.size());
    Eigen::VectorXd probe = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double orig = probe(i);
        probe(i) = orig + h;
        const double up = kernel_value(k, probe, x2);
        probe(i) = orig - h;
        const double down = kernel_value(k, probe, x2);
        probe(i) = orig;
        grad(i) = (up - down) / (2.0 * h);
    }
    return grad;
}

Eigen::VectorXd kernel_cross(const KernelModel& k, const VecRef& x, const Eigen::MatrixXd& X) {
    Eigen::VectorXd out(X.rows());
    for (Eigen::Index j = 0; j < X.rows(); ++j) out(j) = kernel_value(k, x, X.row(j).transpose());
    return out;
}

Eigen::VectorXd Kernel::cross(const VecRef& x, const Eigen::MatrixXd& X) const {
    Eigen::VectorXd out(X.rows());
    for (Eigen::Index j = 0; j < X.rows(); ++j) out(j) = value(x, X.row(j).transpose());
    return out;
}

Eigen::MatrixXd Kernel::cross_gradient(const VecRef& x, const Eigen::MatrixXd& X) const {
    Eigen::MatrixXd D(X.rows(), X.cols());
    for (Eigen::Index j = 0; j < X.rows(); ++j) D.row(j) = input_gradient(x, X.row(j).transpose()).transpose();
    return D;
}

Eigen::MatrixXd gram_values(const Kernel& k, const Eigen::MatrixXd& X, double jitter_scale, double* jitter_out) {
    const Eigen::Index n = X.rows();
    if (n < 1) throw ParameterError("gram needs at least one row");
    if (jitter_scale < 0) throw ParameterError("jitter_scale must be nonnegative");
    const Eigen::MatrixXd rows = X.transpose();  // columns are examples, contiguous
    Eigen::MatrixXd G(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i; j < n; ++j) {
            try {
                G(i, j) = k.value(rows.col(i), rows.col(j));
            } catch (const DomainError& e) {
                throw DomainError(std::string(e.what()) + " (rows " + std::to_string(i) + ", " + std::to_string(j) + ")");
            }
            G(j, i) = G(i, j);
        }
    }
    const double jitter = jitter_scale * G.trace() / static_cast<double>(n);
    G.diagonal().array() += jitter;
    if (jitter_out) *jitter_out = jitter;
    return G;
}

GramMatrix gram(const KernelModel& k, const Eigen::MatrixXd& X, double jitter_scale) {
    k.validate();
    GramMatrix g;
    g.kernel = k;
    g.values = gram_values(AnalyticKernel(k), X, jitter_scale, &g.jitter);
    return g;
}

Eigen::MatrixXd empirical_ntk_oracle(const KernelModel& k, int width, std::uint64_t seed, const Eigen::MatrixXd& X) {
    k.validate();
    if (width < 1) throw ParameterError("oracle width must be >= 1");
    auto rng = make_rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Eigen::Index d = X.cols();
    const Eigen::Index m = width;
    auto gaussian = [&](Eigen::Index rows, Eigen::Index cols, double stddev) {
        Eigen::MatrixXd w(rows, cols);
        for (Eigen::Index j = 0; j < cols; ++j)
            for (Eigen::Index i = 0; i < rows; ++i) w(i, j) = stddev * normal(rng);
        return w;
    };

    if (k.family == KernelFamily::TwoLayerFrozenReLU) {
        const Eigen::MatrixXd W = gaussian(m, d, 0.01);
        Eigen::VectorXd a(m);
        std::bernoulli_distribution coin(0.5);
        for (Eigen::Index r = 0; r < m; ++r) a(r) = coin(rng) ? 1.0 : -1.0;
        // d f / d W_r = m^{-1/2} a_r 1[w_r.x > 0] x
        const Eigen::MatrixXd active = ((X * W.transpose()).array() > 0).cast<double>();
        const Eigen::MatrixXd gated = active * a.asDiagonal();
        return ((gated * gated.transpose()) / static_cast<double>(m)).cwiseProduct(X * X.transpose());
    }

    // NTK parameterisation: h1 = W1 x, h_l = sqrt(2/m) W_l relu(h_{l-1}), f = sqrt(2/m) w . relu(h_L),
    // all weights standard normal.
    const int depth = k.depth;
    const double scale = std::sqrt(2.0 / static_cast<double>(m));
    std::vector<Eigen::MatrixXd> weights;
    weights.push_back(gaussian(m, d, 1.0));
    for (int l = 1; l < depth; ++l) weights.push_back(gaussian(m, m, 1.0));
    const Eigen::VectorXd head = gaussian(m, 1, 1.0);

    std::vector<Eigen::MatrixXd> pre;   // n x m pre-activations per hidden layer
    std::vector<Eigen::MatrixXd> post;  // relu outputs
    pre.push_back(X * weights[0].transpose());
    post.push_back(pre.back().cwiseMax(0.0));
    for (int l = 1; l < depth; ++l) {
        pre.push_back(scale * post.back() * weights[static_cast<std::size_t>(l)].transpose());
        post.push_back(pre.back().cwiseMax(0.0));
    }

    Eigen::MatrixXd theta = (scale * scale) * post.back() * post.back().transpose();
    Eigen::MatrixXd delta = scale * ((pre.back().array() > 0).cast<double>().matrix() * head.asDiagonal());
    for (int l = depth - 1; l >= 0; --l) {
        const Eigen::MatrixXd input_gram = l == 0 ? Eigen::MatrixXd(X * X.transpose())
                                                  : Eigen::MatrixXd((scale * scale) * post[static_cast<std::size_t>(l - 1)] *
                                                                    post[static_cast<std::size_t>(l - 1)].transpose());
        theta += (delta * delta.transpose()).cwiseProduct(input_gram);
        if (l > 0) {
            const Eigen::MatrixXd back = scale * delta * weights[static_cast<std::size_t>(l)];
            delta = back.cwiseProduct((pre[static_cast<std::size_t>(l - 1)].array() > 0).cast<double>().matrix());
        }
    }
    return theta;
}

namespace {

template <typename T>
void write_le(std::ostream& out, T value) {
    static_assert(std::endian::native == std::endian::little, "binary writers assume a little-endian host");
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::string& what) {
    T value{};
    if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw FormatError("truncated " + what);
    return value;
}

}  // namespace

void save_gram(const GramMatrix& g, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write("NTKG", 4);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(g.values.rows()));
    write_le<double>(out, g.jitter);
    for (Eigen::Index i = 0; i < g.values.rows(); ++i)
        for (Eigen::Index j = 0; j <= i; ++j) write_le<double>(out, g.values(i, j));
}

GramMatrix load_gram(const std::filesystem::path& path, const KernelModel& kernel) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "NTKG", 4) != 0) throw FormatError("bad Gram magic in " + path.string());
    const auto n = read_le<std::uint32_t>(in, "Gram header");
    GramMatrix g;
    g.kernel = kernel;
    g.jitter = read_le<double>(in, "Gram header");
    g.values.resize(n, n);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i)
        for (Eigen::Index j = 0; j <= i; ++j) g.values(i, j) = g.values(j, i) = read_le<double>(in, "Gram body");
    return g;
}

}  // namespace ntkadv
