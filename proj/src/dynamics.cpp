#include "ntkadv/dynamics.hpp"

#include "ntkadv/csv.hpp"
#include "ntkadv/errors.hpp"
#include "ntkadv/regression.hpp"

#include <algorithm>
#include <cmath>

namespace ntkadv {

namespace {

void check_square_pair(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
    if (A.rows() != A.cols() || A.rows() != B.rows() || A.cols() != B.cols())
        throw ParameterError("kernel matrices must be square and of equal size");
}

}  // namespace

namespace {

// <A,B>/(|A||B|). One pass for all three sums so A == B gives exactly 1.
double normalized_inner(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const char* what) {
    check_square_pair(A, B);
    double ab = 0.0;
    double aa = 0.0;
    double bb = 0.0;
    const double* a = A.data();
    const double* b = B.data();
    for (Eigen::Index i = 0; i < A.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (!(aa > 0.0) || !(bb > 0.0)) throw DomainError(std::string(what) + " undefined for a zero matrix");
    return ab / std::sqrt(aa * bb);
}

}  // namespace

double kernel_distance(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
    return 1.0 - normalized_inner(A, B, "kernel distance");
}

double kernel_angle(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
    return std::acos(std::clamp(normalized_inner(A, B, "kernel angle"), -1.0, 1.0));
}

PolarPoint polar_coordinates(const Eigen::MatrixXd& theta_t, const Eigen::MatrixXd& theta_0,
                             const Eigen::MatrixXd& theta_f, const std::string& run) {
    check_square_pair(theta_t, theta_0);
    check_square_pair(theta_f, theta_0);
    const double denom = (theta_f - theta_0).norm();
    if (!(denom > 0.0))
        throw NumericalError(run + ": polar radius undefined, final kernel equals initial kernel");
    PolarPoint p;
    p.r = (theta_t - theta_0).norm() / denom;
    p.theta = std::acos(std::clamp(1.0 - kernel_distance(theta_t, theta_0), -1.0, 1.0));
    return p;
}

double concentration(const Eigen::VectorXd& eigs, int p) {
    if (p < 1 || p > eigs.size())
        throw ParameterError("concentration cutoff " + std::to_string(p) + " outside [1," + std::to_string(eigs.size()) + "]");
    const double total = eigs.squaredNorm();
    if (!(total > 0.0)) throw DomainError("concentration undefined for an all-zero spectrum");
    if (p == eigs.size()) return 1.0;
    return std::min(1.0, eigs.head(p).squaredNorm() / total);
}

Eigen::VectorXd spectrum(const Eigen::MatrixXd& symmetric) { return eigendecompose(symmetric).eigenvalues; }

Eigen::MatrixXd top_subspace(const Eigen::MatrixXd& symmetric, int p) {
    if (p < 1 || p > symmetric.rows()) throw ParameterError("top_subspace cutoff outside [1, n]");
    const EigenSystem e = eigendecompose(symmetric);
    const Eigen::MatrixXd V = e.eigenvectors.leftCols(p);
    return V * e.eigenvalues.head(p).asDiagonal() * V.transpose();
}

std::vector<PolarPoint> polar_trajectory(const std::vector<Eigen::MatrixXd>& kernels) {
    if (kernels.empty()) return {};
    const Eigen::MatrixXd& k0 = kernels.front();
    const Eigen::MatrixXd& kf = kernels.back();
    const double denom = (kf - k0).norm();
    std::vector<PolarPoint> out;
    out.reserve(kernels.size());
    for (const auto& k : kernels) {
        check_square_pair(k, k0);
        PolarPoint p;
        if (denom > 0.0) p.r = (k - k0).norm() / denom;
        p.theta = std::acos(std::clamp(1.0 - kernel_distance(k, k0), -1.0, 1.0));
        out.push_back(p);
    }
    return out;
}

std::vector<PolarPoint> top_subspace_polar(const std::vector<Eigen::MatrixXd>& kernels, int p) {
    std::vector<Eigen::MatrixXd> projected;
    projected.reserve(kernels.size());
    for (const auto& k : kernels) projected.push_back(top_subspace(k, p));
    return polar_trajectory(projected);
}

std::vector<TrajectorySnapshot> trajectory_metrics(const std::vector<Eigen::MatrixXd>& kernels,
                                                   const std::vector<int>& epochs, const std::vector<int>& cutoffs) {
    if (kernels.size() != epochs.size()) throw ParameterError("one epoch per kernel expected");
    const std::vector<PolarPoint> polar = polar_trajectory(kernels);
    std::vector<TrajectorySnapshot> out;
    for (std::size_t i = 0; i < kernels.size(); ++i) {
        TrajectorySnapshot s;
        s.epoch = epochs[i];
        s.frobenius_norm = kernels[i].norm();
        s.distance_to_init = kernel_distance(kernels[i], kernels.front());
        s.r = polar[i].r;
        s.theta = polar[i].theta;
        s.eigenvalues = spectrum(kernels[i]);
        for (int p : cutoffs)
            if (p >= 1 && p <= s.eigenvalues.size()) s.concentration[p] = concentration(s.eigenvalues, p);
        out.push_back(std::move(s));
    }
    return out;
}

void DynamicsConfig::validate(Eigen::Index train_size, int epochs) const {
    if (tracked_batch.empty()) throw ParameterError("tracked batch is empty");
    for (Eigen::Index i : tracked_batch)
        if (i < 0 || i >= train_size) throw ParameterError("tracked batch index " + std::to_string(i) + " outside the training set");
    if (checkpoints.empty()) throw ParameterError("no checkpoints requested");
    if (!std::is_sorted(checkpoints.begin(), checkpoints.end()) ||
        std::adjacent_find(checkpoints.begin(), checkpoints.end()) != checkpoints.end())
        throw ParameterError("checkpoints must be strictly increasing");
    if (checkpoints.front() < 0 || checkpoints.back() > epochs)
        throw ParameterError("checkpoints must lie in [0, epochs]");
    for (int p : cutoffs)
        if (p < 1) throw ParameterError("concentration cutoffs must be >= 1");
}

DynamicsResult record_dynamics(Network& net, const Dataset& train_set, const TrainConfig& cfg,
                               const DynamicsConfig& dyn) {
    dyn.validate(train_set.size(), cfg.epochs);
    const Dataset batch = train_set.select(dyn.tracked_batch);

    DynamicsResult result;
    std::vector<int> recorded;
    const EpochHook hook = [&](int epoch, const Network& current) {
        if (!std::binary_search(dyn.checkpoints.begin(), dyn.checkpoints.end(), epoch)) return;
        const Eigen::MatrixXd X = dyn.track_attacked && cfg.mode != TrainMode::Standard
                                      ? adversarial_inputs(current, batch.inputs, batch.labels, cfg.mode, cfg.attack)
                                      : batch.inputs;
        result.kernels.push_back(current.empirical_ntk(X));
        recorded.push_back(epoch);
    };
    try {
        result.trace = train(net, train_set, nullptr, cfg, hook);
    } catch (const DivergenceError& e) {
        result.aborted = true;
        result.abort_epoch = e.epoch();
    }
    if (result.kernels.empty()) throw NumericalError("dynamics run recorded no checkpoint");
    result.snapshots = trajectory_metrics(result.kernels, recorded, dyn.cutoffs);
    return result;
}

Eigen::MatrixXd distance_heatmap(const std::vector<Eigen::MatrixXd>& kernels) {
    const auto n = static_cast<Eigen::Index>(kernels.size());
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double d = kernel_distance(kernels[static_cast<std::size_t>(i)], kernels[static_cast<std::size_t>(j)]);
            D(i, j) = d;
            D(j, i) = d;
        }
    return D;
}

void write_trajectory_csv(const std::vector<TrajectorySnapshot>& snapshots, const std::filesystem::path& path) {
    CsvWriter csv(path, {"epoch", "frob_norm", "dist_to_init", "r", "theta", "conc_p10", "conc_p20"});
    const auto conc = [](const TrajectorySnapshot& s, int p) -> std::optional<double> {
        const auto it = s.concentration.find(p);
        if (it == s.concentration.end()) return std::nullopt;
        return it->second;
    };
    for (const auto& s : snapshots) {
        csv.field(s.epoch).field(s.frobenius_norm).field(s.distance_to_init).field(s.r).field(s.theta);
        csv.field(conc(s, 10)).field(conc(s, 20));
        csv.end_row();
    }
}

}  // namespace ntkadv
