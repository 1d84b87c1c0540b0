#pragma once

#include "ntkadv/dataset.hpp"
#include "ntkadv/nets.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ntkadv {

/// d(A, B) = 1 - <A, B>_F / (|A|_F |B|_F). Throws DomainError when either matrix is zero.
[[nodiscard]] double kernel_distance(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B);

struct PolarPoint {
    std::optional<double> r;  ///< undefined when |Theta_f - Theta_0|_F = 0
    double theta = 0.0;       ///< radians
};

/// r = |Theta_t - Theta_0|_F / |Theta_f - Theta_0|_F, theta = arccos(1 - d(Theta_t, Theta_0)).
/// Throws NumericalError naming `run` when the denominator vanishes.
[[nodiscard]] PolarPoint polar_coordinates(const Eigen::MatrixXd& theta_t, const Eigen::MatrixXd& theta_0,
                                           const Eigen::MatrixXd& theta_f, const std::string& run = "run");

/// Angle from the normalized Frobenius inner product directly (second route to theta).
[[nodiscard]] double kernel_angle(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B);

/// sum_{i<=p} lambda_i^2 / sum_i lambda_i^2 for descending eigenvalues.
[[nodiscard]] double concentration(const Eigen::VectorXd& eigs, int p);

/// Descending eigenvalues of a symmetric matrix.
[[nodiscard]] Eigen::VectorXd spectrum(const Eigen::MatrixXd& symmetric);

/// sum_{i<=p} lambda_i v_i v_i^T.
[[nodiscard]] Eigen::MatrixXd top_subspace(const Eigen::MatrixXd& symmetric, int p);

/// Polar trajectory of the top-p reconstructions; Theta_0 and Theta_f are the first and last
/// projected kernels. r is left undefined when they coincide.
[[nodiscard]] std::vector<PolarPoint> top_subspace_polar(const std::vector<Eigen::MatrixXd>& kernels, int p);

/// Same on the full kernels.
[[nodiscard]] std::vector<PolarPoint> polar_trajectory(const std::vector<Eigen::MatrixXd>& kernels);

struct TrajectorySnapshot {
    int epoch = 0;
    double frobenius_norm = 0.0;
    double distance_to_init = 0.0;
    std::optional<double> r;
    double theta = 0.0;
    std::map<int, double> concentration;
    Eigen::VectorXd eigenvalues;
};

struct DynamicsConfig {
    std::vector<Eigen::Index> tracked_batch;  ///< rows of the training set
    std::vector<int> checkpoints;             ///< sorted epochs, each <= cfg.epochs
    std::vector<int> cutoffs{10, 20};
    bool track_attacked = false;  ///< evaluate the kernel at attacked inputs of the tracked batch

    void validate(Eigen::Index train_size, int epochs) const;
};

struct DynamicsResult {
    std::vector<TrajectorySnapshot> snapshots;
    std::vector<Eigen::MatrixXd> kernels;  ///< per recorded checkpoint
    TrainTrace trace;
    bool aborted = false;  ///< training diverged; metrics use the last available checkpoint
    int abort_epoch = -1;
};

/// Trains `net` and records the empirical NTK of the tracked batch at every checkpoint.
[[nodiscard]] DynamicsResult record_dynamics(Network& net, const Dataset& train_set, const TrainConfig& cfg,
                                             const DynamicsConfig& dyn);

/// Metrics of a kernel sequence; Theta_f is the last kernel.
[[nodiscard]] std::vector<TrajectorySnapshot> trajectory_metrics(const std::vector<Eigen::MatrixXd>& kernels,
                                                                 const std::vector<int>& epochs,
                                                                 const std::vector<int>& cutoffs);

/// Pairwise kernel distances, square.
[[nodiscard]] Eigen::MatrixXd distance_heatmap(const std::vector<Eigen::MatrixXd>& kernels);

/// Columns: epoch, frob_norm, dist_to_init, r, theta, conc_p10, conc_p20.
void write_trajectory_csv(const std::vector<TrajectorySnapshot>& snapshots, const std::filesystem::path& path);

}  // namespace ntkadv
