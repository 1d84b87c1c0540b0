#pragma once

#include "ntkadv/rng.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>

namespace testing {

inline Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    ntkadv::Rng rng = ntkadv::make_rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = nd(rng);
    return m;
}

inline Eigen::VectorXd gaussian_vec(Eigen::Index n, std::uint64_t seed) { return gaussian(n, 1, seed).col(0); }

inline Eigen::VectorXd unit_vec(Eigen::Index n, std::uint64_t seed) { return gaussian_vec(n, seed).normalized(); }

inline Eigen::MatrixXd unit_rows(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    Eigen::MatrixXd X = gaussian(n, d, seed);
    X.rowwise().normalize();
    return X;
}

/// Random PSD matrix B B^T / cols.
inline Eigen::MatrixXd random_psd(Eigen::Index n, Eigen::Index rank, std::uint64_t seed) {
    const Eigen::MatrixXd B = gaussian(n, rank, seed);
    return B * B.transpose() / static_cast<double>(rank);
}

/// Central-difference gradient of a scalar function.
inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                                   double h = 1e-6) {
    Eigen::VectorXd g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        Eigen::VectorXd a = x, b = x;
        a(i) += h;
        b(i) -= h;
        g(i) = (f(a) - f(b)) / (2.0 * h);
    }
    return g;
}

/// |a - b| / max(|b|, floor).
inline double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double floor = 1e-8) {
    return (a - b).norm() / std::max(b.norm(), floor);
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("ntkadv_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace testing
