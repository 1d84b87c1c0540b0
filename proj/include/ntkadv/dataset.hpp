#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace ntkadv {

enum class LabelEncoding { SignedBinary, OneHot };
enum class Normalization { None, UnitNorm, PixelScale };

struct ImageShape {
    int height = 0;
    int width = 0;
};

/// Labeled examples; rows of `inputs` are examples.
///
/// Class 0 maps to -1 and class 1 to +1 under SignedBinary; every sign-dependent
/// attack formula relies on that convention.
struct Dataset {
    Eigen::MatrixXd inputs;
    std::vector<int> labels;
    int num_classes = 2;
    LabelEncoding encoding = LabelEncoding::SignedBinary;
    std::optional<ImageShape> image_shape;

    [[nodiscard]] Eigen::Index size() const noexcept { return inputs.rows(); }
    [[nodiscard]] Eigen::Index dim() const noexcept { return inputs.cols(); }

    /// Throws ParameterError when any invariant is broken.
    void validate() const;

    /// Subset by example index, preserving order.
    [[nodiscard]] Dataset select(const std::vector<Eigen::Index>& rows) const;
};

struct SplitSpec {
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
    Normalization normalize = Normalization::None;
};

struct Split {
    Dataset train;
    Dataset validation;
};

[[nodiscard]] Dataset generate_gaussian_blobs(int n, int d, int k, double separation, std::uint64_t seed);

/// Reads an IDX image/label pair. `limit` = 0 keeps everything. With `classes`, only those
/// labels are kept and remapped to 0..|classes|-1 in ascending label order.
[[nodiscard]] Dataset load_idx_images(const std::filesystem::path& image_path,
                                      const std::filesystem::path& label_path, std::size_t limit = 0,
                                      const std::optional<std::vector<int>>& classes = std::nullopt);

/// Writes an IDX pair (u8 pixels, rows of `pixels` are H*W images). Used to build fixtures.
void save_idx_images(const std::filesystem::path& image_path, const std::filesystem::path& label_path,
                     const std::vector<std::vector<std::uint8_t>>& pixels, const std::vector<std::uint8_t>& labels,
                     int height, int width);

/// SignedBinary: n x 1 column in {-1,+1}. OneHot: n x k.
[[nodiscard]] Eigen::MatrixXd label_matrix(const Dataset& ds);

/// Inverse of label_matrix (sign or argmax per row).
[[nodiscard]] std::vector<int> decode_labels(const Eigen::MatrixXd& y, LabelEncoding encoding);

[[nodiscard]] Dataset normalize(const Dataset& ds, Normalization mode);

/// Class-balanced deterministic split; normalization is applied first.
[[nodiscard]] Split split_dataset(const Dataset& ds, const SplitSpec& spec);

/// Fraction of the most frequent label.
[[nodiscard]] double majority_rate(const Dataset& ds);

/// CSV with header `x0,..,x{d-1},label`.
void write_dataset_csv(const Dataset& ds, const std::filesystem::path& path);

}  // namespace ntkadv
