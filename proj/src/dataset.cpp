#include "ntkadv/dataset.hpp"

#include "ntkadv/csv.hpp"
#include "ntkadv/errors.hpp"
#include "ntkadv/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <string>

namespace ntkadv {

void Dataset::validate() const {
    if (num_classes < 2) throw ParameterError("dataset needs at least 2 classes");
    if (static_cast<Eigen::Index>(labels.size()) != inputs.rows())
        throw ParameterError("label count " + std::to_string(labels.size()) + " != input rows " +
                             std::to_string(inputs.rows()));
    if (encoding == LabelEncoding::SignedBinary && num_classes != 2)
        throw ParameterError("SignedBinary encoding requires exactly 2 classes");
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw ParameterError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                                 " outside [0," + std::to_string(num_classes) + ")");
    if (!inputs.allFinite()) throw ParameterError("dataset inputs contain non-finite values");
}

Dataset Dataset::select(const std::vector<Eigen::Index>& rows) const {
    Dataset out;
    out.num_classes = num_classes;
    out.encoding = encoding;
    out.image_shape = image_shape;
    out.inputs.resize(static_cast<Eigen::Index>(rows.size()), inputs.cols());
    out.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(rows[i]);
        out.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
    }
    return out;
}

Dataset generate_gaussian_blobs(int n, int d, int k, double separation, std::uint64_t seed) {
    if (k < 2) throw ParameterError("blobs need k >= 2 classes");
    if (n < k) throw ParameterError("blobs need n >= k");
    if (d < k) throw ParameterError("blobs place class means on the first k basis vectors, so d >= k");
    if (!(separation > 0)) throw ParameterError("separation must be positive");

    Dataset ds;
    ds.num_classes = k;
    ds.encoding = k == 2 ? LabelEncoding::SignedBinary : LabelEncoding::OneHot;
    ds.inputs.resize(n, d);
    ds.labels.resize(static_cast<std::size_t>(n));

    auto rng = make_rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int i = 0; i < n; ++i) {
        const int c = i % k;
        ds.labels[static_cast<std::size_t>(i)] = c;
        for (int j = 0; j < d; ++j) ds.inputs(i, j) = noise(rng);
        ds.inputs(i, c) += separation;
    }
    return ds;
}

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& what) {
    std::array<unsigned char, 4> b{};
    if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError("truncated header in " + what);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                                static_cast<char>(v)};
    out.write(b.data(), 4);
}

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

}  // namespace

Dataset load_idx_images(const std::filesystem::path& image_path, const std::filesystem::path& label_path,
                        std::size_t limit, const std::optional<std::vector<int>>& classes) {
    std::ifstream img(image_path, std::ios::binary);
    if (!img) throw FormatError("cannot open " + image_path.string());
    std::ifstream lab(label_path, std::ios::binary);
    if (!lab) throw FormatError("cannot open " + label_path.string());

    const std::string img_name = image_path.string();
    const std::string lab_name = label_path.string();
    if (auto magic = read_be32(img, img_name); magic != kIdxImagesMagic)
        throw FormatError("bad IDX image magic " + std::to_string(magic) + " in " + img_name);
    const std::uint32_t count = read_be32(img, img_name);
    const std::uint32_t rows = read_be32(img, img_name);
    const std::uint32_t cols = read_be32(img, img_name);
    if (auto magic = read_be32(lab, lab_name); magic != kIdxLabelsMagic)
        throw FormatError("bad IDX label magic " + std::to_string(magic) + " in " + lab_name);
    const std::uint32_t label_count = read_be32(lab, lab_name);
    if (label_count != count)
        throw FormatError("image/label count mismatch: " + std::to_string(count) + " vs " +
                          std::to_string(label_count));

    std::map<int, int> remap;
    if (classes) {
        if (classes->size() < 2) throw ParameterError("class subset needs at least 2 classes");
        std::vector<int> sorted = *classes;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i) remap[sorted[i]] = static_cast<int>(i);
    }

    const std::size_t pixels = std::size_t{rows} * cols;
    std::vector<unsigned char> buf(pixels);
    std::vector<std::vector<double>> kept_rows;
    std::vector<int> kept_labels;
    int max_label = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        if (!img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels)))
            throw FormatError("truncated image data in " + img_name + " at image " + std::to_string(i));
        char raw_label = 0;
        if (!lab.read(&raw_label, 1))
            throw FormatError("truncated label data in " + lab_name + " at label " + std::to_string(i));
        int label = static_cast<unsigned char>(raw_label);
        if (classes) {
            auto it = remap.find(label);
            if (it == remap.end()) continue;
            label = it->second;
        }
        if (limit != 0 && kept_labels.size() >= limit) continue;
        std::vector<double> row(pixels);
        for (std::size_t p = 0; p < pixels; ++p) row[p] = buf[p] / 255.0;
        kept_rows.push_back(std::move(row));
        kept_labels.push_back(label);
        max_label = std::max(max_label, label);
    }

    Dataset ds;
    ds.num_classes = classes ? static_cast<int>(classes->size()) : std::max(2, max_label + 1);
    ds.encoding = ds.num_classes == 2 ? LabelEncoding::SignedBinary : LabelEncoding::OneHot;
    ds.image_shape = ImageShape{static_cast<int>(rows), static_cast<int>(cols)};
    ds.inputs.resize(static_cast<Eigen::Index>(kept_rows.size()), static_cast<Eigen::Index>(pixels));
    for (std::size_t i = 0; i < kept_rows.size(); ++i)
        for (std::size_t p = 0; p < pixels; ++p)
            ds.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) = kept_rows[i][p];
    ds.labels = std::move(kept_labels);
    return ds;
}

void save_idx_images(const std::filesystem::path& image_path, const std::filesystem::path& label_path,
                     const std::vector<std::vector<std::uint8_t>>& pixels, const std::vector<std::uint8_t>& labels,
                     int height, int width) {
    if (pixels.size() != labels.size()) throw ParameterError("pixel/label count mismatch");
    std::ofstream img(image_path, std::ios::binary);
    std::ofstream lab(label_path, std::ios::binary);
    if (!img || !lab) throw std::runtime_error("cannot open IDX output files");
    write_be32(img, kIdxImagesMagic);
    write_be32(img, static_cast<std::uint32_t>(pixels.size()));
    write_be32(img, static_cast<std::uint32_t>(height));
    write_be32(img, static_cast<std::uint32_t>(width));
    for (const auto& image : pixels) {
        if (image.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
            throw ParameterError("image size does not match height*width");
        img.write(reinterpret_cast<const char*>(image.data()), static_cast<std::streamsize>(image.size()));
    }
    write_be32(lab, kIdxLabelsMagic);
    write_be32(lab, static_cast<std::uint32_t>(labels.size()));
    lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

Eigen::MatrixXd label_matrix(const Dataset& ds) {
    const auto n = static_cast<Eigen::Index>(ds.labels.size());
    if (ds.encoding == LabelEncoding::SignedBinary) {
        Eigen::MatrixXd y(n, 1);
        for (Eigen::Index i = 0; i < n; ++i) y(i, 0) = ds.labels[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
        return y;
    }
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, ds.num_classes);
    for (Eigen::Index i = 0; i < n; ++i) y(i, ds.labels[static_cast<std::size_t>(i)]) = 1.0;
    return y;
}

std::vector<int> decode_labels(const Eigen::MatrixXd& y, LabelEncoding encoding) {
    std::vector<int> labels(static_cast<std::size_t>(y.rows()));
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        if (encoding == LabelEncoding::SignedBinary) {
            labels[static_cast<std::size_t>(i)] = y(i, 0) > 0 ? 1 : 0;
        } else {
            Eigen::Index best = 0;
            y.row(i).maxCoeff(&best);
            labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
        }
    }
    return labels;
}

Dataset normalize(const Dataset& ds, Normalization mode) {
    Dataset out = ds;
    switch (mode) {
        case Normalization::None:
            break;
        case Normalization::PixelScale:
            out.inputs /= 255.0;
            break;
        case Normalization::UnitNorm:
            for (Eigen::Index i = 0; i < out.inputs.rows(); ++i) {
                const double norm = out.inputs.row(i).norm();
                if (!(norm > 0)) throw ParameterError("UnitNorm: row " + std::to_string(i) + " has zero norm");
                out.inputs.row(i) /= norm;
            }
            break;
    }
    return out;
}

Split split_dataset(const Dataset& ds, const SplitSpec& spec) {
    if (!(spec.train_fraction > 0 && spec.train_fraction < 1))
        throw ParameterError("train_fraction must lie in (0,1)");
    const Dataset normalized = normalize(ds, spec.normalize);

    std::vector<std::vector<Eigen::Index>> by_class(static_cast<std::size_t>(ds.num_classes));
    for (Eigen::Index i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);

    auto rng = make_rng(spec.seed);
    std::vector<Eigen::Index> train_rows;
    std::vector<Eigen::Index> val_rows;
    for (auto& members : by_class) {
        // Fisher-Yates with an explicit uniform draw: std::shuffle's algorithm is implementation-defined.
        for (std::size_t i = members.size(); i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(members[i - 1], members[pick(rng)]);
        }
        const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(members.size())));
        train_rows.insert(train_rows.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
        val_rows.insert(val_rows.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(val_rows.begin(), val_rows.end());
    return Split{normalized.select(train_rows), normalized.select(val_rows)};
}

double majority_rate(const Dataset& ds) {
    if (ds.labels.empty()) return 0.0;
    std::vector<std::size_t> counts(static_cast<std::size_t>(ds.num_classes), 0);
    for (int label : ds.labels) ++counts[static_cast<std::size_t>(label)];
    return static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(ds.labels.size());
}

void write_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
    std::vector<std::string> header;
    for (Eigen::Index j = 0; j < ds.dim(); ++j) header.push_back("x" + std::to_string(j));
    header.emplace_back("label");
    CsvWriter csv(path, header);
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
        for (Eigen::Index j = 0; j < ds.dim(); ++j) csv.field(ds.inputs(i, j));
        csv.field(ds.labels[static_cast<std::size_t>(i)]);
        csv.end_row();
    }
}

}  // namespace ntkadv
