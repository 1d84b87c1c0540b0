#include "helpers.hpp"

#include "ntkadv/csv.hpp"
#include "ntkadv/dataset.hpp"
#include "ntkadv/errors.hpp"
#include "ntkadv/regression.hpp"

#include <doctest.h>

#include <set>

using namespace ntkadv;

namespace {

Eigen::VectorXd class_mean(const Dataset& ds, int c) {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(ds.dim());
    int count = 0;
    for (Eigen::Index i = 0; i < ds.size(); ++i)
        if (ds.labels[static_cast<std::size_t>(i)] == c) {
            m += ds.inputs.row(i).transpose();
            ++count;
        }
    return m / count;
}

// 10 images of 28x28; image i has every pixel equal to 20*i, label i.
void write_fixture(const std::filesystem::path& dir) {
    std::vector<std::vector<std::uint8_t>> px;
    std::vector<std::uint8_t> labels;
    for (int i = 0; i < 10; ++i) {
        px.emplace_back(28 * 28, static_cast<std::uint8_t>(20 * i));
        labels.push_back(static_cast<std::uint8_t>(i));
    }
    save_idx_images(dir / "img.idx", dir / "lab.idx", px, labels, 28, 28);
}

}  // namespace

TEST_CASE("blobs: small example is balanced and separated") {
    const Dataset ds = generate_gaussian_blobs(4, 2, 2, 10.0, 0);
    CHECK(ds.size() == 4);
    CHECK(std::count(ds.labels.begin(), ds.labels.end(), 0) == 2);
    CHECK(std::count(ds.labels.begin(), ds.labels.end(), 1) == 2);
    CHECK(ds.encoding == LabelEncoding::SignedBinary);
    // means sep*e_0 and sep*e_1 are sep*sqrt(2) apart; noise of two points per class is O(1)
    const double gap = (class_mean(ds, 0) - class_mean(ds, 1)).norm();
    CHECK(gap > 10.0);
    CHECK(gap < 20.0);
}

TEST_CASE("blobs: class means on the scaled basis vectors") {
    const Dataset ds = generate_gaussian_blobs(6000, 8, 3, 5.0, 11);
    for (int c = 0; c < 3; ++c) {
        Eigen::VectorXd expected = Eigen::VectorXd::Zero(8);
        expected(c) = 5.0;
        CHECK((class_mean(ds, c) - expected).cwiseAbs().maxCoeff() < 0.1);  // 5 sigma of the mean
    }
}

TEST_CASE("blobs: balanced for uneven n") {
    const Dataset ds = generate_gaussian_blobs(11, 5, 3, 1.0, 2);
    std::vector<int> counts(3, 0);
    for (int l : ds.labels) ++counts[static_cast<std::size_t>(l)];
    CHECK(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) <= 1);
    CHECK(ds.encoding == LabelEncoding::OneHot);
}

TEST_CASE("blobs: bit-identical per seed") {
    const Dataset a = generate_gaussian_blobs(100, 16, 2, 5.0, 7);
    const Dataset b = generate_gaussian_blobs(100, 16, 2, 5.0, 7);
    CHECK(std::memcmp(a.inputs.data(), b.inputs.data(), sizeof(double) * static_cast<std::size_t>(a.inputs.size())) == 0);
    CHECK(a.labels == b.labels);
    const Dataset c = generate_gaussian_blobs(100, 16, 2, 5.0, 8);
    CHECK(a.inputs != c.inputs);
}

TEST_CASE("blobs: invalid sizes") {
    CHECK_THROWS_AS((void)generate_gaussian_blobs(1, 4, 2, 1.0, 0), ParameterError);
    CHECK_THROWS_AS((void)generate_gaussian_blobs(10, 4, 1, 1.0, 0), ParameterError);
    CHECK_THROWS_AS((void)generate_gaussian_blobs(10, 4, 2, 0.0, 0), ParameterError);
    CHECK_THROWS_AS((void)generate_gaussian_blobs(10, 4, 2, -1.0, 0), ParameterError);
    CHECK_THROWS_AS((void)generate_gaussian_blobs(10, 2, 3, 1.0, 0), ParameterError);
}

TEST_CASE("blobs: high separation is learned exactly by the converged kernel predictor") {
    const Dataset ds = generate_gaussian_blobs(200, 16, 2, 8.0, 1);
    const Split s = split_dataset(ds, {0.5, 1, Normalization::None});
    const Predictor p(make_kernel(KernelModel::two_layer_frozen_relu()), s.train.inputs, label_matrix(s.train));
    int correct = 0;
    for (Eigen::Index i = 0; i < s.validation.size(); ++i) {
        const double f = p.predict_infinite_time(s.validation.inputs.row(i).transpose())(0);
        correct += (f > 0) == (s.validation.labels[static_cast<std::size_t>(i)] == 1);
    }
    CHECK(correct == s.validation.size());
}

TEST_CASE("label_matrix examples and round trip") {
    Dataset bin;
    bin.inputs = Eigen::MatrixXd::Zero(2, 1);
    bin.labels = {0, 1};
    const Eigen::MatrixXd y = label_matrix(bin);
    REQUIRE(y.rows() == 2);
    REQUIRE(y.cols() == 1);
    CHECK(y(0, 0) == -1.0);
    CHECK(y(1, 0) == 1.0);
    CHECK(decode_labels(y, LabelEncoding::SignedBinary) == bin.labels);

    Dataset oh;
    oh.inputs = Eigen::MatrixXd::Zero(1, 1);
    oh.labels = {2};
    oh.num_classes = 3;
    oh.encoding = LabelEncoding::OneHot;
    const Eigen::MatrixXd z = label_matrix(oh);
    REQUIRE(z.cols() == 3);
    CHECK(z(0, 0) == 0.0);
    CHECK(z(0, 1) == 0.0);
    CHECK(z(0, 2) == 1.0);

    Dataset empty;
    empty.inputs.resize(0, 3);
    CHECK(label_matrix(empty).rows() == 0);

    const Dataset many = generate_gaussian_blobs(50, 6, 5, 2.0, 3);
    CHECK(decode_labels(label_matrix(many), LabelEncoding::OneHot) == many.labels);
    const Eigen::MatrixXd m = label_matrix(many);
    CHECK((m.rowwise().sum().array() == 1.0).all());
}

TEST_CASE("validate rejects broken invariants") {
    Dataset ds = generate_gaussian_blobs(10, 3, 2, 1.0, 0);
    CHECK_NOTHROW(ds.validate());
    ds.labels[3] = 2;
    CHECK_THROWS_AS(ds.validate(), ParameterError);
    ds.labels[3] = 1;
    ds.inputs(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(ds.validate(), ParameterError);
}

TEST_CASE("unit normalization") {
    const Dataset ds = normalize(generate_gaussian_blobs(40, 5, 2, 3.0, 4), Normalization::UnitNorm);
    for (Eigen::Index i = 0; i < ds.size(); ++i) CHECK(std::abs(ds.inputs.row(i).norm() - 1.0) <= 1e-12);
    Dataset zero = ds;
    zero.inputs.row(7).setZero();
    CHECK_THROWS_AS((void)normalize(zero, Normalization::UnitNorm), ParameterError);
}

TEST_CASE("split: deterministic, balanced, disjoint") {
    const Dataset ds = generate_gaussian_blobs(101, 4, 2, 2.0, 5);
    const Split a = split_dataset(ds, {0.7, 9, Normalization::None});
    const Split b = split_dataset(ds, {0.7, 9, Normalization::None});
    CHECK(a.train.inputs == b.train.inputs);
    CHECK(a.validation.labels == b.validation.labels);
    CHECK(a.train.size() + a.validation.size() == ds.size());

    // every original row lands in exactly one side
    std::multiset<double> all, parts;
    for (Eigen::Index i = 0; i < ds.size(); ++i) all.insert(ds.inputs(i, 0));
    for (Eigen::Index i = 0; i < a.train.size(); ++i) parts.insert(a.train.inputs(i, 0));
    for (Eigen::Index i = 0; i < a.validation.size(); ++i) parts.insert(a.validation.inputs(i, 0));
    CHECK(all == parts);

    const auto zeros = std::count(a.train.labels.begin(), a.train.labels.end(), 0);
    const auto ones = std::count(a.train.labels.begin(), a.train.labels.end(), 1);
    CHECK(std::abs(zeros - ones) <= 1);

    const Split c = split_dataset(ds, {0.7, 10, Normalization::None});
    CHECK(c.train.inputs != a.train.inputs);
    CHECK_THROWS_AS((void)split_dataset(ds, {1.0, 0, Normalization::None}), ParameterError);
}

TEST_CASE("IDX: limit, scaling, shape") {
    const auto dir = testing::temp_dir("idx");
    write_fixture(dir);
    const Dataset ds = load_idx_images(dir / "img.idx", dir / "lab.idx", 5);
    CHECK(ds.size() == 5);
    CHECK(ds.dim() == 784);
    REQUIRE(ds.image_shape.has_value());
    CHECK(ds.image_shape->height == 28);
    for (Eigen::Index i = 0; i < 5; ++i) {
        CHECK(ds.inputs.row(i).minCoeff() == doctest::Approx(20.0 * static_cast<double>(i) / 255.0));
        CHECK(ds.inputs.row(i).maxCoeff() <= 1.0);
    }
    const Dataset all = load_idx_images(dir / "img.idx", dir / "lab.idx");
    CHECK(all.size() == 10);
    CHECK(all.num_classes == 10);
}

TEST_CASE("IDX: class filter remaps") {
    const auto dir = testing::temp_dir("idx_filter");
    write_fixture(dir);
    const Dataset ds = load_idx_images(dir / "img.idx", dir / "lab.idx", 0, std::vector<int>{5, 3});
    CHECK(ds.size() == 2);
    CHECK(ds.labels == std::vector<int>{0, 1});
    CHECK(ds.num_classes == 2);
    CHECK(ds.inputs(0, 0) == doctest::Approx(60.0 / 255.0));
    CHECK(ds.inputs(1, 0) == doctest::Approx(100.0 / 255.0));
}

TEST_CASE("IDX: malformed files") {
    const auto dir = testing::temp_dir("idx_bad");
    write_fixture(dir);
    const std::string img = testing::slurp(dir / "img.idx");
    const std::string lab = testing::slurp(dir / "lab.idx");
    auto put = [&](const std::string& name, const std::string& bytes) {
        std::ofstream(dir / name, std::ios::binary) << bytes;
    };

    std::string zero_magic = img;
    zero_magic[2] = 0;
    zero_magic[3] = 0;
    put("zero.idx", zero_magic);
    CHECK_THROWS_AS((void)load_idx_images(dir / "zero.idx", dir / "lab.idx"), FormatError);
    CHECK_THROWS_AS((void)load_idx_images(dir / "img.idx", dir / "img.idx"), FormatError);

    put("short.idx", img.substr(0, img.size() - 100));
    CHECK_THROWS_AS((void)load_idx_images(dir / "short.idx", dir / "lab.idx"), FormatError);
    put("short_header.idx", img.substr(0, 6));
    CHECK_THROWS_AS((void)load_idx_images(dir / "short_header.idx", dir / "lab.idx"), FormatError);

    std::string fewer = lab;
    fewer[7] = 9;  // count 9 vs 10 images
    put("fewer.idx", fewer);
    CHECK_THROWS_AS((void)load_idx_images(dir / "img.idx", dir / "fewer.idx"), FormatError);
    CHECK_THROWS_AS((void)load_idx_images(dir / "missing.idx", dir / "lab.idx"), FormatError);
}

TEST_CASE("dataset CSV export") {
    const auto dir = testing::temp_dir("dscsv");
    const Dataset ds = generate_gaussian_blobs(6, 3, 2, 1.0, 0);
    write_dataset_csv(ds, dir / "ds.csv");
    const CsvTable t = read_csv(dir / "ds.csv");
    CHECK(t.header == std::vector<std::string>{"x0", "x1", "x2", "label"});
    REQUIRE(t.rows.size() == 6);
    CHECK(std::stod(t.rows[2][1]) == ds.inputs(2, 1));  // round-trippable
    CHECK(t.rows[3][3] == "1");
}

TEST_CASE("majority rate") {
    Dataset ds;
    ds.inputs = Eigen::MatrixXd::Zero(4, 1);
    ds.labels = {0, 0, 0, 1};
    CHECK(majority_rate(ds) == 0.75);
}
