#pragma once

#include "ntkadv/attacks.hpp"
#include "ntkadv/dataset.hpp"
#include "ntkadv/nets.hpp"
#include "ntkadv/ntk.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ntkadv {

enum class Experiment { Gram, Transfer, Attack, Features, Filter, Dynamics, LinearizedAdv };

[[nodiscard]] Experiment parse_experiment(const std::string& name);
[[nodiscard]] std::string to_string(Experiment e);

struct DatasetSpec {
    std::string source = "blobs";  ///< blobs | idx
    int n = 200;
    int d = 16;
    int classes = 2;
    double separation = 3.0;
    std::filesystem::path image_path;
    std::filesystem::path label_path;
    std::size_t limit = 0;
    std::vector<int> class_subset;
    double train_fraction = 0.5;
    Normalization normalize = Normalization::UnitNorm;
};

struct KernelSpec {
    KernelModel model = KernelModel::two_layer_frozen_relu();
    double jitter_scale = kDefaultJitterScale;
    double learning_rate = 1e-2;
};

struct AttackSpec {
    AttackMethod method = AttackMethod::Fgsm;
    std::optional<double> epsilon;  ///< default: 0.1 * separation for blobs, 0.3 for images
    int steps = 1;
    std::optional<double> step_size;  ///< default 2.5 eps / steps
    std::optional<ClampBox> clamp;
    double time = kInfiniteTime;
};

struct TrainSpec {
    std::string architecture = "mlp";  ///< mlp | frozen_head
    int width = 1000;
    std::vector<int> hidden{64, 64};
    double learning_rate = 1e-2;
    int epochs = 100;
    TrainMode mode = TrainMode::Standard;
    int batch_size = 0;
    std::vector<int> log_epochs;
};

struct TransferSpec {
    std::vector<int> widths{1000};
    double epoch_to_time = 1.0;
};

struct FeaturesSpec {
    int max_features = 0;
    int pgd_steps = 1;
    int gradient_features = 8;
};

struct FilterSpec {
    std::vector<int> r_values;  ///< empty: 1, 2, 5, 10, 20, ... up to n
};

struct DynamicsSpec {
    int tracked_batch = 64;
    std::vector<int> checkpoints;  ///< empty: 11 evenly spaced epochs
    std::vector<int> cutoffs{10, 20};
    bool track_attacked = false;
    int top_p = 20;
};

struct LinAdvSpec {
    int linearize_epoch = 50;
    int continue_epochs = 50;
    bool compare_full = true;
};

struct ExperimentConfig {
    Experiment experiment = Experiment::Gram;
    std::uint64_t seed = 0;
    std::filesystem::path out = "out";
    DatasetSpec dataset;
    KernelSpec kernel;
    AttackSpec attack;
    TrainSpec train;
    TransferSpec transfer;
    FeaturesSpec features;
    FilterSpec filter;
    DynamicsSpec dynamics;
    LinAdvSpec lin_adv;

    [[nodiscard]] double epsilon() const;
    [[nodiscard]] AttackConfig attack_config() const;
};

/// Reads a JSON document. Unknown keys, wrong types and invalid values throw ConfigError with the
/// dotted path of the offending field.
[[nodiscard]] ExperimentConfig parse_config(const std::string& json_text, Experiment experiment);

/// Applies "a.b.c=value" to a JSON document; value is parsed as JSON, falling back to a string.
[[nodiscard]] std::string apply_override(const std::string& json_text, const std::string& assignment);

/// Canonical JSON of every resolved field (defaults included), excluding the output directory.
[[nodiscard]] std::string config_to_json(const ExperimentConfig& cfg);

/// 64-bit FNV-1a of config_to_json, hex.
[[nodiscard]] std::string config_hash(const ExperimentConfig& cfg);

[[nodiscard]] Split load_experiment_data(const ExperimentConfig& cfg);

struct RunResult {
    std::vector<std::string> files;  ///< relative to cfg.out, manifest last
    double wall_clock_seconds = 0.0;
};

/// Runs the experiment, writing every artifact and manifest.json under cfg.out.
RunResult run_experiment(const ExperimentConfig& cfg);

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ntkadv
