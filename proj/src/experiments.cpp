#include "ntkadv/experiments.hpp"

#include "ntkadv/csv.hpp"
#include "ntkadv/dynamics.hpp"
#include "ntkadv/errors.hpp"
#include "ntkadv/features.hpp"
#include "ntkadv/regression.hpp"
#include "ntkadv/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

namespace ntkadv {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------- enums

Experiment parse_experiment(const std::string& name) {
    if (name == "gram") return Experiment::Gram;
    if (name == "transfer") return Experiment::Transfer;
    if (name == "attack") return Experiment::Attack;
    if (name == "features") return Experiment::Features;
    if (name == "filter") return Experiment::Filter;
    if (name == "dynamics") return Experiment::Dynamics;
    if (name == "lin-adv") return Experiment::LinearizedAdv;
    throw ConfigError("experiment", "unknown experiment '" + name + "'");
}

std::string to_string(Experiment e) {
    switch (e) {
        case Experiment::Gram: return "gram";
        case Experiment::Transfer: return "transfer";
        case Experiment::Attack: return "attack";
        case Experiment::Features: return "features";
        case Experiment::Filter: return "filter";
        case Experiment::Dynamics: return "dynamics";
        case Experiment::LinearizedAdv: return "lin-adv";
    }
    return "gram";
}

namespace {

Normalization parse_normalization(const std::string& s, const std::string& field) {
    if (s == "none") return Normalization::None;
    if (s == "unit_norm") return Normalization::UnitNorm;
    if (s == "pixel_scale") return Normalization::PixelScale;
    throw ConfigError(field, "unknown normalization '" + s + "' (expected none|unit_norm|pixel_scale)");
}

std::string normalization_name(Normalization n) {
    switch (n) {
        case Normalization::None: return "none";
        case Normalization::UnitNorm: return "unit_norm";
        case Normalization::PixelScale: return "pixel_scale";
    }
    return "none";
}

// ---------------------------------------------------------------- JSON reading

class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    [[nodiscard]] std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const json* find(const std::string& key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void read(const std::string& key, double& out) {
        if (const json* v = find(key)) out = as_double(*v, field(key));
    }
    void read(const std::string& key, int& out) {
        if (const json* v = find(key)) out = as_int(*v, field(key));
    }
    void read(const std::string& key, bool& out) {
        if (const json* v = find(key)) {
            if (!v->is_boolean()) throw ConfigError(field(key), "expected true or false");
            out = v->get<bool>();
        }
    }
    void read(const std::string& key, std::string& out) {
        if (const json* v = find(key)) out = as_string(*v, field(key));
    }
    void read(const std::string& key, std::filesystem::path& out) {
        if (const json* v = find(key)) out = as_string(*v, field(key));
    }
    void read(const std::string& key, std::size_t& out) {
        if (const json* v = find(key)) {
            const int i = as_int(*v, field(key));
            if (i < 0) throw ConfigError(field(key), "must be >= 0");
            out = static_cast<std::size_t>(i);
        }
    }
    void read(const std::string& key, std::vector<int>& out) {
        if (const json* v = find(key)) {
            if (!v->is_array()) throw ConfigError(field(key), "expected an array of integers");
            out.clear();
            for (std::size_t i = 0; i < v->size(); ++i)
                out.push_back(as_int((*v)[i], field(key) + "[" + std::to_string(i) + "]"));
        }
    }

    Section sub(const std::string& key) {
        static const json empty = json::object();
        const json* v = find(key);
        return Section(v ? *v : empty, field(key));
    }

    void finish() const {
        for (const auto& item : j_.items())
            if (!seen_.count(item.key())) throw ConfigError(field(item.key()), "unknown key");
    }

    static double as_double(const json& v, const std::string& f) {
        if (!v.is_number()) throw ConfigError(f, "expected a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) throw ConfigError(f, "must be finite");
        return d;
    }
    static int as_int(const json& v, const std::string& f) {
        if (!v.is_number_integer()) throw ConfigError(f, "expected an integer");
        const auto i = v.get<long long>();
        if (i < std::numeric_limits<int>::min() || i > std::numeric_limits<int>::max())
            throw ConfigError(f, "integer out of range");
        return static_cast<int>(i);
    }
    static std::string as_string(const json& v, const std::string& f) {
        if (!v.is_string()) throw ConfigError(f, "expected a string");
        return v.get<std::string>();
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void require(bool ok, const std::string& field, const std::string& message) {
    if (!ok) throw ConfigError(field, message);
}

void validate_config(const ExperimentConfig& c) {
    const auto& ds = c.dataset;
    require(ds.source == "blobs" || ds.source == "idx", "dataset.source", "expected blobs|idx");
    if (ds.source == "blobs") {
        require(ds.classes >= 2, "dataset.classes", "must be >= 2");
        require(ds.n >= ds.classes, "dataset.n", "must be >= dataset.classes");
        require(ds.d >= ds.classes, "dataset.d", "must be >= dataset.classes");
        require(ds.separation > 0, "dataset.separation", "must be > 0");
    } else {
        require(!ds.image_path.empty(), "dataset.image_path", "required for idx data");
        require(!ds.label_path.empty(), "dataset.label_path", "required for idx data");
        require(ds.normalize != Normalization::PixelScale, "dataset.normalize",
                "idx pixels are already scaled to [0,1]; use none or unit_norm");
        if (!ds.class_subset.empty()) require(ds.class_subset.size() >= 2, "dataset.class_subset", "needs >= 2 classes");
    }
    require(ds.train_fraction > 0 && ds.train_fraction < 1, "dataset.train_fraction", "must lie in (0, 1)");

    require(c.kernel.jitter_scale >= 0, "kernel.jitter_scale", "must be >= 0");
    require(c.kernel.learning_rate > 0, "kernel.learning_rate", "must be > 0");

    const auto& a = c.attack;
    if (a.epsilon) require(*a.epsilon >= 0, "attack.epsilon", "must be >= 0");
    require(a.steps >= 1, "attack.steps", "must be >= 1");
    if (a.step_size) require(*a.step_size > 0, "attack.step_size", "must be > 0");
    if (a.clamp) require(a.clamp->lo < a.clamp->hi, "attack.clamp", "needs lo < hi");
    require(a.time >= 0, "attack.time", "must be >= 0 or \"inf\"");

    const auto& t = c.train;
    require(t.architecture == "mlp" || t.architecture == "frozen_head", "train.architecture", "expected mlp|frozen_head");
    require(t.width >= 1, "train.width", "must be >= 1");
    for (int h : t.hidden) require(h >= 1, "train.hidden", "layer sizes must be >= 1");
    require(t.learning_rate > 0, "train.learning_rate", "must be > 0");
    require(t.epochs >= 0, "train.epochs", "must be >= 0");
    require(t.batch_size >= 0, "train.batch_size", "must be >= 0");
    for (int e : t.log_epochs) require(e >= 0 && e <= t.epochs, "train.log_epochs", "entries must lie in [0, epochs]");

    require(!c.transfer.widths.empty(), "transfer.widths", "needs at least one width");
    for (int w : c.transfer.widths) require(w >= 1, "transfer.widths", "widths must be >= 1");
    require(c.transfer.epoch_to_time > 0, "transfer.epoch_to_time", "must be > 0");
    if (c.experiment == Experiment::Transfer)
        require(c.kernel.model.family == KernelFamily::TwoLayerFrozenReLU, "kernel.family",
                "transfer compares against the frozen-head net; use two_layer");

    require(c.features.max_features >= 0, "features.max_features", "must be >= 0");
    require(c.features.pgd_steps >= 1, "features.pgd_steps", "must be >= 1");
    require(c.features.gradient_features >= 0, "features.gradient_features", "must be >= 0");

    for (int r : c.filter.r_values) require(r >= 1, "filter.r_values", "entries must be >= 1");

    const auto& dy = c.dynamics;
    require(dy.tracked_batch >= 1, "dynamics.tracked_batch", "must be >= 1");
    for (int p : dy.cutoffs) require(p >= 1, "dynamics.cutoffs", "entries must be >= 1");
    require(dy.top_p >= 1, "dynamics.top_p", "must be >= 1");
    for (std::size_t i = 0; i < dy.checkpoints.size(); ++i) {
        require(dy.checkpoints[i] >= 0 && dy.checkpoints[i] <= t.epochs, "dynamics.checkpoints",
                "entries must lie in [0, train.epochs]");
        if (i > 0) require(dy.checkpoints[i] > dy.checkpoints[i - 1], "dynamics.checkpoints", "must be strictly increasing");
    }

    require(c.lin_adv.linearize_epoch >= 0, "lin_adv.linearize_epoch", "must be >= 0");
    require(c.lin_adv.continue_epochs >= 1, "lin_adv.continue_epochs", "must be >= 1");
}

}  // namespace

double ExperimentConfig::epsilon() const {
    if (attack.epsilon) return *attack.epsilon;
    return dataset.source == "blobs" ? 0.1 * dataset.separation : 0.3;
}

AttackConfig ExperimentConfig::attack_config() const {
    AttackConfig a;
    a.epsilon = epsilon();
    a.steps = attack.steps;
    a.step_size = attack.step_size ? *attack.step_size : 2.5 * a.epsilon / attack.steps;
    if (attack.steps == 1) a.step_size = a.epsilon;
    a.clamp_box = attack.clamp;
    return a;
}

ExperimentConfig parse_config(const std::string& json_text, Experiment experiment) {
    json doc;
    try {
        doc = json::parse(json_text.empty() ? std::string("{}") : json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError("<document>", std::string("invalid JSON: ") + e.what());
    }
    ExperimentConfig c;
    c.experiment = experiment;
    Section root(doc, "");
    if (const json* v = root.find("experiment")) {
        if (parse_experiment(Section::as_string(*v, "experiment")) != experiment)
            throw ConfigError("experiment", "config names a different experiment than the subcommand");
    }
    if (const json* v = root.find("seed")) {
        if (!v->is_number_integer() || v->get<long long>() < 0) throw ConfigError("seed", "expected a non-negative integer");
        c.seed = v->get<std::uint64_t>();
    }
    root.read("out", c.out);

    {
        Section s = root.sub("dataset");
        auto& d = c.dataset;
        s.read("source", d.source);
        s.read("n", d.n);
        s.read("d", d.d);
        s.read("classes", d.classes);
        s.read("separation", d.separation);
        s.read("image_path", d.image_path);
        s.read("label_path", d.label_path);
        s.read("limit", d.limit);
        s.read("class_subset", d.class_subset);
        s.read("train_fraction", d.train_fraction);
        if (d.source == "idx") d.normalize = Normalization::None;
        std::string norm = normalization_name(d.normalize);
        s.read("normalize", norm);
        d.normalize = parse_normalization(norm, s.field("normalize"));
        s.finish();
    }
    {
        Section s = root.sub("kernel");
        std::string family = "two_layer";
        int depth = 1;
        s.read("family", family);
        s.read("depth", depth);
        if (family == "two_layer") {
            c.kernel.model = KernelModel::two_layer_frozen_relu();
        } else if (family == "fully_connected") {
            if (depth < 1) throw ConfigError(s.field("depth"), "must be >= 1");
            c.kernel.model = KernelModel::fully_connected_relu(depth);
        } else {
            throw ConfigError(s.field("family"), "unknown kernel family '" + family + "' (expected two_layer|fully_connected)");
        }
        s.read("jitter_scale", c.kernel.jitter_scale);
        s.read("learning_rate", c.kernel.learning_rate);
        s.finish();
    }
    {
        Section s = root.sub("attack");
        auto& a = c.attack;
        std::string method = to_string(a.method);
        s.read("method", method);
        try {
            a.method = parse_attack_method(method);
        } catch (const ParameterError& e) {
            throw ConfigError(s.field("method"), e.what());
        }
        if (const json* v = s.find("epsilon"); v && !v->is_null()) a.epsilon = Section::as_double(*v, s.field("epsilon"));
        s.read("steps", a.steps);
        if (const json* v = s.find("step_size"); v && !v->is_null())
            a.step_size = Section::as_double(*v, s.field("step_size"));
        if (const json* v = s.find("clamp"); v && !v->is_null()) {
            if (!v->is_array() || v->size() != 2) throw ConfigError(s.field("clamp"), "expected [lo, hi] or null");
            a.clamp = ClampBox{Section::as_double((*v)[0], s.field("clamp") + "[0]"),
                               Section::as_double((*v)[1], s.field("clamp") + "[1]")};
        }
        if (const json* v = s.find("time")) {
            if (v->is_string()) {
                if (v->get<std::string>() != "inf") throw ConfigError(s.field("time"), "expected a number or \"inf\"");
                a.time = kInfiniteTime;
            } else {
                a.time = Section::as_double(*v, s.field("time"));
            }
        }
        s.finish();
    }
    {
        Section s = root.sub("train");
        auto& t = c.train;
        s.read("architecture", t.architecture);
        s.read("width", t.width);
        s.read("hidden", t.hidden);
        s.read("learning_rate", t.learning_rate);
        s.read("epochs", t.epochs);
        std::string mode = to_string(t.mode);
        s.read("mode", mode);
        try {
            t.mode = parse_train_mode(mode);
        } catch (const ParameterError& e) {
            throw ConfigError(s.field("mode"), e.what());
        }
        s.read("batch_size", t.batch_size);
        s.read("log_epochs", t.log_epochs);
        s.finish();
    }
    {
        Section s = root.sub("transfer");
        s.read("widths", c.transfer.widths);
        s.read("epoch_to_time", c.transfer.epoch_to_time);
        s.finish();
    }
    {
        Section s = root.sub("features");
        s.read("max_features", c.features.max_features);
        s.read("pgd_steps", c.features.pgd_steps);
        s.read("gradient_features", c.features.gradient_features);
        s.finish();
    }
    {
        Section s = root.sub("filter");
        s.read("r_values", c.filter.r_values);
        s.finish();
    }
    {
        Section s = root.sub("dynamics");
        auto& d = c.dynamics;
        s.read("tracked_batch", d.tracked_batch);
        s.read("checkpoints", d.checkpoints);
        s.read("cutoffs", d.cutoffs);
        s.read("track_attacked", d.track_attacked);
        s.read("top_p", d.top_p);
        s.finish();
    }
    {
        Section s = root.sub("lin_adv");
        s.read("linearize_epoch", c.lin_adv.linearize_epoch);
        s.read("continue_epochs", c.lin_adv.continue_epochs);
        s.read("compare_full", c.lin_adv.compare_full);
        s.finish();
    }
    root.finish();
    validate_config(c);
    return c;
}

std::string apply_override(const std::string& json_text, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like path=value");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json doc;
    try {
        doc = json::parse(json_text.empty() ? std::string("{}") : json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError("<document>", std::string("invalid JSON: ") + e.what());
    }
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError(path, "empty path component");
        if (!node->is_object()) throw ConfigError(path, "cannot descend into a non-object");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
    return doc.dump(2);
}

namespace {

json config_json(const ExperimentConfig& c) {
    json j;
    j["experiment"] = to_string(c.experiment);
    j["seed"] = c.seed;
    const auto& d = c.dataset;
    j["dataset"] = {{"source", d.source},
                    {"n", d.n},
                    {"d", d.d},
                    {"classes", d.classes},
                    {"separation", d.separation},
                    {"image_path", d.image_path.string()},
                    {"label_path", d.label_path.string()},
                    {"limit", d.limit},
                    {"class_subset", d.class_subset},
                    {"train_fraction", d.train_fraction},
                    {"normalize", normalization_name(d.normalize)}};
    j["kernel"] = {{"family", c.kernel.model.family == KernelFamily::TwoLayerFrozenReLU ? "two_layer" : "fully_connected"},
                   {"depth", c.kernel.model.depth},
                   {"jitter_scale", c.kernel.jitter_scale},
                   {"learning_rate", c.kernel.learning_rate}};
    const AttackConfig ac = c.attack_config();
    j["attack"] = {{"method", to_string(c.attack.method)},
                   {"epsilon", ac.epsilon},
                   {"steps", ac.steps},
                   {"step_size", ac.step_size},
                   {"clamp", c.attack.clamp ? json::array({c.attack.clamp->lo, c.attack.clamp->hi}) : json()},
                   {"time", std::isinf(c.attack.time) ? json("inf") : json(c.attack.time)}};
    const auto& t = c.train;
    j["train"] = {{"architecture", t.architecture},  {"width", t.width},           {"hidden", t.hidden},
                  {"learning_rate", t.learning_rate}, {"epochs", t.epochs},         {"mode", to_string(t.mode)},
                  {"batch_size", t.batch_size},       {"log_epochs", t.log_epochs}};
    j["transfer"] = {{"widths", c.transfer.widths}, {"epoch_to_time", c.transfer.epoch_to_time}};
    j["features"] = {{"max_features", c.features.max_features},
                     {"pgd_steps", c.features.pgd_steps},
                     {"gradient_features", c.features.gradient_features}};
    j["filter"] = {{"r_values", c.filter.r_values}};
    j["dynamics"] = {{"tracked_batch", c.dynamics.tracked_batch},
                     {"checkpoints", c.dynamics.checkpoints},
                     {"cutoffs", c.dynamics.cutoffs},
                     {"track_attacked", c.dynamics.track_attacked},
                     {"top_p", c.dynamics.top_p}};
    j["lin_adv"] = {{"linearize_epoch", c.lin_adv.linearize_epoch},
                    {"continue_epochs", c.lin_adv.continue_epochs},
                    {"compare_full", c.lin_adv.compare_full}};
    return j;
}

}  // namespace

std::string config_to_json(const ExperimentConfig& cfg) { return config_json(cfg).dump(2); }

std::string config_hash(const ExperimentConfig& cfg) {
    const std::string text = config_to_json(cfg);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

Split load_experiment_data(const ExperimentConfig& cfg) {
    const auto& d = cfg.dataset;
    Dataset ds;
    if (d.source == "blobs") {
        ds = generate_gaussian_blobs(d.n, d.d, d.classes, d.separation, substream_seed(cfg.seed, "dataset"));
    } else {
        std::optional<std::vector<int>> subset;
        if (!d.class_subset.empty()) subset = d.class_subset;
        ds = load_idx_images(d.image_path, d.label_path, d.limit, subset);
    }
    SplitSpec spec;
    spec.train_fraction = d.train_fraction;
    spec.seed = substream_seed(cfg.seed, "split");
    spec.normalize = d.normalize;
    return split_dataset(ds, spec);
}

// ---------------------------------------------------------------- runners

namespace {

class Outputs {
public:
    explicit Outputs(std::filesystem::path dir) : dir_(std::move(dir)) {}
    std::filesystem::path operator()(const std::string& name) {
        files_.push_back(name);
        return dir_ / name;
    }
    void json_file(const std::string& name, const json& j) {
        std::ofstream out((*this)(name));
        if (!out) throw FormatError("cannot write " + (dir_ / name).string());
        out << j.dump(2) << '\n';
    }
    [[nodiscard]] const std::vector<std::string>& files() const noexcept { return files_; }

private:
    std::filesystem::path dir_;
    std::vector<std::string> files_;
};

Eigen::Index output_dim(const Dataset& ds) { return ds.encoding == LabelEncoding::SignedBinary ? 1 : ds.num_classes; }

Predictor make_predictor(const ExperimentConfig& cfg, const Dataset& train, double learning_rate) {
    return Predictor(make_kernel(cfg.kernel.model), train.inputs, label_matrix(train), learning_rate,
                     cfg.kernel.jitter_scale);
}

std::unique_ptr<Network> make_network(const ExperimentConfig& cfg, Eigen::Index d, Eigen::Index k,
                                      std::uint64_t seed) {
    if (cfg.train.architecture == "frozen_head")
        return std::make_unique<FrozenHeadNet>(init_net(cfg.train.width, static_cast<int>(d), static_cast<int>(k), seed));
    std::vector<int> sizes{static_cast<int>(d)};
    sizes.insert(sizes.end(), cfg.train.hidden.begin(), cfg.train.hidden.end());
    sizes.push_back(static_cast<int>(k));
    return std::make_unique<Mlp>(make_mlp(sizes, seed));
}

TrainConfig train_config(const ExperimentConfig& cfg, TrainMode mode, int epochs, bool eval_robust) {
    TrainConfig tc;
    tc.learning_rate = cfg.train.learning_rate;
    tc.epochs = epochs;
    tc.mode = mode;
    tc.attack = cfg.attack_config();
    tc.batch_size = cfg.train.batch_size;
    tc.seed = substream_seed(cfg.seed, "minibatch");
    tc.eval_robust = eval_robust;
    return tc;
}

TrainMode adversarial_mode(const ExperimentConfig& cfg) {
    if (cfg.train.mode != TrainMode::Standard) return cfg.train.mode;
    return cfg.attack.steps == 1 ? TrainMode::AdvFGSM : TrainMode::AdvPGD;
}

std::vector<int> default_log_epochs(int epochs) {
    std::vector<int> out;
    for (int base = 1; base <= epochs; base *= 10)
        for (int f : {1, 2, 5})
            if (base * f <= epochs) out.push_back(base * f);
    if (out.empty() || out.back() != epochs) out.push_back(epochs);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::vector<Eigen::Index> first_rows(Eigen::Index n, int count) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(n, count); ++i) rows.push_back(i);
    return rows;
}

json gram_experiment(const ExperimentConfig& cfg, const Split& data, Outputs& out) {
    const GramMatrix g = gram(cfg.kernel.model, data.train.inputs, cfg.kernel.jitter_scale);
    save_gram(g, out("gram.ntkg"));
    const EigenSystem e = eigendecompose(g);
    CsvWriter csv(out("eigenvalues.csv"), {"index", "eigenvalue"});
    for (Eigen::Index i = 0; i < e.size(); ++i) csv.field(static_cast<long long>(i + 1)).field(e.eigenvalues(i)).end_row();
    write_dataset_csv(data.train, out("dataset_train.csv"));
    write_dataset_csv(data.validation, out("dataset_validation.csv"));
    return {{"n", g.values.rows()},
            {"jitter", g.jitter},
            {"largest_eigenvalue", e.eigenvalues(0)},
            {"smallest_eigenvalue", e.eigenvalues(e.size() - 1)}};
}

json attack_experiment(const ExperimentConfig& cfg, const Split& data, Outputs& out) {
    const Predictor pred = make_predictor(cfg, data.train, cfg.kernel.learning_rate);
    const KernelClassifier target(pred, cfg.attack.time);
    const AttackFn attack = make_kernel_attack(cfg.attack.method, pred, cfg.attack.time, cfg.attack_config());
    const auto records = attack_dataset(target, data.validation, attack);
    write_attack_csv(records, out("attacks.csv"));
    return {{"clean_accuracy", clean_accuracy(target, data.validation)},
            {"robust_accuracy", robust_accuracy(records)},
            {"epsilon", cfg.epsilon()},
            {"method", to_string(cfg.attack.method)}};
}

json features_experiment(const ExperimentConfig& cfg, const Split& data, Outputs& out) {
    const Predictor pred = make_predictor(cfg, data.train, cfg.kernel.learning_rate);
    const auto scores =
        score_features(pred, data.validation, cfg.epsilon(), cfg.features.pgd_steps, cfg.features.max_features);
    write_feature_scores_csv(scores, out("features.csv"));

    const Eigen::VectorXd x = data.validation.inputs.row(0).transpose();
    const int label = data.validation.labels.front();
    const int count = std::min<int>(cfg.features.gradient_features, static_cast<int>(pred.size()));
    std::vector<std::string> header{"index"};
    for (Eigen::Index j = 0; j < x.size(); ++j) header.push_back("g" + std::to_string(j));
    CsvWriter grid(out("feature_gradients.csv"), header);
    std::vector<int> indices;
    for (int i = 1; i <= count; ++i) {
        const FeatureFunction f = make_feature(pred, i);
        const Eigen::VectorXd g = feature_gradient_image(f, x, label);
        grid.field(i);
        for (Eigen::Index j = 0; j < g.size(); ++j) grid.field(g(j));
        grid.end_row();
        indices.push_back(i);
    }
    const auto& shape = data.validation.image_shape;
    out.json_file("feature_gradients.json", {{"height", shape ? shape->height : 1},
                                             {"width", shape ? shape->width : static_cast<int>(x.size())},
                                             {"channels", 1},
                                             {"image_shaped", shape.has_value()},
                                             {"example_id", 0},
                                             {"label", label},
                                             {"features", indices}});

    if (pred.num_outputs() == 1) {
        CsvWriter dec(out("gradient_decomposition.csv"), {"example_id", "index", "alpha", "anomaly"});
        const Eigen::Index probes = std::min<Eigen::Index>(data.validation.size(), 10);
        for (Eigen::Index e = 0; e < probes; ++e) {
            const int y = signed_label(data.validation.labels[static_cast<std::size_t>(e)]);
            const GradientDecomposition gd = gradient_decomposition_coeffs(pred, data.validation.inputs.row(e).transpose(), y);
            for (Eigen::Index i = 0; i < gd.alpha.size(); ++i) {
                const bool anomaly =
                    std::find(gd.anomalies.begin(), gd.anomalies.end(), static_cast<int>(i + 1)) != gd.anomalies.end();
                dec.field(static_cast<long long>(e)).field(static_cast<long long>(i + 1)).field(gd.alpha(i)).field(anomaly);
                dec.end_row();
            }
        }
    }
    const auto useful = std::count_if(scores.begin(), scores.end(), [](const FeatureScore& s) { return s.useful_flag; });
    return {{"features_scored", scores.size()}, {"useful_features", useful}, {"epsilon", cfg.epsilon()}};
}

json filter_experiment(const ExperimentConfig& cfg, const Split& data, Outputs& out) {
    const Predictor pred = make_predictor(cfg, data.train, cfg.kernel.learning_rate);
    const auto scores = score_features(pred, data.validation, cfg.epsilon(), cfg.features.pgd_steps);
    write_feature_scores_csv(scores, out("features.csv"));
    const std::vector<int> ranking = robustness_ranking(scores);
    std::vector<int> rs = cfg.filter.r_values;
    const int n = static_cast<int>(pred.size());
    if (rs.empty()) {
        for (int base = 1; base < n; base *= 10)
            for (int f : {1, 2, 5})
                if (base * f < n) rs.push_back(base * f);
        rs.push_back(n);
    }
    CsvWriter csv(out("filter.csv"), {"r", "clean_acc", "robust_acc"});
    const AttackConfig ac = cfg.attack_config();
    for (int r : rs) {
        if (r > n) throw ConfigError("filter.r_values", "r=" + std::to_string(r) + " exceeds n=" + std::to_string(n));
        const Predictor fp = filtered_predictor(pred, ranking, r);
        const KernelClassifier model(fp, kInfiniteTime);
        const AttackFn attack = make_kernel_attack(cfg.attack.method, fp, kInfiniteTime, ac);
        csv.field(r).field(clean_accuracy(model, data.validation)).field(robust_accuracy(model, data.validation, attack));
        csv.end_row();
    }
    CsvWriter rank(out("ranking.csv"), {"rank", "index"});
    for (std::size_t i = 0; i < ranking.size(); ++i) rank.field(static_cast<long long>(i + 1)).field(ranking[i]).end_row();
    return {{"n", n}, {"epsilon", cfg.epsilon()}};
}

json transfer_experiment(const ExperimentConfig& cfg, const Split& data, Outputs& out) {
    const Predictor pred = make_predictor(cfg, data.train, cfg.train.learning_rate);
    const AttackConfig ac = cfg.attack_config();
    std::vector<int> logs = cfg.train.log_epochs.empty() ? default_log_epochs(cfg.train.epochs) : cfg.train.log_epochs;
    std::sort(logs.begin(), logs.end());
    const Eigen::Index k = output_dim(data.train);
    json summary = json::array();
    for (int m : cfg.transfer.widths) {
        FrozenHeadNet net = init_net(m, static_cast<int>(data.train.dim()), static_cast<int>(k),
                                     substream_seed(cfg.seed, "init_w" + std::to_string(m)));
        const FrozenHeadNet init = net;
        const std::string tag = "w" + std::to_string(m);
        CsvWriter csv(out("transfer_" + tag + ".csv"),
                      {"epoch", "ntk_time", "cosine_mean", "cosine_defined", "clean_acc", "ntk_clean_acc",
                       "robust_acc_own", "robust_acc_kernel"});
        CsvWriter cos_csv(out("cosine_" + tag + ".csv"), {"epoch", "example_id", "cosine"});
        std::optional<double> last_cos;
        double last_own = 0.0;
        double last_ker = 0.0;
        const EpochHook hook = [&](int epoch, const Network& current) {
            if (!std::binary_search(logs.begin(), logs.end(), epoch)) return;
            const double t = epoch * cfg.transfer.epoch_to_time;
            const auto cos = gradient_cosine_similarity(current, init, pred, data.validation, epoch,
                                                        cfg.transfer.epoch_to_time);
            for (std::size_t i = 0; i < cos.size(); ++i)
                cos_csv.field(epoch).field(static_cast<long long>(i)).field(cos[i]).end_row();
            const auto defined = std::count_if(cos.begin(), cos.end(), [](const auto& v) { return v.has_value(); });
            const CenteredNetClassifier model(current, init);
            const KernelClassifier kmodel(pred, t);
            const double own = robust_accuracy(model, data.validation, make_attack(AttackMethod::Fgsm, model, ac));
            const double ker =
                robust_accuracy(model, data.validation, make_kernel_attack(AttackMethod::Fgsm, pred, t, ac));
            last_cos = mean_defined(cos);
            last_own = own;
            last_ker = ker;
            csv.field(epoch).field(t).field(last_cos).field(static_cast<long long>(defined));
            csv.field(clean_accuracy(model, data.validation)).field(clean_accuracy(kmodel, data.validation));
            csv.field(own).field(ker).end_row();
        };
        const TrainTrace trace = train(net, data.train, &data.validation,
                                       train_config(cfg, cfg.train.mode, cfg.train.epochs, false), hook);
        write_trace_csv(trace, out("trace_" + tag + ".csv"));
        save_checkpoint(net, out("checkpoint_" + tag + ".ntkw"));
        summary.push_back({{"width", m},
                           {"final_cosine_mean", last_cos ? json(*last_cos) : json()},
                           {"final_robust_acc_own", last_own},
                           {"final_robust_acc_kernel", last_ker}});
    }
    return {{"widths", summary}, {"epsilon", cfg.epsilon()}};
}

void write_polar_csv(const std::vector<PolarPoint>& polar, const std::vector<int>& epochs,
                     const std::filesystem::path& path) {
    CsvWriter csv(path, {"epoch", "r", "theta"});
    for (std::size_t i = 0; i < polar.size(); ++i) csv.field(epochs[i]).field(polar[i].r).field(polar[i].theta).end_row();
}

json dynamics_experiment(const ExperimentConfig& cfg, const Split& data, Outputs& out) {
    DynamicsConfig dyn;
    dyn.tracked_batch = first_rows(data.train.size(), cfg.dynamics.tracked_batch);
    dyn.cutoffs = cfg.dynamics.cutoffs;
    dyn.checkpoints = cfg.dynamics.checkpoints;
    if (dyn.checkpoints.empty()) {
        for (int i = 0; i <= 10; ++i) dyn.checkpoints.push_back(cfg.train.epochs * i / 10);
        dyn.checkpoints.erase(std::unique(dyn.checkpoints.begin(), dyn.checkpoints.end()), dyn.checkpoints.end());
    }
    const Eigen::Index k = output_dim(data.train);
    const std::uint64_t init_seed = substream_seed(cfg.seed, "init");
    const int top_p = std::min<int>(cfg.dynamics.top_p, static_cast<int>(dyn.tracked_batch.size()));

    json summary;
    const auto run = [&](const std::string& name, TrainMode mode, bool attacked) {
        auto net = make_network(cfg, data.train.dim(), k, init_seed);
        DynamicsConfig d = dyn;
        d.track_attacked = attacked;
        const DynamicsResult r = record_dynamics(*net, data.train, train_config(cfg, mode, cfg.train.epochs, false), d);
        std::vector<int> epochs;
        for (const auto& s : r.snapshots) epochs.push_back(s.epoch);
        write_trajectory_csv(r.snapshots, out("trajectory_" + name + ".csv"));
        write_matrix_csv(distance_heatmap(r.kernels), out("heatmap_" + name + ".csv"));
        write_polar_csv(top_subspace_polar(r.kernels, top_p), epochs, out("top_polar_" + name + ".csv"));
        if (!attacked) write_trace_csv(r.trace, out("trace_" + name + ".csv"));
        const auto& last = r.snapshots.back();
        json s = {{"final_epoch", last.epoch}, {"final_frob_norm", last.frobenius_norm}, {"aborted", r.aborted}};
        for (const auto& [p, v] : last.concentration) s["final_conc_p" + std::to_string(p)] = v;
        if (r.aborted) s["abort_epoch"] = r.abort_epoch;
        summary[name] = s;
    };
    run("standard", TrainMode::Standard, false);
    run("adversarial", adversarial_mode(cfg), false);
    if (cfg.dynamics.track_attacked) run("adversarial_attacked", adversarial_mode(cfg), true);
    return summary;
}

json lin_adv_experiment(const ExperimentConfig& cfg, const Split& data, Outputs& out) {
    const Eigen::Index k = output_dim(data.train);
    const TrainMode mode = adversarial_mode(cfg);
    auto net = make_network(cfg, data.train.dim(), k, substream_seed(cfg.seed, "init"));
    const TrainTrace pre = train(*net, data.train, &data.validation,
                                 train_config(cfg, mode, cfg.lin_adv.linearize_epoch, true));
    write_trace_csv(pre, out("trace_pre.csv"));

    const Dataset batch = data.train.select(first_rows(data.train.size(), cfg.dynamics.tracked_batch));
    const TrainConfig cont = train_config(cfg, mode, cfg.lin_adv.continue_epochs, true);

    json summary;
    const auto kernel_tracker = [&](const std::string& file, double& max_step) {
        auto csv = std::make_shared<CsvWriter>(out(file), std::vector<std::string>{"epoch", "frob_norm", "dist_to_prev",
                                                                                   "dist_to_linearization"});
        auto first = std::make_shared<Eigen::MatrixXd>();
        auto prev = std::make_shared<Eigen::MatrixXd>();
        return EpochHook([csv, first, prev, &batch, &max_step](int epoch, const Network& current) {
            const Eigen::MatrixXd K = current.empirical_ntk(batch.inputs);
            std::optional<double> step;
            std::optional<double> total;
            if (prev->size() > 0) {
                step = kernel_distance(K, *prev);
                total = kernel_distance(K, *first);
                max_step = std::max(max_step, *step);
            } else {
                *first = K;
            }
            *prev = K;
            csv->field(epoch).field(K.norm()).field(step).field(total).end_row();
        });
    };

    double lin_max = 0.0;
    const LinearizedRun lin =
        linearize_and_continue(*net, data.train, &data.validation, cont, kernel_tracker("kernel_linearized.csv", lin_max));
    write_trace_csv(lin.trace, out("trace_linearized.csv"));
    summary["linearized"] = {{"max_consecutive_kernel_distance", lin_max},
                             {"final_val_acc", lin.trace.records.back().val_acc ? json(*lin.trace.records.back().val_acc) : json()},
                             {"final_robust_val_acc", lin.trace.records.back().robust_val_acc
                                                          ? json(*lin.trace.records.back().robust_val_acc)
                                                          : json()}};
    if (cfg.lin_adv.compare_full) {
        double full_max = 0.0;
        auto full = net->clone();
        const TrainTrace t = train(*full, data.train, &data.validation, cont, kernel_tracker("kernel_full.csv", full_max));
        write_trace_csv(t, out("trace_full.csv"));
        summary["full"] = {{"max_consecutive_kernel_distance", full_max},
                           {"final_val_acc", t.records.back().val_acc ? json(*t.records.back().val_acc) : json()},
                           {"final_robust_val_acc",
                            t.records.back().robust_val_acc ? json(*t.records.back().robust_val_acc) : json()}};
    }
    return summary;
}

std::string utc_now() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg) {
    validate_config(cfg);
    std::error_code ec;
    std::filesystem::create_directories(cfg.out, ec);
    if (ec || !std::filesystem::is_directory(cfg.out)) throw ConfigError("out", "cannot create " + cfg.out.string());

    const auto start = std::chrono::steady_clock::now();
    const std::string started = utc_now();
    Outputs out(cfg.out);
    const Split data = load_experiment_data(cfg);
    json summary;
    switch (cfg.experiment) {
        case Experiment::Gram: summary = gram_experiment(cfg, data, out); break;
        case Experiment::Attack: summary = attack_experiment(cfg, data, out); break;
        case Experiment::Features: summary = features_experiment(cfg, data, out); break;
        case Experiment::Filter: summary = filter_experiment(cfg, data, out); break;
        case Experiment::Transfer: summary = transfer_experiment(cfg, data, out); break;
        case Experiment::Dynamics: summary = dynamics_experiment(cfg, data, out); break;
        case Experiment::LinearizedAdv: summary = lin_adv_experiment(cfg, data, out); break;
    }
    out.json_file("summary.json", summary);

    RunResult result;
    result.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json manifest;
    manifest["experiment"] = to_string(cfg.experiment);
    manifest["seed"] = cfg.seed;
    manifest["config_hash"] = config_hash(cfg);
    manifest["config"] = config_json(cfg);
    manifest["version"] = kVersion;
    manifest["eigen_version"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                std::to_string(EIGEN_MINOR_VERSION);
    manifest["started_at_utc"] = started;
    manifest["wall_clock_seconds"] = result.wall_clock_seconds;
    manifest["files"] = out.files();
    out.json_file("manifest.json", manifest);
    result.files = out.files();
    return result;
}

}  // namespace ntkadv
