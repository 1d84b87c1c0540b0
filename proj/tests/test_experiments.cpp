#include "helpers.hpp"

#include "ntkadv/csv.hpp"
#include "ntkadv/errors.hpp"
#include "ntkadv/experiments.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sys/wait.h>

using namespace ntkadv;
using nlohmann::json;

namespace {

std::string field_of(const std::string& text, Experiment e) {
    try {
        (void)parse_config(text, e);
    } catch (const ConfigError& err) {
        return err.field();
    }
    return "";
}

// Small configs so every runner finishes in about a second.
json small_config(Experiment e) {
    json j = {{"seed", 3}, {"dataset", {{"n", 40}, {"d", 6}, {"separation", 3.0}}}};
    switch (e) {
        case Experiment::Transfer:
            j["train"] = {{"epochs", 6}, {"learning_rate", 0.05}};
            j["transfer"] = {{"widths", {200}}};
            j["kernel"] = {{"learning_rate", 0.05}};
            break;
        case Experiment::Dynamics:
            j["train"] = {{"epochs", 4}, {"hidden", {16}}, {"batch_size", 8}, {"learning_rate", 0.01}};
            j["dynamics"] = {{"tracked_batch", 8}, {"checkpoints", {0, 2, 4}}, {"cutoffs", {2, 4}}, {"top_p", 3}};
            break;
        case Experiment::LinearizedAdv:
            j["train"] = {{"epochs", 0}, {"hidden", {16}}, {"learning_rate", 0.01}, {"mode", "adv_fgsm"}};
            j["lin_adv"] = {{"linearize_epoch", 2}, {"continue_epochs", 2}};
            j["dynamics"] = {{"tracked_batch", 8}};
            break;
        case Experiment::Features:
            j["features"] = {{"max_features", 6}, {"gradient_features", 2}};
            break;
        default:
            break;
    }
    return j;
}

std::map<std::string, std::string> csv_bodies(const std::filesystem::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.path().extension() == ".csv") out[entry.path().filename().string()] = testing::slurp(entry.path());
    return out;
}

int run_cli(const std::string& args) {
    const int status = std::system((std::string(NTKADV_CLI) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("defaults") {
    const ExperimentConfig c = parse_config("{}", Experiment::Attack);
    CHECK(c.experiment == Experiment::Attack);
    CHECK(c.seed == 0);
    CHECK(c.dataset.source == "blobs");
    CHECK(c.epsilon() == doctest::Approx(0.3));  // 0.1 * separation
    CHECK(c.attack_config().steps == 1);
    const ExperimentConfig idx = parse_config(R"({"dataset": {"source": "idx", "image_path": "a", "label_path": "b"}})", Experiment::Gram);
    CHECK(idx.epsilon() == doctest::Approx(0.3));
    CHECK(idx.dataset.normalize == Normalization::None);
    const ExperimentConfig pgd = parse_config(R"({"attack": {"method": "pgd", "epsilon": 0.2, "steps": 10}})", Experiment::Attack);
    CHECK(pgd.attack_config().step_size == doctest::Approx(0.05));
}

TEST_CASE("config errors name the field") {
    CHECK(field_of(R"({"dataset": {"nn": 3}})", Experiment::Gram) == "dataset.nn");
    CHECK(field_of(R"({"bogus": 1})", Experiment::Gram) == "bogus");
    CHECK(field_of(R"({"attack": {"method": "fgsmx"}})", Experiment::Attack) == "attack.method");
    CHECK(field_of(R"({"train": {"mode": "fast"}})", Experiment::Transfer) == "train.mode");
    CHECK(field_of(R"({"dataset": {"normalize": "l2"}})", Experiment::Gram) == "dataset.normalize");
    CHECK(field_of(R"({"dataset": {"n": "ten"}})", Experiment::Gram) == "dataset.n");
    CHECK(field_of(R"({"dataset": {"n": 1.5}})", Experiment::Gram) == "dataset.n");
    CHECK(field_of(R"({"kernel": {"family": "conv"}})", Experiment::Gram) == "kernel.family");
    CHECK(field_of(R"({"attack": {"clamp": [0]}})", Experiment::Attack) == "attack.clamp");
    CHECK(field_of(R"({"seed": -1})", Experiment::Gram) == "seed");
    CHECK(field_of(R"({"experiment": "features"})", Experiment::Gram) == "experiment");
    CHECK(field_of(R"({"dataset": {"train_fraction": 1.0}})", Experiment::Gram) == "dataset.train_fraction");
    CHECK(field_of("{not json", Experiment::Gram) == "<document>");
    CHECK_THROWS_AS((void)parse_experiment("plot"), ConfigError);
    CHECK(parse_experiment("lin-adv") == Experiment::LinearizedAdv);
}

TEST_CASE("overrides") {
    std::string text = R"({"attack": {"epsilon": 0.1}})";
    text = apply_override(text, "attack.epsilon=0.25");
    text = apply_override(text, "train.hidden=[8,8]");
    text = apply_override(text, "attack.method=pgd");  // not JSON: kept as a string
    const ExperimentConfig c = parse_config(text, Experiment::Attack);
    CHECK(c.epsilon() == 0.25);
    CHECK(c.train.hidden == std::vector<int>{8, 8});
    CHECK(c.attack.method == AttackMethod::Pgd);
    CHECK_THROWS_AS((void)apply_override("{}", "noequals"), ConfigError);
    CHECK_THROWS_AS((void)apply_override(R"({"seed": 1})", "seed.x=2"), ConfigError);
}

TEST_CASE("config hash") {
    const ExperimentConfig a = parse_config("{}", Experiment::Gram);
    const ExperimentConfig b = parse_config(R"({"dataset": {"n": 200}})", Experiment::Gram);  // default spelled out
    const ExperimentConfig c = parse_config(R"({"dataset": {"n": 201}})", Experiment::Gram);
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a) != config_hash(c));
    ExperimentConfig moved = a;
    moved.out = "elsewhere";
    CHECK(config_hash(moved) == config_hash(a));
    CHECK(config_hash(a).size() == 16);
    // canonical JSON round trips through the parser
    CHECK(config_to_json(parse_config(config_to_json(c), Experiment::Gram)) == config_to_json(c));
}

TEST_CASE("every experiment runs, writes a manifest and reproduces its CSVs") {
    for (Experiment e : {Experiment::Gram, Experiment::Attack, Experiment::Features, Experiment::Filter,
                         Experiment::Transfer, Experiment::Dynamics, Experiment::LinearizedAdv}) {
        CAPTURE(to_string(e));
        ExperimentConfig cfg = parse_config(small_config(e).dump(), e);
        cfg.out = testing::temp_dir("exp_" + to_string(e) + "_a");
        const RunResult r1 = run_experiment(cfg);
        REQUIRE(r1.files.back() == "manifest.json");
        for (const auto& f : r1.files) CHECK(std::filesystem::exists(cfg.out / f));
        const json m = json::parse(testing::slurp(cfg.out / "manifest.json"));
        CHECK(m["config_hash"] == config_hash(cfg));
        CHECK(m["seed"] == 3);
        CHECK(m["experiment"] == to_string(e));
        CHECK(m.contains("version"));
        CHECK(m.contains("wall_clock_seconds"));
        // nothing outside the listed files
        std::size_t on_disk = 0;
        for ([[maybe_unused]] const auto& entry : std::filesystem::directory_iterator(cfg.out)) ++on_disk;
        CHECK(on_disk == r1.files.size());

        const auto first = csv_bodies(cfg.out);
        CHECK_FALSE(first.empty());
        cfg.out = testing::temp_dir("exp_" + to_string(e) + "_b");
        (void)run_experiment(cfg);
        CHECK(csv_bodies(cfg.out) == first);

        cfg.seed = 4;
        cfg.out = testing::temp_dir("exp_" + to_string(e) + "_c");
        (void)run_experiment(cfg);
        if (e != Experiment::Gram) CHECK(csv_bodies(cfg.out) != first);
    }
}

TEST_CASE("experiment outputs have the documented headers") {
    ExperimentConfig cfg = parse_config(small_config(Experiment::Features).dump(), Experiment::Features);
    cfg.out = testing::temp_dir("exp_headers");
    (void)run_experiment(cfg);
    CHECK(read_csv(cfg.out / "features.csv").header == std::vector<std::string>{"index", "eigenvalue", "usefulness", "robustness", "useful_flag"});
    const json meta = json::parse(testing::slurp(cfg.out / "feature_gradients.json"));
    CHECK(meta.contains("image_shaped"));
}

TEST_CASE("command line exit codes") {
    const auto dir = testing::temp_dir("cli");
    std::ofstream(dir / "ok.json") << small_config(Experiment::Gram).dump();
    CHECK(run_cli("gram --config " + (dir / "ok.json").string() + " --out " + (dir / "ok").string()) == 0);
    CHECK(std::filesystem::exists(dir / "ok" / "manifest.json"));
    CHECK(run_cli("attack --config " + (dir / "ok.json").string() + " --set attack.method=nope --out " + (dir / "x").string()) == 1);
    CHECK(run_cli("gram --config " + (dir / "missing.json").string()) == 1);
    CHECK(run_cli("gram --unknown-flag") == 1);
    CHECK(run_cli("bogus") == 1);
    // a diverging transfer run is a numerical failure
    json bad = small_config(Experiment::Transfer);
    bad["train"]["learning_rate"] = 1e4;
    bad["dataset"]["normalize"] = "none";
    bad["dataset"]["separation"] = 50.0;
    std::ofstream(dir / "bad.json") << bad.dump();
    CHECK(run_cli("transfer --config " + (dir / "bad.json").string() + " --out " + (dir / "bad").string()) == 2);

    // flag > file > default
    std::ofstream(dir / "seeded.json") << R"({"seed": 9, "dataset": {"n": 20, "d": 4}})";
    CHECK(run_cli("gram --config " + (dir / "seeded.json").string() + " --seed 11 --out " + (dir / "s").string()) == 0);
    CHECK(json::parse(testing::slurp(dir / "s" / "manifest.json"))["seed"] == 11);
    CHECK(run_cli("gram --config " + (dir / "seeded.json").string() + " --out " + (dir / "t").string()) == 0);
    CHECK(json::parse(testing::slurp(dir / "t" / "manifest.json"))["seed"] == 9);
}
