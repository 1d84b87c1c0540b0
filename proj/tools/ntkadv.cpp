#include "ntkadv/errors.hpp"
#include "ntkadv/experiments.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitNumerical = 2;

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ntkadv::ConfigError("--config", "cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"NTK adversarial-robustness experiments"};
    app.require_subcommand(1);
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    std::vector<std::string> overrides;

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"gram", "kernel Gram matrix, spectrum and dataset export"},
        {"transfer", "finite-width net vs. NTK: gradient alignment and attack transfer"},
        {"attack", "attacks generated from the kernel predictor"},
        {"features", "eigen-feature usefulness/robustness and gradient images"},
        {"filter", "predictors restricted to the most robust features"},
        {"dynamics", "empirical NTK trajectories under standard and adversarial training"},
        {"lin-adv", "adversarial training continued on the linearized net"},
    };
    std::vector<CLI::App*> subs;
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--seed", seed, "root seed");
        sub->add_option("--set", overrides, "override a config field, e.g. --set attack.epsilon=0.2");
        subs.push_back(sub);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the parse error
        return code == 0 ? 0 : kExitConfig;
    }

    std::string name;
    CLI::App* chosen = nullptr;
    for (CLI::App* sub : subs)
        if (sub->parsed()) {
            chosen = sub;
            name = sub->get_name();
        }

    try {
        std::string text = config_path.empty() ? std::string("{}") : read_file(config_path);
        for (const auto& o : overrides) text = ntkadv::apply_override(text, o);
        ntkadv::ExperimentConfig cfg = ntkadv::parse_config(text, ntkadv::parse_experiment(name));
        if (chosen->count("--seed") > 0) cfg.seed = seed;
        if (!out_dir.empty()) cfg.out = out_dir;
        const ntkadv::RunResult r = ntkadv::run_experiment(cfg);
        std::cout << name << ": wrote " << r.files.size() << " files to " << cfg.out.string() << " in "
                  << r.wall_clock_seconds << " s\n";
        return 0;
    } catch (const ntkadv::ConfigError& e) {
        std::cerr << name << ": config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const ntkadv::ParameterError& e) {
        std::cerr << name << ": invalid parameter: " << e.what() << '\n';
        return kExitConfig;
    } catch (const ntkadv::FormatError& e) {
        std::cerr << name << ": input format error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const ntkadv::NumericalError& e) {
        std::cerr << name << ": numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const ntkadv::DomainError& e) {
        std::cerr << name << ": numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << name << ": error: " << e.what() << '\n';
        return kExitNumerical;
    }
}
