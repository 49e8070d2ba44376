// cfrpn: train, compare, gradcheck, params and trace subcommands.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cfrpn/allocator.hpp"
#include "cfrpn/checkpoint.hpp"
#include "cfrpn/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitGradcheck = 3;

struct Common {
    std::string config;
    std::string out = "runs";
    std::string seeds;
    std::string data_dir;
    std::string checkpoint;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out) {
    cmd->add_option("--config", c.config, "flat key=value config file");
    if (needs_out) cmd->add_option("--out", c.out, "output directory")->capture_default_str();
    cmd->add_option("--seeds", c.seeds, "comma-separated seed list (run.seeds)");
    cmd->add_option("--data-dir", c.data_dir, "dataset directory (data.dir)");
    cmd->add_option("--override", c.overrides, "key=value override, repeatable");
    // any config key may also be passed as --key=value
    cmd->allow_extras();
}

cfrpn::ExperimentConfig resolve(const Common& c, const std::vector<std::string>& extras) {
    cfrpn::FlatConfig flat = c.config.empty() ? cfrpn::FlatConfig{} : cfrpn::FlatConfig::load(c.config);
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const std::string& e = extras[i];
        if (e.rfind("--", 0) != 0) throw cfrpn::ConfigError("unexpected argument '" + e + "'");
        std::string kv = e.substr(2);
        if (kv.find('=') == std::string::npos) {
            if (i + 1 >= extras.size()) throw cfrpn::ConfigError("flag " + e + " needs a value");
            kv += "=" + extras[++i];
        }
        flat.apply_override(kv);
    }
    for (const auto& o : c.overrides) flat.apply_override(o);
    if (!c.seeds.empty()) flat.set("run.seeds", c.seeds);
    if (!c.data_dir.empty()) flat.set("data.dir", c.data_dir);
    if (!c.checkpoint.empty()) flat.set("trace.checkpoint", c.checkpoint);
    return cfrpn::ExperimentConfig::from_flat(flat);
}

int cmd_params(const cfrpn::ExperimentConfig& cfg) {
    cfrpn::ArchitectureConfig arch = cfg.arch;
    // the reference pairs are CIFAR-10 sized unless a dataset is chosen explicitly
    if (!cfg.source.contains("data.source")) arch.num_classes = 10;
    std::cout << "baseline_width,baseline_params,cfrpn_width,cfrpn_params,relative_gap,matched_width,matched_params\n";
    for (const auto& r : cfrpn::params_table(arch)) {
        std::cout << r.baseline_width << "," << r.baseline_params << "," << r.reference_cfrpn_width << ","
                  << r.reference_cfrpn_params << "," << cfrpn::format_double(r.relative_gap) << "," << r.matched_width
                  << "," << r.matched_params << "\n";
    }
    return kExitOk;
}

int cmd_gradcheck(const cfrpn::ExperimentConfig& cfg) {
    bool ok = true;
    std::cout << "layer,max_rel_error,checked,status\n";
    for (const auto& r : cfrpn::run_gradchecks(cfg.gradcheck_tolerance)) {
        std::cout << r.layer << "," << cfrpn::format_double(r.max_rel_error) << "," << r.checked << ","
                  << (r.passed ? "pass" : "FAIL") << "\n";
        ok = ok && r.passed;
    }
    return ok ? kExitOk : kExitGradcheck;
}

}  // namespace

int main(int argc, char** argv) {
    cfrpn::configure_allocator();
    CLI::App app{"Convolutional fully recursive perceptron networks"};
    app.set_version_flag("--version", CFRPN_VERSION);
    app.require_subcommand(1);

    Common c;
    auto* train = app.add_subcommand("train", "train one model per seed");
    add_common(train, c, true);
    auto* compare = app.add_subcommand("compare", "paired baseline vs recursive study over width pairs");
    add_common(compare, c, true);
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every layer type");
    add_common(gradcheck, c, false);
    auto* params = app.add_subcommand("params", "parameter counts for the reference width pairs");
    add_common(params, c, false);
    auto* trace = app.add_subcommand("trace", "per-sample iteration depths of a trained model");
    add_common(trace, c, true);
    trace->add_option("--checkpoint", c.checkpoint, "checkpoint written by train (trace.checkpoint)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    CLI::App* cmd = app.get_subcommands().front();
    try {
        const cfrpn::ExperimentConfig cfg = resolve(c, cmd->remaining());
        if (cmd == params) return cmd_params(cfg);
        if (cmd == gradcheck) return cmd_gradcheck(cfg);
        if (cmd == train) {
            const auto runs = cfrpn::run_training(cfg, c.out, std::cerr);
            int code = kExitOk;
            for (const auto& r : runs) {
                std::cout << cfrpn::mode_name(r.mode) << " width " << r.width << " seed " << r.seed << ": train_acc "
                          << cfrpn::format_double(r.final_train_acc()) << " val_acc "
                          << cfrpn::format_double(r.final_val_acc()) << "\n";
                if (r.trace_violation) {
                    std::cerr << "stopping-rule violation: " << *r.trace_violation << "\n";
                    code = kExitNumeric;
                }
            }
            return code;
        }
        if (cmd == compare) {
            for (const auto& p : cfrpn::run_compare(cfg, c.out, std::cerr)) {
                std::cout << "pair " << p.baseline_width << "/" << p.cfrpn_width << ": baseline val "
                          << cfrpn::format_double(p.baseline_summary.val_mean) << ", "
                          << cfrpn::mode_name(p.cfrpn_summary.mode) << " val "
                          << cfrpn::format_double(p.cfrpn_summary.val_mean) << ", gap "
                          << cfrpn::format_double(p.gap()) << "\n";
            }
            return kExitOk;
        }
        if (cmd == trace) {
            const auto rows = cfrpn::run_trace(cfg, c.out, std::cerr);
            std::cout << rows.size() << " trace rows written to " << c.out << "\n";
            return kExitOk;
        }
    } catch (const cfrpn::ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const cfrpn::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
