// cropi_lab: command-line front end for the staged pipeline.
//
//   cropi_lab <stage> --config PATH --out DIR [--seed-override NAME=INT]...
//   cropi_lab run --stage NAME --config PATH --out DIR
//   cropi_lab report --config PATH --out DIR [--threshold REAL]
//   cropi_lab check-config --config PATH
//
// Exit codes: 0 success, 1 usage or config error, 2 missing or stale
// artifact, 3 numeric failure.

#include <CLI11.hpp>

#include <iostream>

#include "cropi/pipeline.hpp"

namespace {

struct Options {
    std::string config;
    std::string out = "cropi_out";
    std::string stage;
    std::vector<std::string> seed_overrides;
    std::optional<double> threshold;
};

cropi::PipelineConfig resolve_config(const Options& o) {
    auto cfg = cropi::load_config(o.config);
    for (const auto& s : o.seed_overrides) cropi::apply_seed_override(cfg, s);
    cfg.validate();
    return cfg;
}

void print_summary(const nlohmann::json& s) {
    std::cout << "threshold " << s.at("threshold").get<double>() << " on " << s.at("targeted").dump() << " ("
              << s.at("threshold_source").get<std::string>() << ")\n";
    for (const auto& [m, e] : s.at("methods").items()) {
        std::cout << "  " << m << ": speedup " << e.at("speedup").dump() << ", first step "
                  << e.at("target_step").dump() << " vs reference " << e.at("reference_step").dump()
                  << ", final " << e.at("final_accuracy").dump() << '\n';
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale off-policy influence curriculum lab"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* sub, bool needs_out) {
        sub->add_option("--config", o.config, "YAML config file")->required()->check(CLI::ExistingFile);
        if (needs_out) sub->add_option("--out", o.out, "output directory")->capture_default_str();
        sub->add_option("--seed-override", o.seed_overrides, "replace a named seed, NAME=INT (repeatable)");
    };

    const std::vector<std::pair<std::string, std::string>> stages{
        {"gen", "generate datasets and the validation split"},
        {"rollout", "warm-start the base policy and collect the offline trajectory store"},
        {"score", "off-policy gradient features and rank table at the base policy"},
        {"select", "phase-0 curriculum subset and baseline subsets"},
        {"train", "run the curriculum and every baseline"},
        {"full", "all stages in order"},
        {"report", "step-level speedups against the reference run"}};
    std::map<CLI::App*, std::string> stage_of;
    for (const auto& [name, help] : stages) {
        auto* sub = app.add_subcommand(name, help);
        add_common(sub, true);
        if (name == "report" || name == "full")
            sub->add_option("--threshold", o.threshold, "targeted accuracy threshold (default: from the config)");
        stage_of[sub] = name;
    }
    auto* run = app.add_subcommand("run", "run one stage chosen with --stage");
    add_common(run, true);
    run->add_option("--stage", o.stage, "gen|rollout|score|select|train|full|report")->required();
    run->add_option("--threshold", o.threshold, "targeted accuracy threshold for report");
    auto* check = app.add_subcommand("check-config", "validate a config and print its resolved form and digest");
    add_common(check, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        const auto cfg = resolve_config(o);
        if (check->parsed()) {
            std::cout << "# digest " << cfg.digest_hex() << '\n' << cropi::config_to_yaml(cfg);
            return 0;
        }
        std::string stage_name = o.stage;
        for (const auto& [sub, name] : stage_of)
            if (sub->parsed()) stage_name = name;
        const auto stage = cropi::parse_stage(stage_name);
        cropi::Pipeline pipeline(cfg, o.out);
        std::cerr << "config digest " << pipeline.digest() << '\n';
        if (stage == cropi::Stage::kReport) {
            print_summary(pipeline.report(o.threshold));
        } else {
            pipeline.run(stage, o.threshold);
            if (stage == cropi::Stage::kFull) {
                std::ifstream in(pipeline.path("report/summary.json"));
                print_summary(nlohmann::json::parse(in));
            }
        }
        return 0;
    } catch (const cropi::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const cropi::ArtifactError& e) {
        std::cerr << "artifact error: " << e.what() << '\n';
        return 2;
    } catch (const cropi::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 3;
    } catch (const cropi::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
