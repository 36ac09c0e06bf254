#include <strifle/cli.hpp>

#include <CLI11.hpp>

int main(int argc, char** argv)
{
    using namespace strifle::cli;
    CLI::App app{"Transfer-learning GLM estimators with surrogates: simulation, fitting and reporting"};
    app.set_version_flag("--version", STRIFLE_VERSION);
    app.require_subcommand(1);

    std::string config;
    Overrides ov;
    std::uint64_t seed = 0;
    std::string out, methods;
    int jobs = 0;

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* opt = sub->add_option("--config", config, "JSON run configuration");
        if (config_required) opt->required();
        opt->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "master seed (overrides master_seed)");
        sub->add_option("--out", out, "output directory (overrides output_dir)");
        sub->add_option("--jobs", jobs, "worker threads (overrides parallelism)")->check(CLI::PositiveNumber);
        sub->add_option("--methods", methods, "comma-separated methods, e.g. SUP,SAS,STRIFLE");
    };
    CLI::App* simulate = app.add_subcommand("simulate", "run simulation replications");
    CLI::App* fit = app.add_subcommand("fit", "fit all methods to one dataset");
    CLI::App* oracle = app.add_subcommand("oracle", "compute and cache the oracle coefficients");
    CLI::App* report = app.add_subcommand("report", "merge aggregate CSVs into a formatted table");
    add_common(simulate, true);
    add_common(fit, true);
    add_common(oracle, true);
    add_common(report, false);
    report->add_option("inputs", ov.inputs, "aggregate CSV files");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return report_error(exit_validation, "usage", e.what(), "");
    }

    auto was_set = [](CLI::App* sub, const char* name) { return sub->count(name) > 0; };
    CLI::App* active = app.get_subcommands().front();
    if (was_set(active, "--seed")) ov.seed = seed;
    if (was_set(active, "--out")) ov.out = out;
    if (was_set(active, "--jobs")) ov.jobs = jobs;
    if (was_set(active, "--methods")) ov.methods = methods;

    Mode mode = Mode::simulate;
    if (active == fit) mode = Mode::fit;
    else if (active == oracle) mode = Mode::oracle;
    else if (active == report) mode = Mode::report;
    return dispatch(mode, config, ov);
}
