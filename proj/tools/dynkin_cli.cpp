#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dynkin/experiment.hpp"

namespace ex = dynkin::experiment;

int main(int argc, char** argv) {
    CLI::App app{"Run a constrained Dynkin game experiment"};
    std::string spec_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    int jobs = 1;
    bool emit_paths = false;
    bool list = false;
    app.add_option("spec", spec_path, "experiment spec (JSON)");
    app.add_option("--seed", seed, "override the seed in the experiment file");
    app.add_option("--out", out, "output directory (overrides output.directory)");
    app.add_option("--jobs", jobs, "worker threads; results do not depend on it")->check(CLI::PositiveNumber);
    app.add_flag("--emit-paths", emit_paths, "write paths.csv under the threshold policies");
    app.add_flag("--list-builtins", list, "print the built-in catalog and exit");
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (list) {
        std::cout << ex::list_builtins();
        return 0;
    }
    if (spec_path.empty()) {
        std::cerr << "error: missing spec path\n" << app.help();
        return 2;
    }
    try {
        const ex::ExperimentSpec spec = ex::load_spec(spec_path);
        const ex::RunResult res = ex::run(spec, ex::RunOptions{seed, out, jobs, emit_paths});
        ex::print_table(std::cout, spec, res);
        return res.exit_code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
