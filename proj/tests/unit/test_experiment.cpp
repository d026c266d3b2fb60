#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "dynkin/experiment.hpp"

using namespace dynkin;
namespace ex = dynkin::experiment;
namespace fs = std::filesystem;

namespace {

const char* kDesk = R"({
  "schema_version": 1,
  "name": "desk",
  "seed": 17,
  "model": {
    "r": 0.05, "lambda1": 1.0, "lambda2": 2.0, "T": 1.0,
    "g": {"builtin": "exponential", "gamma": 0.5},
    "payoffs": {"f": 0.1, "L": 0.6, "U": 0.61, "xi": 0.5}
  },
  "solver": {"mode": "ode", "n_t": 1000},
  "checks": [
    {"kind": "value_match", "n_paths": 2000},
    {"kind": "martingale", "n_t": 1000, "n_paths": 2000},
    {"kind": "sdg", "deviations": 3}
  ]
})";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("dynkin_experiment_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write_spec(const fs::path& dir, const std::string& text) {
    const fs::path p = dir / "spec.json";
    std::ofstream(p, std::ios::binary) << text;
    return p;
}

// Runs the CLI and returns its exit status; stdout and stderr go to dir/log.txt.
int cli(const fs::path& dir, const std::string& args) {
    const std::string cmd = std::string(DYNKIN_CLI_PATH) + " " + args + " > " + (dir / "log.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string spec_error(const std::string& text) {
    try {
        ex::parse_spec(text);
    } catch (const ex::SpecError& e) {
        return e.what();
    }
    return {};
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
    const auto pos = s.find(from);
    EXPECT_NE(pos, std::string::npos) << from;
    return s.replace(pos, from.size(), to);
}

}  // namespace

TEST(EditDistance, Examples) {
    EXPECT_EQ(ex::edit_distance("kitten", "sitting"), 3u);
    EXPECT_EQ(ex::edit_distance("", "abc"), 3u);
    EXPECT_EQ(ex::edit_distance("call", "call"), 0u);
    EXPECT_EQ(ex::nearest("cal", {"constant", "call", "put"}), "call");
}

TEST(Builtins, CatalogListsEveryName) {
    const std::string cat = ex::list_builtins();
    EXPECT_NE(cat.find("constant"), std::string::npos);
    for (const auto& b : ex::builtins()) EXPECT_NE(cat.find(b.name), std::string::npos) << b.name;
    for (const auto& k : ex::check_kinds()) EXPECT_NE(cat.find(k.name), std::string::npos) << k.name;
}

TEST(Builtins, EveryNameValidatesInASpec) {
    for (const auto& b : ex::builtins()) {
        auto doc = ex::json::parse(kDesk);
        const auto fragment = ex::example_object(b);
        doc["model"]["dynamics"] = {{"builtin", "arithmetic"}, {"x0", 1.0}};
        if (b.category == "payoff") {
            for (const char* slot : {"f", "L", "U", "xi"}) doc["model"]["payoffs"][slot] = fragment;
        } else if (b.category == "dynamics") {
            doc["model"]["dynamics"] = fragment;
        } else {
            doc["model"]["g"] = fragment;
        }
        doc["solver"] = {{"mode", "pde"}, {"n_t", 400}, {"n_x", 50}, {"x_min", 0.5}, {"x_max", 1.5}};
        ex::ExperimentSpec s;
        ASSERT_NO_THROW(s = ex::parse_spec(doc.dump())) << b.name;
        EXPECT_NO_THROW(ex::build_model(s.model)) << b.name;
    }
}

TEST(Builtins, PayoffFormulas) {
    const auto call = ex::build_payoff({"call", {{"strike", 0.9}, {"scale", 1.2}, {"offset", 0.1}}});
    EXPECT_DOUBLE_EQ(call(0.0, 1.4), 1.2 * 0.5 + 0.1);
    EXPECT_DOUBLE_EQ(call(0.0, 0.5), 0.1);
    const auto put = ex::build_payoff({"put", {{"strike", 1.0}, {"scale", 2.0}, {"offset", 0.0}}});
    EXPECT_DOUBLE_EQ(put(0.3, 0.25), 1.5);
    const auto affine = ex::build_payoff({"affine", {{"a", 1.0}, {"b", 2.0}, {"c", -3.0}}});
    EXPECT_DOUBLE_EQ(affine(0.5, 2.0), 1.0 + 4.0 - 1.5);
    EXPECT_TRUE(affine.state_dependent());
    EXPECT_FALSE(ex::build_payoff({"affine", {{"a", 1.0}, {"b", 0.0}, {"c", 1.0}}}).state_dependent());
    EXPECT_FALSE(ex::build_payoff({"constant", {{"value", 2.0}}}).state_dependent());
}

TEST(Builtins, DynamicsCoefficients) {
    auto s = ex::parse_spec(kDesk).model;
    s.dynamics = {"geometric", {{"mu", 0.05}, {"sigma", 0.2}, {"x0", 2.0}}};
    const auto g = ex::build_model(s);
    EXPECT_DOUBLE_EQ(g.drift(0.0, 2.0), 0.1);
    EXPECT_DOUBLE_EQ(g.volatility(0.0, 2.0), 0.4);
    EXPECT_FALSE(g.deterministic_state);
    s.dynamics = {"arithmetic", {{"mu", 0.0}, {"sigma", 0.0}, {"x0", 2.0}}};
    EXPECT_TRUE(ex::build_model(s).deterministic_state);
}

TEST(SpecValidation, UnknownBuiltinNamesNearestMatch) {
    const auto msg = spec_error(replace(kDesk, R"("U": 0.61)", R"("U": {"builtin": "cal", "strike": 1})"));
    EXPECT_NE(msg.find("model.payoffs.U.builtin"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'call'"), std::string::npos) << msg;
}

TEST(SpecValidation, UnknownFieldNamesNearestMatch) {
    const auto msg = spec_error(replace(kDesk, R"("lambda1")", R"("lambda_1")"));
    EXPECT_NE(msg.find("model.lambda_1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'lambda1'"), std::string::npos) << msg;
    const auto kind = spec_error(replace(kDesk, R"("kind": "sdg")", R"("kind": "sadle")"));
    EXPECT_NE(kind.find("'saddle'"), std::string::npos) << kind;
}

TEST(SpecValidation, ParseErrorsCarryLineAndColumn) {
    const auto msg = spec_error("{\n  \"schema_version\": 1,\n  \"name\": oops\n}");
    EXPECT_EQ(msg.rfind("line 3, column 11", 0), 0u) << msg;
}

TEST(SpecValidation, Rejections) {
    EXPECT_NE(spec_error(replace(kDesk, R"("schema_version": 1)", R"("schema_version": 2)")).find("schema_version"),
              std::string::npos);
    EXPECT_NE(spec_error(replace(kDesk, R"("kind": "sdg")", R"("kind": "sdg", "tolerance": -1)")).find("tolerance"),
              std::string::npos);
    EXPECT_EQ(spec_error(replace(kDesk, R"("kind": "sdg")", R"("kind": "sdg", "tolerance": 0)")), "");
    EXPECT_NE(spec_error(replace(kDesk, R"("lambda2": 2.0)", R"("lambda2": -2.0)")).find("model.lambda2"),
              std::string::npos);
    EXPECT_NE(spec_error(replace(kDesk, R"("kind": "sdg")", R"("kind": "sdg", "name": "martingale")")).find("duplicate"),
              std::string::npos);
    const std::string mc = replace(kDesk, R"({"mode": "ode", "n_t": 1000})", R"({"mode": "mc"})");
    EXPECT_NE(spec_error(mc).find("needs an ode or pde solver"), std::string::npos);
    const std::string pde = replace(kDesk, R"({"mode": "ode", "n_t": 1000})",
                                    R"({"mode": "pde", "x_min": 2, "x_max": 3})");
    EXPECT_NE(spec_error(replace(pde, R"("T": 1.0,)", R"("T": 1.0, "dynamics": {"builtin": "arithmetic", "x0": 1},)"))
                  .find("initial state"),
              std::string::npos);
    EXPECT_NE(spec_error(replace(kDesk, R"("L": 0.6, )", "")).find("model.payoffs.L"), std::string::npos);
}

TEST(SpecValidation, SeedsRequiredForMonteCarlo) {
    const auto spec = ex::parse_spec(replace(kDesk, R"("seed": 17,)", ""));
    EXPECT_THROW(ex::require_seed(spec), ex::SpecError);
    auto no_mc = spec;
    no_mc.checks.clear();
    EXPECT_NO_THROW(ex::require_seed(no_mc));
}

TEST(Cli, TrivialInstancePassesEveryCheck) {
    const fs::path dir = scratch("trivial");
    const fs::path spec = fs::path(DYNKIN_SOURCE_DIR) / "experiments" / "trivial.json";
    ASSERT_EQ(cli(dir, spec.string() + " --out " + (dir / "out").string()), 0) << slurp(dir / "log.txt");
    const auto solver = ex::json::parse(slurp(dir / "out" / "solver.json"));
    EXPECT_NEAR(solver["value"].get<double>(), 1.0, 1e-10);
    const auto summary = ex::json::parse(slurp(dir / "out" / "summary.json"));
    std::set<std::string> kinds;
    for (const auto& [name, row] : summary.items()) {
        EXPECT_TRUE(row["pass"].get<bool>()) << name;
        for (const char* key : {"value", "reference", "margin", "stderr", "pass"}) EXPECT_TRUE(row.contains(key));
        const auto detail = ex::json::parse(slurp(dir / "out" / ("check_" + name + ".json")));
        kinds.insert(detail["kind"].get<std::string>());
    }
    const auto all = ex::check_kind_names();
    EXPECT_EQ(kinds, std::set<std::string>(all.begin(), all.end()));
    EXPECT_EQ(summary["value_match"]["value"].get<double>(), 1.0);
    EXPECT_EQ(summary["value_match"]["stderr"].get<double>(), 0.0);
    EXPECT_TRUE(fs::exists(dir / "out" / "surface.csv"));
    EXPECT_EQ(slurp(dir / "out" / "streams.csv").rfind("time,label\n", 0), 0u);
}

TEST(Cli, ZeroToleranceOnMonteCarloFails) {
    const fs::path dir = scratch("zero");
    const fs::path spec = fs::path(DYNKIN_SOURCE_DIR) / "experiments" / "zero_tolerance.json";
    ASSERT_EQ(cli(dir, spec.string() + " --out " + (dir / "out").string()), 1);
    const std::string log = slurp(dir / "log.txt");
    EXPECT_NE(log.find("FAIL exact-mc"), std::string::npos) << log;
    const auto summary = ex::json::parse(slurp(dir / "out" / "summary.json"));
    EXPECT_FALSE(summary["exact-mc"]["pass"].get<bool>());
    EXPECT_GT(summary["exact-mc"]["stderr"].get<double>(), 0.0);
}

TEST(Cli, OutputsIndependentOfJobs) {
    const fs::path dir = scratch("jobs");
    const fs::path spec = write_spec(dir, kDesk);
    ASSERT_EQ(cli(dir, spec.string() + " --emit-paths --out " + (dir / "a").string()), 0) << slurp(dir / "log.txt");
    ASSERT_EQ(cli(dir, spec.string() + " --emit-paths --jobs 3 --out " + (dir / "b").string()), 0);
    ASSERT_EQ(cli(dir, spec.string() + " --emit-paths --jobs 1 --out " + (dir / "c").string()), 0);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(dir / "a")) {
        const auto name = e.path().filename();
        EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / name)) << name;
        EXPECT_EQ(slurp(e.path()), slurp(dir / "c" / name)) << name;
        ++files;
    }
    EXPECT_EQ(files, 8u);  // summary, solver, 3 checks, surface, streams, paths
}

TEST(Cli, SeedOverrideChangesMonteCarloOnly) {
    const fs::path dir = scratch("seed");
    const fs::path spec = write_spec(dir, replace(kDesk, R"("seed": 17,)", ""));
    EXPECT_EQ(cli(dir, spec.string() + " --out " + (dir / "none").string()), 2);
    EXPECT_NE(slurp(dir / "log.txt").find("seed"), std::string::npos);
    ASSERT_EQ(cli(dir, spec.string() + " --seed 17 --out " + (dir / "a").string()), 0);
    ASSERT_EQ(cli(dir, spec.string() + " --seed 18 --out " + (dir / "b").string()), 0);
    const auto a = ex::json::parse(slurp(dir / "a" / "summary.json"));
    const auto b = ex::json::parse(slurp(dir / "b" / "summary.json"));
    EXPECT_EQ(a["value_match"]["reference"], b["value_match"]["reference"]);
    EXPECT_NE(a["value_match"]["value"], b["value_match"]["value"]);
}

TEST(Cli, EmitPathsWritesOneRowPerScenario) {
    const fs::path dir = scratch("paths");
    const fs::path spec = write_spec(dir, kDesk);
    ASSERT_EQ(cli(dir, spec.string() + " --emit-paths --out " + (dir / "out").string()), 0);
    std::ifstream in(dir / "out" / "paths.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "seed,sigma,tau,regime,R");
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 2000u);
}

TEST(Cli, UsageErrorsExitTwo) {
    const fs::path dir = scratch("usage");
    EXPECT_EQ(cli(dir, (dir / "missing.json").string()), 2);
    EXPECT_EQ(cli(dir, ""), 2);
    EXPECT_EQ(cli(dir, "--jobs 0 x.json"), 2);
    EXPECT_EQ(cli(dir, write_spec(dir, "{\"schema_version\": 1,").string()), 2);
    EXPECT_NE(slurp(dir / "log.txt").find("line 1"), std::string::npos);
    EXPECT_EQ(cli(dir, "--list-builtins"), 0);
    EXPECT_NE(slurp(dir / "log.txt").find("constant"), std::string::npos);
}

TEST(Cli, SolverRefusalsSurfaceVerbatim) {
    const fs::path dir = scratch("refusal");
    std::string text = replace(kDesk, R"({"mode": "ode", "n_t": 1000})",
                               R"({"mode": "pde", "n_t": 10, "n_x": 400, "x_min": 0.5, "x_max": 1.5})");
    text = replace(text, R"("T": 1.0,)", R"("T": 1.0, "dynamics": {"builtin": "geometric", "sigma": 0.2, "x0": 1},)");
    std::string expected;
    try {
        const auto s = ex::parse_spec(text);
        solve_pde(ex::build_model(s.model), PdeGrid{10, 400, 0.5, 1.5, GridKind::Linear});
    } catch (const CflError& e) {
        expected = e.what();
    }
    ASSERT_FALSE(expected.empty());
    EXPECT_EQ(cli(dir, write_spec(dir, text).string() + " --out " + (dir / "out").string()), 2);
    EXPECT_NE(slurp(dir / "log.txt").find(expected), std::string::npos) << slurp(dir / "log.txt");

    const std::string mode = replace(kDesk, R"("U": 0.61)", R"("U": {"builtin": "call", "strike": 1})");
    EXPECT_EQ(cli(dir, write_spec(dir, mode).string() + " --out " + (dir / "out").string()), 2);
    EXPECT_NE(slurp(dir / "log.txt").find("error:"), std::string::npos);
}
