#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynkin/bsde.hpp"
#include "dynkin/game.hpp"
#include "dynkin/regression_mc.hpp"
#include "dynkin/sdg.hpp"
#include "dynkin/signals.hpp"

namespace dynkin::experiment {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

/// Raised for unreadable, malformed or invalid experiment specs.
class SpecError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> row(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
            diag = up;
        }
    }
    return row[b.size()];
}

inline std::string nearest(const std::string& word, const std::vector<std::string>& candidates) {
    std::string best;
    std::size_t best_d = std::string::npos;
    for (const auto& c : candidates) {
        const std::size_t d = edit_distance(word, c);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

// ---------------------------------------------------------------- built-ins

struct ParamSchema {
    std::string name;
    std::string description;
    std::optional<double> default_value;  // empty: required
};

struct Builtin {
    std::string name;
    std::string category;  // "payoff", "dynamics" or "risk"
    std::string description;
    std::vector<ParamSchema> params;
};

inline const std::vector<Builtin>& builtins() {
    static const std::vector<Builtin> table{
        {"constant", "payoff", "value", {{"value", "constant level", std::nullopt}}},
        {"affine",
         "payoff",
         "a + b x + c t",
         {{"a", "intercept", std::nullopt}, {"b", "state slope", 0.0}, {"c", "time slope", 0.0}}},
        {"call",
         "payoff",
         "scale max(x - strike, 0) + offset",
         {{"strike", "strike level", std::nullopt}, {"scale", "multiplier", 1.0}, {"offset", "additive shift", 0.0}}},
        {"put",
         "payoff",
         "scale max(strike - x, 0) + offset",
         {{"strike", "strike level", std::nullopt}, {"scale", "multiplier", 1.0}, {"offset", "additive shift", 0.0}}},
        {"geometric",
         "dynamics",
         "dX = mu X dt + sigma X dW",
         {{"mu", "drift rate", 0.0}, {"sigma", "volatility", 0.0}, {"x0", "initial state", std::nullopt}}},
        {"arithmetic",
         "dynamics",
         "dX = mu dt + sigma dW",
         {{"mu", "drift", 0.0}, {"sigma", "volatility", 0.0}, {"x0", "initial state", std::nullopt}}},
        {"identity", "risk", "g(x) = x", {}},
        {"exponential", "risk", "g(x) = -exp(-gamma x)", {{"gamma", "risk aversion, > 0", std::nullopt}}},
    };
    return table;
}

inline std::vector<std::string> builtin_names(const std::string& category) {
    std::vector<std::string> out;
    for (const auto& b : builtins()) {
        if (b.category == category) out.push_back(b.name);
    }
    return out;
}

inline const Builtin* find_builtin(const std::string& category, const std::string& name) {
    for (const auto& b : builtins()) {
        if (b.category == category && b.name == name) return &b;
    }
    return nullptr;
}

/// Spec fragment that instantiates `b` with every parameter set to its
/// default (or 1 when required).
inline json example_object(const Builtin& b) {
    json o = json::object();
    o["builtin"] = b.name;
    for (const auto& p : b.params) o[p.name] = p.default_value.value_or(1.0);
    return o;
}

// ------------------------------------------------------------------- checks

enum class ParamType { Number, Count, NumberList };

struct CheckParam {
    std::string name;
    ParamType type;
    double default_value;
    std::string description;
};

struct CheckKind {
    std::string name;
    std::string description;
    bool monte_carlo;   // needs a seed
    bool needs_surface; // needs an ode or pde solver
    double tolerance;   // default; unit in description
    std::vector<CheckParam> params;
};

inline const std::vector<CheckKind>& check_kinds() {
    static const std::vector<CheckKind> table{
        {"value_match",
         "MC value under the threshold policies vs the solver value; tolerance in standard errors",
         true,
         true,
         3.0,
         {{"n_paths", ParamType::Count, 10000, "scenarios"}, {"n_steps", ParamType::Count, 200, "Euler steps"}}},
        {"saddle",
         "unilateral stopping deviations with common random numbers; tolerance in standard errors",
         true,
         true,
         3.0,
         {{"n_paths", ParamType::Count, 10000, "scenarios"}, {"n_steps", ParamType::Count, 200, "Euler steps"}}},
        {"recursion",
         "one-step recursion residual on an ODE surface; tolerance relative to the value scale",
         false,
         false,
         1e-6,
         {{"n_t", ParamType::Count, 10000, "ODE steps"},
          {"quad_points", ParamType::Count, 64, "Gauss-Legendre nodes per panel"},
          {"times", ParamType::NumberList, 0, "test times in [0, T); default 0, 0.2T, ..., 0.8T"}}},
        {"martingale",
         "mean increments of g(Q-hat) along merged arrivals; tolerance in standard errors",
         true,
         false,
         3.0,
         {{"n_t", ParamType::Count, 4000, "ODE steps"},
          {"k_max", ParamType::Count, 4, "merged-event steps"},
          {"n_paths", ParamType::Count, 20000, "samples of the signal streams"}}},
        {"sdg",
         "randomized-stopping representation and binary-control deviations; tolerance in standard errors",
         true,
         true,
         3.0,
         {{"quad_tolerance", ParamType::Number, 1e-6, "relative tolerance of the quadrature value"},
          {"n_paths", ParamType::Count, 10000, "Euler paths"},
          {"n_steps", ParamType::Count, 200, "Euler steps"},
          {"deviations", ParamType::Count, 10, "deviations per player"},
          {"blocks", ParamType::Count, 8, "time blocks per deviation"},
          {"quad_points", ParamType::Count, 64, "Gauss-Legendre nodes per piece"}}},
        {"colehopf",
         "transformed solve vs direct raw-value solve on the same grid; tolerance is a max-norm",
         false,
         true,
         1e-6,
         {}},
        {"regression",
         "regression Monte Carlo value vs the solver value; tolerance in standard errors",
         true,
         true,
         3.0,
         {{"n_paths", ParamType::Count, 10000, "paths"},
          {"n_t", ParamType::Count, 100, "time steps"},
          {"basis_degree", ParamType::Count, 3, "polynomial degree"}}},
    };
    return table;
}

inline std::vector<std::string> check_kind_names() {
    std::vector<std::string> out;
    for (const auto& k : check_kinds()) out.push_back(k.name);
    return out;
}

inline const CheckKind* find_check_kind(const std::string& name) {
    for (const auto& k : check_kinds()) {
        if (k.name == name) return &k;
    }
    return nullptr;
}

/// Human-readable catalog of built-ins and check kinds.
inline std::string list_builtins() {
    std::ostringstream os;
    for (const std::string category : {"payoff", "dynamics", "risk"}) {
        os << category << " built-ins:\n";
        for (const auto& b : builtins()) {
            if (b.category != category) continue;
            os << "  " << b.name << "  " << b.description << "\n";
            for (const auto& p : b.params) {
                os << "      " << p.name << "  " << p.description;
                if (p.default_value) {
                    os << " (default " << format_number(*p.default_value) << ")";
                } else {
                    os << " (required)";
                }
                os << "\n";
            }
        }
    }
    os << "check kinds:\n";
    for (const auto& k : check_kinds()) {
        os << "  " << k.name << "  " << k.description << " (default tolerance " << format_number(k.tolerance)
           << ")\n";
        for (const auto& p : k.params) {
            os << "      " << p.name << "  " << p.description;
            if (p.type != ParamType::NumberList) os << " (default " << format_number(p.default_value) << ")";
            os << "\n";
        }
    }
    return os.str();
}

// --------------------------------------------------------------------- spec

struct BuiltinSpec {
    std::string builtin;
    std::map<std::string, double> params;

    double at(const std::string& key) const { return params.at(key); }
};

struct ModelSpec {
    BuiltinSpec dynamics{"arithmetic", {{"mu", 0.0}, {"sigma", 0.0}, {"x0", 0.0}}};
    double r = 0.0;
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    double T = 1.0;
    BuiltinSpec g{"identity", {}};
    BuiltinSpec f{"constant", {{"value", 0.0}}};
    BuiltinSpec L;
    BuiltinSpec U;
    BuiltinSpec xi;
};

struct SolverSpec {
    std::string mode = "ode";  // ode, pde or mc
    std::size_t n_t = 1000;
    std::size_t n_x = 200;
    double x_min = 0.0;
    double x_max = 0.0;
    GridKind grid = GridKind::Linear;
    std::size_t n_paths = 10000;
    int basis_degree = 3;
};

struct CheckSpec {
    std::string kind;
    std::string name;
    double tolerance = 0.0;
    std::map<std::string, double> numbers;
    std::vector<double> times;
};

struct OutputSpec {
    std::string directory = "out";
    bool json_files = true;
    bool csv_files = true;
};

struct ExperimentSpec {
    int schema_version = kSchemaVersion;
    std::string name;
    std::optional<std::uint64_t> seed;
    ModelSpec model;
    SolverSpec solver;
    std::vector<CheckSpec> checks;
    OutputSpec output;
};

namespace detail {

[[noreturn]] inline void fail(const std::string& path, const std::string& msg) {
    throw SpecError(path.empty() ? msg : path + ": " + msg);
}

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

inline void check_keys(const json& obj, const std::string& path, const std::vector<std::string>& allowed) {
    if (!obj.is_object()) fail(path, "expected an object");
    for (const auto& [key, _] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            fail(join(path, key), "unknown field '" + key + "' (did you mean '" + nearest(key, allowed) + "'?)");
        }
    }
}

inline double number_value(const json& v, const std::string& path) {
    if (!v.is_number()) fail(path, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) fail(path, "expected a finite number");
    return d;
}

inline double get_number(const json& obj, const std::string& key, const std::string& path,
                         std::optional<double> fallback = std::nullopt) {
    if (!obj.contains(key)) {
        if (fallback) return *fallback;
        fail(join(path, key), "missing required field");
    }
    return number_value(obj.at(key), join(path, key));
}

inline std::size_t count_value(const json& v, const std::string& path) {
    if (!v.is_number_integer() || v.get<long long>() < 0) fail(path, "expected a non-negative integer");
    return v.get<std::size_t>();
}

inline std::size_t get_count(const json& obj, const std::string& key, const std::string& path, std::size_t fallback) {
    return obj.contains(key) ? count_value(obj.at(key), join(path, key)) : fallback;
}

inline std::string get_string(const json& obj, const std::string& key, const std::string& path,
                              std::optional<std::string> fallback = std::nullopt) {
    if (!obj.contains(key)) {
        if (fallback) return *fallback;
        fail(join(path, key), "missing required field");
    }
    if (!obj.at(key).is_string()) fail(join(path, key), "expected a string");
    return obj.at(key).get<std::string>();
}

inline BuiltinSpec parse_builtin(const json& v, const std::string& category, const std::string& path) {
    if (category == "payoff" && v.is_number()) return BuiltinSpec{"constant", {{"value", number_value(v, path)}}};
    if (!v.is_object()) fail(path, "expected an object with a 'builtin' field");
    const std::string name = get_string(v, "builtin", path);
    const Builtin* b = find_builtin(category, name);
    if (!b) {
        fail(join(path, "builtin"), "unknown " + category + " built-in '" + name + "' (did you mean '" +
                                        nearest(name, builtin_names(category)) + "'?)");
    }
    std::vector<std::string> allowed{"builtin"};
    for (const auto& p : b->params) allowed.push_back(p.name);
    check_keys(v, path, allowed);
    BuiltinSpec out{name, {}};
    for (const auto& p : b->params) out.params[p.name] = get_number(v, p.name, path, p.default_value);
    if (name == "exponential" && !(out.params["gamma"] > 0.0)) fail(join(path, "gamma"), "must be > 0");
    return out;
}

inline ModelSpec parse_model(const json& v) {
    const std::string path = "model";
    check_keys(v, path, {"dynamics", "r", "lambda1", "lambda2", "T", "g", "payoffs"});
    ModelSpec m;
    if (v.contains("dynamics")) m.dynamics = parse_builtin(v.at("dynamics"), "dynamics", "model.dynamics");
    m.r = get_number(v, "r", path, 0.0);
    m.lambda1 = get_number(v, "lambda1", path);
    m.lambda2 = get_number(v, "lambda2", path);
    m.T = get_number(v, "T", path);
    if (m.r < 0.0) fail("model.r", "must be >= 0");
    if (m.lambda1 < 0.0) fail("model.lambda1", "must be >= 0");
    if (m.lambda2 < 0.0) fail("model.lambda2", "must be >= 0");
    if (!(m.T > 0.0)) fail("model.T", "must be > 0");
    if (m.dynamics.at("sigma") < 0.0) fail("model.dynamics.sigma", "must be >= 0");
    if (v.contains("g")) m.g = parse_builtin(v.at("g"), "risk", "model.g");
    if (!v.contains("payoffs")) fail("model.payoffs", "missing required field");
    const json& p = v.at("payoffs");
    check_keys(p, "model.payoffs", {"f", "L", "U", "xi"});
    for (const char* key : {"L", "U", "xi"}) {
        if (!p.contains(key)) fail(join("model.payoffs", key), "missing required field");
    }
    if (p.contains("f")) m.f = parse_builtin(p.at("f"), "payoff", "model.payoffs.f");
    m.L = parse_builtin(p.at("L"), "payoff", "model.payoffs.L");
    m.U = parse_builtin(p.at("U"), "payoff", "model.payoffs.U");
    m.xi = parse_builtin(p.at("xi"), "payoff", "model.payoffs.xi");
    return m;
}

inline SolverSpec parse_solver(const json& v) {
    const std::string path = "solver";
    SolverSpec s;
    if (!v.is_object()) fail(path, "expected an object");
    s.mode = get_string(v, "mode", path);
    if (s.mode == "ode") {
        check_keys(v, path, {"mode", "n_t"});
        s.n_t = get_count(v, "n_t", path, 1000);
    } else if (s.mode == "pde") {
        check_keys(v, path, {"mode", "n_t", "n_x", "x_min", "x_max", "grid"});
        s.n_t = get_count(v, "n_t", path, 1000);
        s.n_x = get_count(v, "n_x", path, 200);
        s.x_min = get_number(v, "x_min", path);
        s.x_max = get_number(v, "x_max", path);
        const std::string grid = get_string(v, "grid", path, std::string("linear"));
        if (grid == "linear") {
            s.grid = GridKind::Linear;
        } else if (grid == "log") {
            s.grid = GridKind::Log;
        } else {
            fail("solver.grid", "unknown grid '" + grid + "' (did you mean '" + nearest(grid, {"linear", "log"}) + "'?)");
        }
        if (s.n_x < 3) fail("solver.n_x", "needs at least 3 nodes");
        if (!(s.x_min < s.x_max)) fail("solver.x_max", "must exceed x_min");
        if (s.grid == GridKind::Log && !(s.x_min > 0.0)) fail("solver.x_min", "log grid needs x_min > 0");
    } else if (s.mode == "mc") {
        check_keys(v, path, {"mode", "n_t", "n_paths", "basis_degree"});
        s.n_t = get_count(v, "n_t", path, 100);
        s.n_paths = get_count(v, "n_paths", path, 10000);
        s.basis_degree = static_cast<int>(get_count(v, "basis_degree", path, 3));
    } else {
        fail("solver.mode", "unknown mode '" + s.mode + "' (did you mean '" + nearest(s.mode, {"ode", "pde", "mc"}) +
                                "'?)");
    }
    if (s.n_t < 1) fail("solver.n_t", "needs at least one step");
    return s;
}

inline bool valid_name(const std::string& n) {
    if (n.empty()) return false;
    return std::all_of(n.begin(), n.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    });
}

inline CheckSpec parse_check(const json& v, const std::string& path) {
    if (!v.is_object()) fail(path, "expected an object");
    const std::string kind = get_string(v, "kind", path);
    const CheckKind* k = find_check_kind(kind);
    if (!k) fail(join(path, "kind"), "unknown check kind '" + kind + "' (did you mean '" + nearest(kind, check_kind_names()) + "'?)");
    std::vector<std::string> allowed{"kind", "name", "tolerance"};
    for (const auto& p : k->params) allowed.push_back(p.name);
    check_keys(v, path, allowed);
    CheckSpec c;
    c.kind = kind;
    c.name = get_string(v, "name", path, kind);
    if (!valid_name(c.name)) fail(join(path, "name"), "names may only use letters, digits, '_', '-' and '.'");
    c.tolerance = get_number(v, "tolerance", path, k->tolerance);
    if (c.tolerance < 0.0) fail(join(path, "tolerance"), "must be >= 0");
    for (const auto& p : k->params) {
        const std::string at = join(path, p.name);
        if (p.type == ParamType::NumberList) {
            if (!v.contains(p.name)) continue;
            const json& list = v.at(p.name);
            if (!list.is_array() || list.empty()) fail(at, "expected a non-empty array of numbers");
            for (std::size_t i = 0; i < list.size(); ++i) {
                c.times.push_back(number_value(list[i], at + "[" + std::to_string(i) + "]"));
            }
        } else if (p.type == ParamType::Count) {
            c.numbers[p.name] = static_cast<double>(get_count(v, p.name, path, static_cast<std::size_t>(p.default_value)));
        } else {
            c.numbers[p.name] = get_number(v, p.name, path, p.default_value);
            if (c.numbers[p.name] < 0.0) fail(at, "must be >= 0");
        }
    }
    return c;
}

inline OutputSpec parse_output(const json& v) {
    check_keys(v, "output", {"directory", "formats"});
    OutputSpec o;
    o.directory = get_string(v, "directory", "output", o.directory);
    if (v.contains("formats")) {
        const json& f = v.at("formats");
        if (!f.is_array()) fail("output.formats", "expected an array of strings");
        o.json_files = o.csv_files = false;
        for (std::size_t i = 0; i < f.size(); ++i) {
            const std::string at = "output.formats[" + std::to_string(i) + "]";
            if (!f[i].is_string()) fail(at, "expected a string");
            const std::string fmt = f[i].get<std::string>();
            if (fmt == "json") {
                o.json_files = true;
            } else if (fmt == "csv") {
                o.csv_files = true;
            } else {
                fail(at, "unknown format '" + fmt + "' (did you mean '" + nearest(fmt, {"json", "csv"}) + "'?)");
            }
        }
    }
    return o;
}

// 1-based line and column of the byte at `offset`.
inline std::pair<std::size_t, std::size_t> line_column(const std::string& text, std::size_t offset) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

}  // namespace detail

/// Cross-field checks that do not depend on command-line overrides.
inline void validate(const ExperimentSpec& s) {
    const bool has_surface = s.solver.mode != "mc";
    std::set<std::string> names;
    for (std::size_t i = 0; i < s.checks.size(); ++i) {
        const CheckSpec& c = s.checks[i];
        const std::string path = "checks[" + std::to_string(i) + "]";
        if (!names.insert(c.name).second) detail::fail(path + ".name", "duplicate check name '" + c.name + "'");
        const CheckKind& k = *find_check_kind(c.kind);
        if (k.needs_surface && !has_surface) detail::fail(path + ".kind", "check '" + c.kind + "' needs an ode or pde solver");
        for (double t : c.times) {
            if (!(t >= 0.0 && t < s.model.T)) detail::fail(path + ".times", "test times must lie in [0, T)");
        }
        for (const char* key : {"n_paths", "n_steps", "n_t", "k_max", "quad_points", "blocks"}) {
            auto it = c.numbers.find(key);
            if (it != c.numbers.end() && it->second < 1.0) detail::fail(path + "." + key, "must be >= 1");
        }
    }
    if (s.solver.mode == "pde") {
        const double x0 = s.model.dynamics.at("x0");
        if (x0 < s.solver.x_min || x0 > s.solver.x_max) {
            detail::fail("solver", "grid [x_min, x_max] must contain the initial state " + format_number(x0));
        }
    }
}

/// Seeds must be present when any Monte Carlo work is requested.
inline void require_seed(const ExperimentSpec& s) {
    if (s.seed) return;
    if (s.solver.mode == "mc") detail::fail("seed", "missing; the mc solver needs a seed");
    for (const auto& c : s.checks) {
        if (find_check_kind(c.kind)->monte_carlo) detail::fail("seed", "missing; check '" + c.name + "' is Monte Carlo");
    }
}

inline ExperimentSpec parse_spec(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text, nullptr, true, true);
    } catch (const json::parse_error& e) {
        const auto [line, col] = detail::line_column(text, e.byte == 0 ? 0 : e.byte - 1);
        std::string msg = e.what();
        const auto pos = msg.find(": ", msg.find("parse error"));
        if (pos != std::string::npos) msg = msg.substr(pos + 2);
        throw SpecError("line " + std::to_string(line) + ", column " + std::to_string(col) + ": " + msg);
    }
    detail::check_keys(doc, "", {"schema_version", "name", "seed", "model", "solver", "checks", "output"});
    if (!doc.contains("schema_version")) detail::fail("schema_version", "missing required field");
    if (!doc.at("schema_version").is_number_integer() || doc.at("schema_version").get<long long>() != kSchemaVersion) {
        detail::fail("schema_version", "unsupported version " + doc.at("schema_version").dump() + " (expected " +
                                           std::to_string(kSchemaVersion) + ")");
    }
    ExperimentSpec s;
    s.name = detail::get_string(doc, "name", "", std::string("experiment"));
    if (doc.contains("seed")) {
        const json& v = doc.at("seed");
        if (!v.is_number_integer() || v.get<long long>() < 0) detail::fail("seed", "expected a non-negative integer");
        s.seed = v.get<std::uint64_t>();
    }
    if (!doc.contains("model")) detail::fail("model", "missing required field");
    s.model = detail::parse_model(doc.at("model"));
    if (!doc.contains("solver")) detail::fail("solver", "missing required field");
    s.solver = detail::parse_solver(doc.at("solver"));
    if (doc.contains("checks")) {
        const json& c = doc.at("checks");
        if (!c.is_array()) detail::fail("checks", "expected an array");
        for (std::size_t i = 0; i < c.size(); ++i) s.checks.push_back(detail::parse_check(c[i], "checks[" + std::to_string(i) + "]"));
    }
    if (doc.contains("output")) s.output = detail::parse_output(doc.at("output"));
    validate(s);
    return s;
}

inline ExperimentSpec load_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SpecError(path + ": cannot open spec file");
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_spec(buf.str());
    } catch (const SpecError& e) {
        throw SpecError(path + ": " + e.what());
    }
}

// ------------------------------------------------------------ model builder

inline PayoffMap build_payoff(const BuiltinSpec& b) {
    const std::string label = b.builtin;
    if (b.builtin == "constant") return PayoffMap::constant(b.at("value"));
    if (b.builtin == "affine") {
        const double a = b.at("a"), s = b.at("b"), c = b.at("c");
        return PayoffMap([a, s, c](double t, double x) { return a + s * x + c * t; }, s != 0.0,
                         "affine(" + format_number(a) + ", " + format_number(s) + ", " + format_number(c) + ")");
    }
    const double k = b.at("strike"), scale = b.at("scale"), off = b.at("offset");
    const std::string args = "(" + format_number(k) + ", " + format_number(scale) + ", " + format_number(off) + ")";
    if (b.builtin == "call") {
        return PayoffMap([k, scale, off](double, double x) { return scale * std::max(x - k, 0.0) + off; }, scale != 0.0,
                         "call" + args);
    }
    return PayoffMap([k, scale, off](double, double x) { return scale * std::max(k - x, 0.0) + off; }, scale != 0.0,
                     "put" + args);
}

inline RiskFunction build_risk(const BuiltinSpec& b) {
    return b.builtin == "exponential" ? RiskFunction::exponential(b.at("gamma")) : RiskFunction::identity();
}

inline MarkovModel build_model(const ModelSpec& s) {
    MarkovModel m;
    const double mu = s.dynamics.at("mu"), sigma = s.dynamics.at("sigma");
    if (s.dynamics.builtin == "geometric") {
        m.drift = [mu](double, double x) { return mu * x; };
        m.volatility = [sigma](double, double x) { return sigma * x; };
    } else {
        m.drift = [mu](double, double) { return mu; };
        m.volatility = [sigma](double, double) { return sigma; };
    }
    m.deterministic_state = mu == 0.0 && sigma == 0.0;
    m.x0 = s.dynamics.at("x0");
    m.bundle.r = s.r;
    m.bundle.T = s.T;
    m.bundle.f = build_payoff(s.f);
    m.bundle.L = build_payoff(s.L);
    m.bundle.U = build_payoff(s.U);
    m.bundle.xi = build_payoff(s.xi);
    m.g = build_risk(s.g);
    m.lambda1 = s.lambda1;
    m.lambda2 = s.lambda2;
    m.validate();
    return m;
}

inline SolverGrid solver_grid(const SolverSpec& s) {
    if (s.mode == "ode") return OdeGrid{s.n_t};
    return PdeGrid{s.n_t, s.n_x, s.x_min, s.x_max, s.grid};
}

// --------------------------------------------------------------------- run

struct RunOptions {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    int jobs = 1;
    bool emit_paths = false;
};

struct CheckRow {
    std::string name;
    std::string kind;
    double value = 0.0;
    double reference = 0.0;
    double margin = 0.0;
    double stderr_value = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    std::vector<std::string> failures;  // human-readable reasons when !pass
};

struct RunResult {
    int exit_code = 0;
    std::string solver_mode;
    double value = 0.0;
    double stderr_value = 0.0;
    std::vector<std::string> warnings;
    std::vector<CheckRow> rows;
    std::filesystem::path directory;
};

namespace detail {

struct Context {
    const ExperimentSpec& spec;
    const MarkovModel& model;
    std::shared_ptr<const ValueSurface> surface;  // null in mc mode
    double value = 0.0;
    std::uint64_t seed = 0;
    int jobs = 1;
    std::map<std::size_t, std::shared_ptr<const ValueSurface>> ode_cache;

    std::shared_ptr<const ValueSurface> ode_surface(std::size_t n_t) {
        if (spec.solver.mode == "ode" && spec.solver.n_t == n_t) return surface;
        auto& s = ode_cache[n_t];
        if (!s) s = std::make_shared<const ValueSurface>(solve_ode(model, n_t));
        return s;
    }
};

struct Outcome {
    CheckRow row;
    ojson detail;
};

inline std::size_t count(const CheckSpec& c, const char* key) { return static_cast<std::size_t>(c.numbers.at(key)); }

// Absolute floor for comparisons of two numbers that agree up to round-off.
inline double roundoff(double reference) { return 1e-10 * std::max(1.0, std::fabs(reference)); }

inline ojson estimate_json(const McEstimate& e) {
    return ojson{{"n", e.n}, {"mean_g", e.mean_g}, {"stderr_g", e.stderr_g}, {"value", e.value},
                 {"stderr_value", e.stderr_value}};
}

inline Outcome run_value_match(Context& ctx, const CheckSpec& c) {
    const auto [p1, p2] = optimal_policies(ctx.surface, ctx.model.bundle);
    const SimulationConfig cfg{count(c, "n_steps"), count(c, "n_paths"), ctx.seed, ctx.jobs};
    const McEstimate e = estimate_value(ctx.model, p1, p2, cfg);
    Outcome o;
    o.row.value = e.value;
    o.row.reference = ctx.value;
    o.row.margin = std::fabs(e.value - ctx.value);
    o.row.stderr_value = e.stderr_value;
    o.row.pass = o.row.margin <= c.tolerance * e.stderr_value + roundoff(ctx.value);
    if (!o.row.pass) {
        o.row.failures.push_back("|MC - solver| = " + format_number(o.row.margin) + " exceeds " +
                                 format_number(c.tolerance) + " standard errors (" + format_number(e.stderr_value) + ")");
    }
    o.detail = ojson{{"estimate", estimate_json(e)},
                     {"n_steps", cfg.n_steps},
                     {"clamped_stops", p1.clamp_count() + p2.clamp_count()}};
    return o;
}

inline Outcome run_saddle(Context& ctx, const CheckSpec& c) {
    const auto [p1, p2] = optimal_policies(ctx.surface, ctx.model.bundle);
    std::vector<StoppingPolicy> devs = default_deviations(1, ctx.surface, ctx.model.bundle);
    for (auto& d : default_deviations(2, ctx.surface, ctx.model.bundle)) devs.push_back(d);
    const SimulationConfig cfg{count(c, "n_steps"), count(c, "n_paths"), ctx.seed, ctx.jobs};
    const SaddleReport rep = saddle_check(ctx.model, p1, p2, devs, cfg, c.tolerance);
    Outcome o;
    o.row.value = rep.optimal.value;
    o.row.reference = ctx.value;
    o.row.pass = rep.pass;
    double worst = -std::numeric_limits<double>::infinity();
    ojson list = ojson::array();
    for (const auto& d : rep.deviations) {
        const double excess = d.margin - c.tolerance * d.stderr_margin;
        if (excess > worst) {
            worst = excess;
            o.row.margin = d.margin;
            o.row.stderr_value = d.stderr_margin;
        }
        if (!d.holds) {
            o.row.failures.push_back("player " + std::to_string(d.player) + " deviation '" + d.policy + "' gains " +
                                     format_number(d.margin) + " (stderr " + format_number(d.stderr_margin) + ")");
        }
        list.push_back(ojson{{"player", d.player}, {"policy", d.policy}, {"value", d.value}, {"margin", d.margin},
                             {"stderr", d.stderr_margin}, {"holds", d.holds}});
    }
    o.detail = ojson{{"optimal", estimate_json(rep.optimal)}, {"lower", rep.lower}, {"upper", rep.upper},
                     {"deviations", list}};
    return o;
}

inline Outcome run_recursion(Context& ctx, const CheckSpec& c) {
    const auto surface = ctx.ode_surface(count(c, "n_t"));
    std::vector<double> times = c.times;
    if (times.empty()) {
        for (int k = 0; k < 5; ++k) times.push_back(0.2 * k * ctx.model.horizon());
    }
    Outcome o;
    o.row.pass = true;
    ojson list = ojson::array();
    for (double t : times) {
        const RecursionResult r = recursion_residual(ctx.model, surface, t, static_cast<int>(count(c, "quad_points")));
        const bool ok = std::fabs(r.residual) <= c.tolerance * r.scale;
        const double rel = r.scale > 0.0 ? std::fabs(r.residual) / r.scale : std::fabs(r.residual);
        if (std::fabs(r.residual) >= std::fabs(o.row.value)) o.row.value = r.residual;
        o.row.margin = std::max(o.row.margin, rel);
        if (!ok) {
            o.row.pass = false;
            o.row.failures.push_back("t = " + format_number(t) + ": residual " + format_number(r.residual) +
                                     " exceeds " + format_number(c.tolerance) + " x scale " + format_number(r.scale));
        }
        list.push_back(ojson{{"t", t}, {"residual", r.residual}, {"scale", r.scale}, {"pass", ok}});
    }
    o.detail = ojson{{"n_t", count(c, "n_t")}, {"quad_points", count(c, "quad_points")}, {"times", list}};
    return o;
}

inline Outcome run_martingale(Context& ctx, const CheckSpec& c) {
    const auto surface = ctx.ode_surface(count(c, "n_t"));
    const MartingaleReport rep =
        martingale_check(ctx.model, surface, count(c, "k_max"), count(c, "n_paths"), ctx.seed, ctx.jobs, c.tolerance);
    Outcome o;
    o.row.pass = rep.pass;
    double worst = -std::numeric_limits<double>::infinity();
    ojson props = ojson::array();
    for (const auto& p : rep.properties) {
        ojson steps = ojson::array();
        for (const auto& s : p.steps) {
            const double violation = p.sense == "zero" ? std::fabs(s.mean) : p.sense == "nonpositive" ? s.mean : -s.mean;
            const double excess = violation - c.tolerance * s.stderr_mean;
            if (excess > worst) {
                worst = excess;
                o.row.value = s.mean;
                o.row.margin = violation;
                o.row.stderr_value = s.stderr_mean;
            }
            if (!s.pass) {
                o.row.failures.push_back(p.name + " step " + std::to_string(s.step) + ": mean increment " +
                                         format_number(s.mean) + " is not " + p.sense + " within " +
                                         format_number(c.tolerance) + " x " + format_number(s.stderr_mean));
            }
            steps.push_back(ojson{{"step", s.step}, {"mean", s.mean}, {"stderr", s.stderr_mean}, {"pass", s.pass}});
        }
        props.push_back(ojson{{"name", p.name}, {"sense", p.sense}, {"sigma_policy", p.sigma_policy},
                              {"tau_policy", p.tau_policy}, {"steps", steps}, {"pass", p.pass}});
    }
    o.detail = ojson{{"n_t", count(c, "n_t")}, {"k_max", count(c, "k_max")}, {"n_paths", count(c, "n_paths")},
                     {"properties", props}};
    return o;
}

inline Outcome run_sdg(Context& ctx, const CheckSpec& c) {
    SdgConfig cfg;
    cfg.n_steps = count(c, "n_steps");
    cfg.n_paths = count(c, "n_paths");
    cfg.seed = ctx.seed;
    cfg.jobs = ctx.jobs;
    cfg.quad_points = static_cast<int>(count(c, "quad_points"));
    cfg.deviations_per_player = count(c, "deviations");
    cfg.blocks = count(c, "blocks");
    cfg.band = c.tolerance;
    cfg.quad_tolerance = c.numbers.at("quad_tolerance");
    const RepresentationReport rep = representation_check(ctx.model, ctx.surface, cfg);
    Outcome o;
    o.row.value = rep.sdg_value;
    o.row.reference = rep.bsde_value;
    o.row.margin = std::fabs(rep.difference);
    o.row.stderr_value = rep.stderr_value;
    o.row.pass = rep.pass;
    if (!rep.value_holds) {
        o.row.failures.push_back("representation differs by " + format_number(rep.difference) + " (" + rep.method + ")");
    }
    ojson list = ojson::array();
    for (const auto& d : rep.deviations) {
        if (!d.holds) {
            o.row.failures.push_back("player " + std::to_string(d.player) + " control '" + d.policy + "' gains " +
                                     format_number(d.margin) + " (stderr " + format_number(d.stderr_margin) + ")");
        }
        list.push_back(ojson{{"player", d.player}, {"policy", d.policy}, {"value", d.value}, {"margin", d.margin},
                             {"stderr", d.stderr_margin}, {"holds", d.holds}});
    }
    o.detail = ojson{{"method", rep.method},         {"sdg_value", rep.sdg_value}, {"stderr_value", rep.stderr_value},
                     {"bsde_value", rep.bsde_value}, {"difference", rep.difference}, {"scale", rep.scale},
                     {"value_holds", rep.value_holds}, {"deviations", list}};
    return o;
}

inline Outcome run_colehopf(Context& ctx, const CheckSpec& c) {
    const SolverGrid grid = solver_grid(ctx.spec.solver);
    const bool exponential = ctx.model.g.is_exponential();
    const ValueSurface direct =
        exponential ? solve_exponential_quadratic(ctx.model, grid) : solve_risk_neutral(ctx.model, grid);
    const ValueSurface& base = *ctx.surface;
    double worst = 0.0;
    for (std::size_t k = 0; k < base.q.size(); ++k) worst = std::max(worst, std::fabs(base.q[k] - direct.q[k]));
    Outcome o;
    o.row.value = direct.q_at(0.0, ctx.model.x0);
    o.row.reference = ctx.value;
    o.row.margin = worst;
    o.row.pass = worst <= c.tolerance;
    if (!o.row.pass) {
        o.row.failures.push_back("max-norm gap " + format_number(worst) + " exceeds " + format_number(c.tolerance));
    }
    o.detail = ojson{{"direct", exponential ? "exponential-quadratic" : "risk-neutral"},
                     {"max_norm", worst},
                     {"direct_value", o.row.value},
                     {"nodes", base.q.size()}};
    return o;
}

inline Outcome run_regression(Context& ctx, const CheckSpec& c) {
    const RegressionConfig cfg{count(c, "n_t"), count(c, "n_paths"), static_cast<int>(count(c, "basis_degree")),
                               ctx.seed, ctx.jobs};
    const RegressionResult r = solve_regression_mc(ctx.model, cfg);
    Outcome o;
    o.row.value = r.value;
    o.row.reference = ctx.value;
    o.row.margin = std::fabs(r.value - ctx.value);
    o.row.stderr_value = r.stderr_value;
    o.row.pass = o.row.margin <= c.tolerance * r.stderr_value + roundoff(ctx.value);
    if (!o.row.pass) {
        o.row.failures.push_back("|regression - solver| = " + format_number(o.row.margin) + " exceeds " +
                                 format_number(c.tolerance) + " standard errors (" + format_number(r.stderr_value) + ")");
    }
    o.detail = ojson{{"qbar0", r.qbar0}, {"stderr_qbar", r.stderr_qbar}, {"value", r.value},
                     {"stderr_value", r.stderr_value}, {"warnings", r.warnings}};
    return o;
}

inline Outcome run_check(Context& ctx, const CheckSpec& c) {
    Outcome o;
    if (c.kind == "value_match") o = run_value_match(ctx, c);
    else if (c.kind == "saddle") o = run_saddle(ctx, c);
    else if (c.kind == "recursion") o = run_recursion(ctx, c);
    else if (c.kind == "martingale") o = run_martingale(ctx, c);
    else if (c.kind == "sdg") o = run_sdg(ctx, c);
    else if (c.kind == "colehopf") o = run_colehopf(ctx, c);
    else o = run_regression(ctx, c);
    o.row.value += 0.0;  // no negative zeros in the reports
    o.row.reference += 0.0;
    o.row.margin += 0.0;
    o.row.name = c.name;
    o.row.kind = c.kind;
    o.row.tolerance = c.tolerance;
    return o;
}

inline void write_json(const std::filesystem::path& file, const ojson& doc) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << doc.dump(2) << '\n';
}

}  // namespace detail

/// Runs the solver and every check, writes the artifacts and returns the
/// exit code (0 all checks pass, 1 otherwise). Invalid input throws.
inline RunResult run(ExperimentSpec spec, const RunOptions& opt) {
    if (opt.seed) spec.seed = opt.seed;
    require_seed(spec);
    if (opt.jobs < 1) throw SpecError("--jobs must be >= 1");
    const MarkovModel model = build_model(spec.model);
    RunResult res;
    res.solver_mode = spec.solver.mode;
    res.directory = opt.out_dir ? *opt.out_dir : spec.output.directory;
    const std::uint64_t seed = spec.seed.value_or(0);

    detail::Context ctx{spec, model, nullptr, 0.0, seed, opt.jobs, {}};
    ojson solver{{"mode", spec.solver.mode}, {"n_t", spec.solver.n_t}};
    if (spec.solver.mode == "mc") {
        const RegressionResult r = solve_regression_mc(
            model, RegressionConfig{spec.solver.n_t, spec.solver.n_paths, spec.solver.basis_degree, seed, opt.jobs});
        res.value = r.value;
        res.stderr_value = r.stderr_value;
        res.warnings = r.warnings;
        solver["n_paths"] = spec.solver.n_paths;
        solver["basis_degree"] = spec.solver.basis_degree;
        solver["qbar0"] = r.qbar0;
        solver["stderr_qbar"] = r.stderr_qbar;
    } else {
        ctx.surface = std::make_shared<const ValueSurface>(solve(model, solver_grid(spec.solver)));
        res.value = ctx.surface->q_at(0.0, model.x0);
        solver["qbar0"] = ctx.surface->qbar_at(0.0, model.x0);
        if (spec.solver.mode == "pde") {
            solver["n_x"] = spec.solver.n_x;
            solver["x_min"] = spec.solver.x_min;
            solver["x_max"] = spec.solver.x_max;
            solver["grid"] = spec.solver.grid == GridKind::Log ? "log" : "linear";
        }
    }
    ctx.value = res.value;
    solver["g"] = model.g.name();
    solver["x0"] = model.x0;
    solver["value"] = res.value;
    solver["stderr_value"] = res.stderr_value;
    solver["arrow_pratt"] = arrow_pratt(model.g, res.value);
    solver["warnings"] = res.warnings;

    std::vector<detail::Outcome> outcomes;
    for (const auto& c : spec.checks) outcomes.push_back(detail::run_check(ctx, c));

    std::filesystem::create_directories(res.directory);
    ojson summary = ojson::object();
    for (const auto& o : outcomes) {
        const CheckRow& r = o.row;
        summary[r.name] = ojson{{"value", r.value}, {"reference", r.reference}, {"margin", r.margin},
                                {"stderr", r.stderr_value}, {"pass", r.pass}};
        res.rows.push_back(r);
    }
    detail::write_json(res.directory / "summary.json", summary);
    if (spec.output.json_files) {
        detail::write_json(res.directory / "solver.json", solver);
        for (const auto& o : outcomes) {
            ojson doc{{"name", o.row.name},     {"kind", o.row.kind},   {"tolerance", o.row.tolerance},
                      {"value", o.row.value},   {"reference", o.row.reference}, {"margin", o.row.margin},
                      {"stderr", o.row.stderr_value}, {"pass", o.row.pass}, {"failures", o.row.failures},
                      {"details", o.detail}};
            detail::write_json(res.directory / ("check_" + o.row.name + ".json"), doc);
        }
    }
    if (spec.output.csv_files) {
        if (ctx.surface) {
            std::ofstream out(res.directory / "surface.csv", std::ios::binary);
            ctx.surface->write_csv(out);
        }
        if (spec.seed) {
            const std::uint64_t key = derive_seed(seed, 0);
            std::ofstream out(res.directory / "streams.csv", std::ios::binary);
            write_streams_csv(out, sample_stream(model.lambda1, model.horizon(), key, 1),
                              sample_stream(model.lambda2, model.horizon(), key, 2));
        }
    }
    if (opt.emit_paths) {
        if (!ctx.surface) throw SpecError("--emit-paths needs an ode or pde solver");
        SimulationConfig cfg{200, 10000, seed, opt.jobs};
        for (const auto& c : spec.checks) {
            if (c.kind == "value_match") {
                cfg.n_steps = detail::count(c, "n_steps");
                cfg.n_paths = detail::count(c, "n_paths");
                break;
            }
        }
        const auto [p1, p2] = optimal_policies(ctx.surface, model.bundle);
        std::ofstream out(res.directory / "paths.csv", std::ios::binary);
        write_paths_csv(out, simulate_games(model, p1, p2, cfg));
    }
    res.exit_code = std::all_of(res.rows.begin(), res.rows.end(), [](const CheckRow& r) { return r.pass; }) ? 0 : 1;
    return res;
}

/// Plain-text table of a run for the terminal.
inline void print_table(std::ostream& os, const ExperimentSpec& spec, const RunResult& res) {
    char line[256];
    os << "experiment " << spec.name << "\n";
    std::snprintf(line, sizeof line, "solver %s: Q(0, x0) = %.10g", res.solver_mode.c_str(), res.value);
    os << line;
    if (res.stderr_value > 0.0) os << " (stderr " << format_number(res.stderr_value) << ")";
    os << "\n";
    for (const auto& w : res.warnings) os << "warning: " << w << "\n";
    if (res.rows.empty()) return;
    std::snprintf(line, sizeof line, "%-20s %-12s %14s %14s %12s %12s  %s\n", "check", "kind", "value", "reference",
                  "margin", "stderr", "result");
    os << line;
    for (const auto& r : res.rows) {
        std::snprintf(line, sizeof line, "%-20s %-12s %14.8g %14.8g %12.4g %12.4g  %s\n", r.name.c_str(),
                      r.kind.c_str(), r.value, r.reference, r.margin, r.stderr_value, r.pass ? "PASS" : "FAIL");
        os << line;
    }
    std::size_t failed = 0;
    for (const auto& r : res.rows) {
        if (r.pass) continue;
        ++failed;
        os << "FAIL " << r.name << " (tolerance " << format_number(r.tolerance) << ")\n";
        for (const auto& f : r.failures) os << "  " << f << "\n";
    }
    if (failed == 0) {
        os << "all " << res.rows.size() << " checks passed\n";
    } else {
        os << failed << " of " << res.rows.size() << " checks failed\n";
    }
}

}  // namespace dynkin::experiment
