#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dynkin/markov.hpp"
#include "dynkin/payoff.hpp"
#include "dynkin/risk.hpp"
#include "dynkin/value_surface.hpp"

namespace dynkin {

class ModeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class CflError : public std::runtime_error {
public:
    CflError(const std::string& what, std::size_t required_n_t) : std::runtime_error(what), required_n_t(required_n_t) {}
    std::size_t required_n_t;
};

class OverflowError : public std::overflow_error {
public:
    using std::overflow_error::overflow_error;
};

/// -l1 (q - ubar)^+ + l2 (lbar - q)^+ - r q
inline double driver(double q, double ubar, double lbar, double l1, double l2, double r) {
    return -l1 * std::max(q - ubar, 0.0) + l2 * std::max(lbar - q, 0.0) - r * q;
}

struct OdeGrid {
    std::size_t n_t = 1000;
};

struct PdeGrid {
    std::size_t n_t = 1000;
    std::size_t n_x = 200;
    double x_min = 0.0;
    double x_max = 1.0;
    GridKind kind = GridKind::Linear;
};

using SolverGrid = std::variant<OdeGrid, PdeGrid>;

/// A terminal-value problem y_T = terminal(x), -dy = D(t, x, y, z) dt - z dW.
/// When y is a transform of the raw value, `to_raw`/`from_raw` map between the
/// two so the boundary condition is imposed on the raw value.
struct BackwardProblem {
    std::function<double(double x)> terminal;
    std::function<double(double t, double x, double y, double z)> driver;
    std::function<double(double t, double y)> to_raw;
    std::function<double(double t, double q)> from_raw;
};

namespace detail {

inline void require_time_only(const MarkovModel& m) {
    if (!m.bundle.state_independent()) {
        throw ModeError("mode error: the ODE solver needs payoffs f, L, U, xi that do not depend on the state");
    }
}

inline void require_time_only_f(const MarkovModel& m) {
    if (m.bundle.f.state_dependent()) {
        throw ModeError("mode error: the running payoff f must not depend on the state");
    }
}

inline void check_finite(double v, const char* what, double t, double x) {
    if (!std::isfinite(v)) {
        throw std::runtime_error(std::string("non-finite ") + what + " at t=" + format_number(t) + ", x=" +
                                 format_number(x));
    }
}

// Classical RK4 backward from T on a uniform grid; one value per time.
inline std::vector<double> integrate_ode(const MarkovModel& m, const std::vector<double>& times,
                                         const BackwardProblem& p) {
    const double x = m.x0;
    std::vector<double> y(times.size());
    y.back() = p.terminal(x);
    check_finite(y.back(), "terminal value", times.back(), x);
    for (std::size_t n = times.size() - 1; n > 0; --n) {
        const double t = times[n];
        const double h = t - times[n - 1];
        const double yn = y[n];
        const double k1 = p.driver(t, x, yn, 0.0);
        const double k2 = p.driver(t - 0.5 * h, x, yn + 0.5 * h * k1, 0.0);
        const double k3 = p.driver(t - 0.5 * h, x, yn + 0.5 * h * k2, 0.0);
        const double k4 = p.driver(times[n - 1], x, yn + h * k3, 0.0);
        y[n - 1] = yn + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        check_finite(y[n - 1], "solution", times[n - 1], x);
    }
    return y;
}

struct PdeLayout {
    std::vector<double> x;  // physical nodes
    double step = 0.0;      // spacing in the grid coordinate (x or ln x)
};

inline PdeLayout layout(const PdeGrid& g) {
    if (g.n_x < 2) throw std::invalid_argument("PDE grid needs n_x >= 2");
    if (!(g.x_min < g.x_max)) throw std::invalid_argument("PDE grid needs x_min < x_max");
    PdeLayout l;
    l.x.resize(g.n_x + 1);
    if (g.kind == GridKind::Log) {
        if (!(g.x_min > 0.0)) throw std::invalid_argument("log grid needs x_min > 0");
        const double y0 = std::log(g.x_min);
        l.step = (std::log(g.x_max) - y0) / static_cast<double>(g.n_x);
        for (std::size_t j = 0; j <= g.n_x; ++j) l.x[j] = std::exp(y0 + l.step * static_cast<double>(j));
        l.x.front() = g.x_min;
        l.x.back() = g.x_max;
    } else {
        l.step = (g.x_max - g.x_min) / static_cast<double>(g.n_x);
        for (std::size_t j = 0; j <= g.n_x; ++j) l.x[j] = g.x_min + l.step * static_cast<double>(j);
        l.x.back() = g.x_max;
    }
    return l;
}

// Volatility in the grid coordinate: sigma for a linear grid, sigma/x for a log grid.
inline double grid_vol(const MarkovModel& m, GridKind kind, double t, double x) {
    const double s = m.volatility(t, x);
    return kind == GridKind::Log ? s / x : s;
}

inline double grid_drift(const MarkovModel& m, GridKind kind, double t, double x) {
    if (kind == GridKind::Linear) return m.drift(t, x);
    const double s = m.volatility(t, x) / x;
    return m.drift(t, x) / x - 0.5 * s * s;
}

inline void check_cfl(const MarkovModel& m, const PdeGrid& g, const PdeLayout& l, const std::vector<double>& times) {
    double max_var = 0.0;
    for (double t : times) {
        for (double x : l.x) {
            const double s = grid_vol(m, g.kind, t, x);
            check_finite(s, "volatility", t, x);
            max_var = std::max(max_var, s * s);
        }
    }
    const double dt = m.horizon() / static_cast<double>(g.n_t);
    const double limit = l.step * l.step / max_var;
    if (max_var > 0.0 && dt > limit) {
        const auto required = static_cast<std::size_t>(std::ceil(m.horizon() / limit));
        throw CflError("CFL violation: dt=" + format_number(dt) + " exceeds dx^2/max(sigma^2)=" +
                           format_number(limit) + "; use n_t >= " + std::to_string(required),
                       required);
    }
}

// d/dx by central differences (one-sided at the ends) in the grid coordinate.
inline void gradient(const std::vector<double>& y, double step, std::vector<double>& out) {
    const std::size_t n = y.size();
    out.resize(n);
    for (std::size_t j = 1; j + 1 < n; ++j) out[j] = (y[j + 1] - y[j - 1]) / (2.0 * step);
    out[0] = (y[1] - y[0]) / step;
    out[n - 1] = (y[n - 1] - y[n - 2]) / step;
}

struct PdeSolution {
    std::vector<double> y;  // row-major (n_t + 1) x (n_x + 1)
    std::vector<double> z;
};

// Method of lines: central differences in space, classical RK4 backward in
// time. After every stage the raw value is extrapolated linearly in x at both
// boundaries (zero second derivative).
inline PdeSolution integrate_pde(const MarkovModel& m, const PdeGrid& g, const PdeLayout& l,
                                 const std::vector<double>& times, const BackwardProblem& p) {
    check_cfl(m, g, l, times);
    const std::size_t nx = l.x.size();
    const std::size_t nt = times.size();
    PdeSolution s;
    s.y.resize(nt * nx);
    s.z.resize(nt * nx);
    std::vector<double> cur(nx);
    std::vector<double> stage(nx);
    std::vector<double> grad(nx);
    std::vector<double> k1(nx), k2(nx), k3(nx), k4(nx);
    for (std::size_t j = 0; j < nx; ++j) {
        cur[j] = p.terminal(l.x[j]);
        check_finite(cur[j], "terminal value", times.back(), l.x[j]);
    }
    auto store = [&](std::size_t n, const std::vector<double>& row) {
        gradient(row, l.step, grad);
        for (std::size_t j = 0; j < nx; ++j) {
            s.y[n * nx + j] = row[j];
            s.z[n * nx + j] = grid_vol(m, g.kind, times[n], l.x[j]) * grad[j];
        }
    };
    const double h2 = l.step * l.step;
    // -dy/dt on interior nodes
    auto rhs = [&](double t, const std::vector<double>& y, std::vector<double>& k) {
        for (std::size_t j = 1; j + 1 < nx; ++j) {
            const double x = l.x[j];
            const double d1 = (y[j + 1] - y[j - 1]) / (2.0 * l.step);
            const double d2 = (y[j + 1] - 2.0 * y[j] + y[j - 1]) / h2;
            const double vol = grid_vol(m, g.kind, t, x);
            k[j] = grid_drift(m, g.kind, t, x) * d1 + 0.5 * vol * vol * d2 + p.driver(t, x, y[j], vol * d1);
        }
    };
    const auto& x = l.x;
    auto edge = [&](double t, std::size_t at, std::size_t n1, std::size_t n2, std::vector<double>& y) {
        const double w = (x[at] - x[n1]) / (x[n1] - x[n2]);
        if (!p.to_raw) {
            y[at] = y[n1] + w * (y[n1] - y[n2]);
            return;
        }
        const double q1 = p.to_raw(t, y[n1]);
        const double q2 = p.to_raw(t, y[n2]);
        y[at] = p.from_raw(t, q1 + w * (q1 - q2));
    };
    auto extrapolate = [&](double t, std::vector<double>& y) {
        edge(t, 0, 1, 2, y);
        edge(t, nx - 1, nx - 2, nx - 3, y);
    };
    auto advance = [&](double t, const std::vector<double>& k, double c) {
        for (std::size_t j = 1; j + 1 < nx; ++j) stage[j] = cur[j] + c * k[j];
        extrapolate(t, stage);
    };
    store(nt - 1, cur);
    for (std::size_t n = nt - 1; n > 0; --n) {
        const double t = times[n];
        const double h = t - times[n - 1];
        rhs(t, cur, k1);
        advance(t - 0.5 * h, k1, 0.5 * h);
        rhs(t - 0.5 * h, stage, k2);
        advance(t - 0.5 * h, k2, 0.5 * h);
        rhs(t - 0.5 * h, stage, k3);
        advance(times[n - 1], k3, h);
        rhs(times[n - 1], stage, k4);
        for (std::size_t j = 1; j + 1 < nx; ++j) {
            cur[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            check_finite(cur[j], "solution", times[n - 1], l.x[j]);
        }
        extrapolate(times[n - 1], cur);
        store(n - 1, cur);
    }
    return s;
}

struct Solved {
    std::vector<double> times;
    std::vector<double> states;
    GridKind kind = GridKind::Linear;
    std::vector<double> y;
    std::vector<double> z;
};

inline Solved integrate(const MarkovModel& m, const SolverGrid& grid, const BackwardProblem& p) {
    Solved out;
    if (const auto* o = std::get_if<OdeGrid>(&grid)) {
        if (o->n_t < 10) throw std::invalid_argument("ODE grid needs n_t >= 10");
        require_time_only(m);
        out.times = uniform_times(m.horizon(), o->n_t);
        out.y = integrate_ode(m, out.times, p);
        out.z.assign(out.y.size(), 0.0);
        return out;
    }
    const auto& g = std::get<PdeGrid>(grid);
    if (g.n_t < 1) throw std::invalid_argument("PDE grid needs n_t >= 1");
    const PdeLayout l = layout(g);
    out.times = uniform_times(m.horizon(), g.n_t);
    out.states = l.x;
    out.kind = g.kind;
    PdeSolution s = integrate_pde(m, g, l, out.times, p);
    out.y = std::move(s.y);
    out.z = std::move(s.z);
    return out;
}

}  // namespace detail

/// Auxiliary obstacle h-bar(t, x) for a time-only running payoff.
inline double auxiliary_at(const MarkovModel& m, const RunningIntegral& F, Obstacle which, double t, double x) {
    const auto& b = m.bundle;
    const double tt = which == Obstacle::Xi ? b.T : t;
    return to_auxiliary(m.g, b.r, tt, evaluate(b, which, tt, x), F(tt));
}

/// The transformed problem: terminal xi-bar and the penalized driver in
/// auxiliary coordinates.
inline BackwardProblem transformed_problem(const MarkovModel& m, const RunningIntegral& F) {
    const double r = m.bundle.r;
    return {
        [&m, &F](double x) { return auxiliary_at(m, F, Obstacle::Xi, m.bundle.T, x); },
        [&m, &F](double t, double x, double y, double) {
            return driver(y, auxiliary_at(m, F, Obstacle::U, t, x), auxiliary_at(m, F, Obstacle::L, t, x), m.lambda1,
                          m.lambda2, m.bundle.r);
        },
        [&m, &F, r](double t, double y) { return value_from_qbar(m.g, r, t, y, F(t)); },
        [&m, &F, r](double t, double q) { return to_auxiliary(m.g, r, t, q, F(t)); },
    };
}

/// Solves the transformed BSDE for (Q-bar, Z-bar) and pulls back to Q.
inline ValueSurface solve(const MarkovModel& m, const SolverGrid& grid) {
    m.validate();
    detail::require_time_only_f(m);
    const std::size_t n_t = std::visit([](const auto& g) { return g.n_t; }, grid);
    const RunningIntegral F(m.bundle, uniform_times(m.horizon(), n_t));
    const detail::Solved s = detail::integrate(m, grid, transformed_problem(m, F));
    ValueSurface v;
    v.times = s.times;
    v.states = s.states;
    v.grid = s.kind;
    v.qbar = s.y;
    v.zbar = s.z;
    v.q.resize(v.qbar.size());
    for (std::size_t i = 0; i < v.n_t(); ++i) {
        for (std::size_t j = 0; j < v.n_x(); ++j) {
            const std::size_t k = v.index(i, j);
            v.q[k] = value_from_qbar(m.g, m.bundle.r, v.times[i], v.qbar[k], F.at_node(i));
        }
    }
    return v;
}

inline ValueSurface solve_ode(const MarkovModel& m, std::size_t n_t) { return solve(m, OdeGrid{n_t}); }

inline ValueSurface solve_pde(const MarkovModel& m, const PdeGrid& grid) { return solve(m, grid); }

namespace detail {

// Fills Q-bar and Z-bar of a surface whose raw value Q and Z were solved directly.
inline ValueSurface from_raw(const MarkovModel& m, const RunningIntegral& F, Solved s) {
    ValueSurface v;
    v.times = std::move(s.times);
    v.states = std::move(s.states);
    v.grid = s.kind;
    v.q = std::move(s.y);
    v.qbar.resize(v.q.size());
    v.zbar.resize(v.q.size());
    const double r = m.bundle.r;
    for (std::size_t i = 0; i < v.n_t(); ++i) {
        const double t = v.times[i];
        for (std::size_t j = 0; j < v.n_x(); ++j) {
            const std::size_t k = v.index(i, j);
            const double tilde = std::exp(-r * t) * v.q[k] + F.at_node(i);
            v.qbar[k] = std::exp(r * t) * m.g(tilde);
            v.zbar[k] = m.g.derivative(tilde) * s.z[k];
        }
    }
    return v;
}

}  // namespace detail

/// Penalized double-obstacle BSDE in raw coordinates (identity criterion).
inline ValueSurface solve_risk_neutral(const MarkovModel& m, const SolverGrid& grid) {
    m.validate();
    if (!m.g.is_identity()) throw ModeError("mode error: the risk-neutral solver needs the identity risk function");
    detail::require_time_only_f(m);
    const auto& b = m.bundle;
    const std::size_t n_t = std::visit([](const auto& g) { return g.n_t; }, grid);
    const RunningIntegral F(b, uniform_times(b.T, n_t));
    BackwardProblem p{
        [&b](double x) { return b.xi(b.T, x); },
        [&m, &b](double t, double x, double y, double) {
            return b.f(t, x) - m.lambda1 * std::max(y - b.U(t, x), 0.0) + m.lambda2 * std::max(b.L(t, x) - y, 0.0) -
                   b.r * y;
        },
        {},
        {},
    };
    return detail::from_raw(m, F, detail::integrate(m, grid, p));
}

/// Quadratic-growth BSDE for the exponential criterion in raw coordinates.
inline ValueSurface solve_exponential_quadratic(const MarkovModel& m, const SolverGrid& grid) {
    m.validate();
    if (!m.g.is_exponential()) {
        throw ModeError("mode error: the exponential-quadratic solver needs the exponential risk function");
    }
    detail::require_time_only_f(m);
    const auto& b = m.bundle;
    const double gamma = m.g.gamma();
    const std::size_t n_t = std::visit([](const auto& g) { return g.n_t; }, grid);
    const RunningIntegral F(b, uniform_times(b.T, n_t));
    auto guarded_expm1 = [](double a) {
        if (a > 700.0) {
            throw OverflowError("overflow in exponential driver (argument " + format_number(a) +
                                "): use a smaller gamma or rescale the payoffs");
        }
        return std::expm1(a);
    };
    BackwardProblem p{
        [&b](double x) { return b.xi(b.T, x); },
        [&m, &b, gamma, guarded_expm1](double t, double x, double y, double z) {
            const double down = std::exp(-b.r * t);
            const double up = std::exp(b.r * t);
            const double a = gamma * down * (y - b.U(t, x));
            const double c = gamma * down * (y - b.L(t, x));
            const double stop1 = a > 0.0 ? m.lambda1 / gamma * up * guarded_expm1(a) : 0.0;
            const double stop2 = c < 0.0 ? -m.lambda2 / gamma * up * std::expm1(c) : 0.0;
            return b.f(t, x) - stop1 + stop2 - b.r * y - 0.5 * gamma * down * z * z;
        },
        {},
        {},
    };
    return detail::from_raw(m, F, detail::integrate(m, grid, p));
}

}  // namespace dynkin
