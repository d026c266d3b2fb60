#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dynkin/risk.hpp"

namespace dynkin {

/// A payoff map (time, state) -> value. `state_dependent` is false when the
/// map ignores the state, which the deterministic solvers require.
class PayoffMap {
public:
    PayoffMap() : PayoffMap([](double, double) { return 0.0; }, false, "constant(0)") {}

    PayoffMap(std::function<double(double, double)> fn, bool state_dependent, std::string label = {})
        : fn_(std::move(fn)), state_dependent_(state_dependent), label_(std::move(label)) {}

    static PayoffMap constant(double c) {
        return PayoffMap([c](double, double) { return c; }, false, "constant(" + format_number(c) + ")");
    }

    double operator()(double t, double x) const { return fn_(t, x); }
    bool state_dependent() const { return state_dependent_; }
    const std::string& label() const { return label_; }

private:
    std::function<double(double, double)> fn_;
    bool state_dependent_ = false;
    std::string label_;
};

/// Discount rate, running payoff f, obstacles L (max player stops first or
/// simultaneously) and U (min player stops strictly first), terminal payoff
/// xi evaluated at (T, x), and the finite horizon T. No ordering between L
/// and U is assumed.
struct PayoffBundle {
    double r = 0.0;
    PayoffMap f = PayoffMap::constant(0.0);
    PayoffMap L = PayoffMap::constant(0.0);
    PayoffMap U = PayoffMap::constant(0.0);
    PayoffMap xi = PayoffMap::constant(0.0);
    double T = 1.0;

    void validate() const {
        if (!(r >= 0.0) || !std::isfinite(r)) throw std::invalid_argument("discount rate r must be finite and >= 0");
        if (!(T > 0.0) || !std::isfinite(T)) throw std::invalid_argument("horizon T must be finite and > 0");
    }

    bool state_independent() const {
        return !f.state_dependent() && !L.state_dependent() && !U.state_dependent() && !xi.state_dependent();
    }
};

enum class Obstacle { L, U, Xi };

inline double evaluate(const PayoffBundle& b, Obstacle which, double t, double x) {
    switch (which) {
        case Obstacle::L: return b.L(t, x);
        case Obstacle::U: return b.U(t, x);
        case Obstacle::Xi: return b.xi(b.T, x);
    }
    return 0.0;
}

/// A state trajectory sampled on an increasing time grid starting at 0.
struct StatePath {
    std::vector<double> times;
    std::vector<double> states;

    static StatePath constant(double x, double T, std::size_t steps = 1) {
        StatePath p;
        for (std::size_t i = 0; i <= steps; ++i) {
            p.times.push_back(T * static_cast<double>(i) / static_cast<double>(steps));
            p.states.push_back(x);
        }
        return p;
    }

    double horizon() const { return times.back(); }

    // Index j with times[j] <= t < times[j+1], clamped to the last segment.
    std::size_t segment(double t) const {
        auto it = std::upper_bound(times.begin(), times.end(), t);
        if (it == times.begin()) return 0;
        const auto j = static_cast<std::size_t>(std::distance(times.begin(), it)) - 1;
        return std::min(j, times.size() - 2);
    }

    double state_at(double t) const {
        if (times.size() == 1) return states.front();
        const std::size_t j = segment(t);
        const double t0 = times[j];
        const double t1 = times[j + 1];
        if (t <= t0) return states[j];
        if (t >= t1) return states[j + 1];
        const double w = (t - t0) / (t1 - t0);
        return states[j] + w * (states[j + 1] - states[j]);
    }
};

/// Trapezoid value of int_0^t e^{-ru} f(u, X_u) du on the path grid; a final
/// partial step uses the interpolated state.
inline double running_integral(const PayoffBundle& b, const StatePath& path, double t) {
    if (t <= 0.0 || path.times.size() < 2) return 0.0;
    auto integrand = [&](double u, double x) { return std::exp(-b.r * u) * b.f(u, x); };
    CompensatedSum acc;
    for (std::size_t j = 0; j + 1 < path.times.size(); ++j) {
        const double t0 = path.times[j];
        if (t0 >= t) break;
        const double t1 = std::min(path.times[j + 1], t);
        const double x1 = t1 < path.times[j + 1] ? path.state_at(t1) : path.states[j + 1];
        acc.add(0.5 * (t1 - t0) * (integrand(t0, path.states[j]) + integrand(t1, x1)));
    }
    return acc.value();
}

/// Running discounted integral F(t) = int_0^t e^{-ru} f(u) du for a
/// state-independent f, tabulated on a time grid by the trapezoid rule.
class RunningIntegral {
public:
    RunningIntegral() = default;

    RunningIntegral(const PayoffBundle& b, std::vector<double> times) : r_(b.r), f_(b.f), times_(std::move(times)) {
        if (f_.state_dependent()) {
            throw std::logic_error("mode error: the running payoff f must be state-independent for this solver");
        }
        values_.assign(times_.size(), 0.0);
        CompensatedSum acc;
        for (std::size_t j = 1; j < times_.size(); ++j) {
            acc.add(0.5 * (times_[j] - times_[j - 1]) * (integrand(times_[j - 1]) + integrand(times_[j])));
            values_[j] = acc.value();
        }
    }

    double at_node(std::size_t j) const { return values_[j]; }

    double operator()(double t) const {
        if (times_.empty() || t <= times_.front()) return 0.0;
        auto it = std::upper_bound(times_.begin(), times_.end(), t);
        const auto j = static_cast<std::size_t>(std::distance(times_.begin(), it)) - 1;
        if (j + 1 >= times_.size()) {
            const double tl = times_.back();
            return values_.back() + 0.5 * (t - tl) * (integrand(tl) + integrand(t));
        }
        const double t0 = times_[j];
        return values_[j] + 0.5 * (t - t0) * (integrand(t0) + integrand(t));
    }

private:
    double integrand(double u) const { return std::exp(-r_ * u) * f_(u, 0.0); }

    double r_ = 0.0;
    PayoffMap f_;
    std::vector<double> times_;
    std::vector<double> values_;
};

inline void check_time(const PayoffBundle& b, double t) {
    if (!(t >= 0.0) || t > b.T) {
        throw std::out_of_range("time " + format_number(t) + " outside [0, " + format_number(b.T) + "]");
    }
}

/// Discounted coordinates: h~_t = e^{-rt} h_t + int_0^t e^{-ru} f_u du.
inline double discounted_payoff(const PayoffBundle& b, Obstacle which, double t, const StatePath& path) {
    if (which == Obstacle::Xi) t = b.T;
    check_time(b, t);
    const double x = path.state_at(t);
    return std::exp(-b.r * t) * evaluate(b, which, t, x) + running_integral(b, path, t);
}

/// Auxiliary coordinates: h-bar_t = e^{rt} g(h~_t).
inline double auxiliary_payoff(const RiskFunction& g, const PayoffBundle& b, Obstacle which, double t,
                               const StatePath& path) {
    if (which == Obstacle::Xi) t = b.T;
    return std::exp(b.r * t) * g(discounted_payoff(b, which, t, path));
}

/// Same transform from a raw payoff value and an accumulated running integral.
inline double to_auxiliary(const RiskFunction& g, double r, double t, double raw, double running) {
    return std::exp(r * t) * g(std::exp(-r * t) * raw + running);
}

/// Pullback Q_t = e^{r t'} g^{-1}(e^{-r t'} qbar) - e^{r t'} F(t'), t' = min(t, T),
/// where F is the accumulated discounted running payoff.
inline double value_from_qbar(const RiskFunction& g, double r, double t, double qbar, double running) {
    const double growth = std::exp(r * t);
    return growth * g.inverse(qbar / growth) - growth * running;
}

inline double value_from_qbar(const RiskFunction& g, const PayoffBundle& b, double t, double qbar,
                              const StatePath& path) {
    if (!(t >= 0.0)) throw std::out_of_range("time must be >= 0");
    const double tc = std::min(t, b.T);
    return value_from_qbar(g, b.r, tc, qbar, running_integral(b, path, tc));
}

}  // namespace dynkin
