#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dynkin/stats.hpp"

namespace dynkin {

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

inline std::string format_number(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

/// Strictly increasing criterion g together with its inverse.
///
/// The nonlinear expectation of a random payoff R is g^{-1}(E[g(R)]). Three
/// kinds are supported: the identity (risk neutral), the exponential utility
/// g(x) = -exp(-gamma x), and a user-supplied monotone map on an interval.
/// Custom maps without an explicit inverse are inverted by bisection.
class RiskFunction {
public:
    struct Identity {};
    struct Exponential {
        double gamma;
    };
    struct Custom {
        std::function<double(double)> forward;
        std::function<double(double)> inverse;  // empty: bisection
        double lower;
        double upper;
        double fd_step;
    };

    // Smallest magnitude admitted by the exponential inverse; -ln(-y) is
    // evaluated only for y <= -kExpInverseFloor.
    static constexpr double kExpInverseFloor = 1e-300;

    static RiskFunction identity() { return RiskFunction(Identity{}); }

    static RiskFunction exponential(double gamma) {
        if (!(gamma > 0.0) || !std::isfinite(gamma)) {
            throw std::invalid_argument("exponential risk function needs gamma > 0, got " + format_number(gamma));
        }
        return RiskFunction(Exponential{gamma});
    }

    static RiskFunction custom(std::function<double(double)> forward, double lower, double upper,
                               std::function<double(double)> inverse = {}, double fd_step = 1e-4) {
        if (!forward) throw std::invalid_argument("custom risk function needs a forward map");
        if (!(lower < upper)) throw std::invalid_argument("custom risk function needs lower < upper");
        if (!(fd_step > 0.0)) throw std::invalid_argument("custom risk function needs fd_step > 0");
        return RiskFunction(Custom{std::move(forward), std::move(inverse), lower, upper, fd_step});
    }

    bool is_identity() const { return std::holds_alternative<Identity>(kind_); }
    bool is_exponential() const { return std::holds_alternative<Exponential>(kind_); }
    bool is_custom() const { return std::holds_alternative<Custom>(kind_); }

    double gamma() const {
        if (const auto* e = std::get_if<Exponential>(&kind_)) return e->gamma;
        throw std::logic_error("gamma requested from a non-exponential risk function");
    }

    std::string name() const {
        if (is_identity()) return "identity";
        if (is_exponential()) return "exponential";
        return "custom";
    }

    bool in_domain(double x) const {
        if (!std::isfinite(x)) return false;
        if (const auto* c = std::get_if<Custom>(&kind_)) return x >= c->lower && x <= c->upper;
        if (const auto* e = std::get_if<Exponential>(&kind_)) return std::isfinite(std::exp(-e->gamma * x));
        return true;
    }

    bool in_range(double y) const {
        if (!std::isfinite(y)) return false;
        if (is_exponential()) return y <= -kExpInverseFloor;
        if (const auto* c = std::get_if<Custom>(&kind_)) {
            const double lo = c->forward(c->lower);
            const double hi = c->forward(c->upper);
            return y >= lo && y <= hi;
        }
        return true;
    }

    double operator()(double x) const {
        if (!in_domain(x)) throw DomainError("domain violation: g is undefined at " + format_number(x));
        return std::visit([x](const auto& k) { return forward_impl(k, x); }, kind_);
    }

    double inverse(double y) const {
        if (!in_range(y)) throw DomainError("domain violation: g^{-1} is undefined at " + format_number(y));
        return std::visit([y](const auto& k) { return inverse_impl(k, y); }, kind_);
    }

    /// g'(x); closed form except for custom maps (central differences).
    double derivative(double x) const {
        if (is_identity()) return 1.0;
        if (const auto* e = std::get_if<Exponential>(&kind_)) return e->gamma * std::exp(-e->gamma * x);
        const auto& c = std::get<Custom>(kind_);
        const double h = c.fd_step;
        return (c.forward(x + h) - c.forward(x - h)) / (2.0 * h);
    }

    double second_derivative(double x) const {
        if (is_identity()) return 0.0;
        if (const auto* e = std::get_if<Exponential>(&kind_)) return -e->gamma * e->gamma * std::exp(-e->gamma * x);
        const auto& c = std::get<Custom>(kind_);
        const double h = c.fd_step;
        return (c.forward(x + h) - 2.0 * c.forward(x) + c.forward(x - h)) / (h * h);
    }

private:
    using Kind = std::variant<Identity, Exponential, Custom>;
    explicit RiskFunction(Kind k) : kind_(std::move(k)) {}

    static double forward_impl(const Identity&, double x) { return x; }
    static double forward_impl(const Exponential& e, double x) { return -std::exp(-e.gamma * x); }
    static double forward_impl(const Custom& c, double x) { return c.forward(x); }

    static double inverse_impl(const Identity&, double y) { return y; }
    static double inverse_impl(const Exponential& e, double y) { return -std::log(-y) / e.gamma; }
    static double inverse_impl(const Custom& c, double y) {
        if (c.inverse) return c.inverse(y);
        double lo = c.lower;
        double hi = c.upper;
        for (int iter = 0; iter < 200 && hi - lo > 1e-12; ++iter) {
            const double mid = 0.5 * (lo + hi);
            if (c.forward(mid) < y) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return 0.5 * (lo + hi);
    }

    Kind kind_;
};

/// g^{-1}(mean of g(sample)), mean accumulated left to right with compensation.
inline double nonlinear_expectation(const RiskFunction& g, std::span<const double> samples) {
    if (samples.empty()) throw std::invalid_argument("no samples");
    std::vector<double> transformed;
    transformed.reserve(samples.size());
    for (double s : samples) {
        if (!g.in_domain(s)) throw DomainError("domain violation: sample " + format_number(s) + " outside the domain of g");
        transformed.push_back(g(s));
    }
    return g.inverse(summarize(transformed).mean);
}

/// Absolute risk aversion -g''(x)/g'(x).
inline double arrow_pratt(const RiskFunction& g, double x) {
    if (!g.in_domain(x)) throw DomainError("domain violation: " + format_number(x) + " outside the domain of g");
    if (g.is_identity()) return 0.0;
    if (g.is_exponential()) return g.gamma();
    const double d1 = g.derivative(x);
    if (!(std::fabs(d1) > 1e-300) || !std::isfinite(d1)) throw DomainError("degenerate derivative at " + format_number(x));
    return -g.second_derivative(x) / d1;
}

}  // namespace dynkin
