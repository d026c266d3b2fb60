#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynkin/payoff.hpp"
#include "dynkin/risk.hpp"
#include "dynkin/rng.hpp"

namespace dynkin {

using CoefficientFn = std::function<double(double, double)>;

/// One-dimensional diffusion dX = mu(t,X) dt + sigma(t,X) dW together with the
/// game data. `deterministic_state` marks models whose state never moves
/// (mu = sigma = 0), which lets simulations skip the Brownian draws.
struct MarkovModel {
    CoefficientFn drift = [](double, double) { return 0.0; };
    CoefficientFn volatility = [](double, double) { return 0.0; };
    bool deterministic_state = true;
    double x0 = 0.0;
    PayoffBundle bundle;
    RiskFunction g = RiskFunction::identity();
    double lambda1 = 0.0;
    double lambda2 = 0.0;

    void validate() const {
        bundle.validate();
        if (!(lambda1 >= 0.0) || !std::isfinite(lambda1)) throw std::invalid_argument("intensity lambda1 must be >= 0");
        if (!(lambda2 >= 0.0) || !std::isfinite(lambda2)) throw std::invalid_argument("intensity lambda2 must be >= 0");
        if (!std::isfinite(x0)) throw std::invalid_argument("initial state must be finite");
    }

    double horizon() const { return bundle.T; }
};

inline std::vector<double> uniform_times(double T, std::size_t n_steps) {
    if (n_steps == 0) throw std::invalid_argument("time grid needs at least one step");
    std::vector<double> t(n_steps + 1);
    for (std::size_t i = 0; i <= n_steps; ++i) t[i] = T * static_cast<double>(i) / static_cast<double>(n_steps);
    t.back() = T;
    return t;
}

/// Euler-Maruyama path on the uniform grid of `n_steps` over [0, T].
inline StatePath simulate_path(const MarkovModel& m, std::size_t n_steps, std::uint64_t key) {
    StatePath p;
    p.times = uniform_times(m.horizon(), n_steps);
    p.states.assign(p.times.size(), m.x0);
    if (m.deterministic_state) return p;
    CounterRng rng(key);
    std::normal_distribution<double> normal;
    double x = m.x0;
    for (std::size_t i = 0; i < n_steps; ++i) {
        const double t = p.times[i];
        const double dt = p.times[i + 1] - t;
        x += m.drift(t, x) * dt + m.volatility(t, x) * std::sqrt(dt) * normal(rng);
        if (!std::isfinite(x)) throw std::runtime_error("simulated state diverged at t=" + format_number(t));
        p.states[i + 1] = x;
    }
    return p;
}

/// Adds the given sorted times to an Euler path. New states are drawn from
/// the Brownian bridge of the frozen-coefficient Euler step, so the coarse
/// nodes (and hence X_T) do not depend on which times were added.
inline StatePath refine_path(const MarkovModel& m, const StatePath& coarse, const std::vector<double>& extra,
                             std::uint64_t key) {
    if (extra.empty()) return coarse;
    StatePath p;
    p.times.reserve(coarse.times.size() + extra.size());
    p.states.reserve(coarse.times.size() + extra.size());
    CounterRng rng(key);
    std::normal_distribution<double> normal;
    std::size_t e = 0;
    for (std::size_t i = 0; i + 1 < coarse.times.size(); ++i) {
        const double t0 = coarse.times[i];
        const double t1 = coarse.times[i + 1];
        const double x1 = coarse.states[i + 1];
        const double vol = m.volatility(t0, coarse.states[i]);
        p.times.push_back(t0);
        p.states.push_back(coarse.states[i]);
        double s = t0;
        double xs = coarse.states[i];
        while (e < extra.size() && extra[e] < t1) {
            const double u = extra[e++];
            if (u <= s) continue;
            double x = xs + (u - s) / (t1 - s) * (x1 - xs);
            if (!m.deterministic_state) x += vol * std::sqrt((u - s) * (t1 - u) / (t1 - s)) * normal(rng);
            p.times.push_back(u);
            p.states.push_back(x);
            s = u;
            xs = x;
        }
    }
    p.times.push_back(coarse.times.back());
    p.states.push_back(coarse.states.back());
    return p;
}

}  // namespace dynkin
