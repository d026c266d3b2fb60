#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dynkin/game.hpp"
#include "dynkin/markov.hpp"
#include "dynkin/parallel.hpp"
#include "dynkin/quadrature.hpp"
#include "dynkin/rng.hpp"
#include "dynkin/stats.hpp"

namespace dynkin {

/// Binary intensity control: at (t, x) the player's stopping hazard is either
/// 0 or its full signal intensity. `breaks` lists times where the rule may
/// switch for reasons other than the value crossing an obstacle.
class ControlPolicy {
public:
    using Rule = std::function<bool(double t, double x)>;
    enum class Kind { Rule, Optimal, Blocks };

    ControlPolicy(int player, double lambda, Rule rule, std::string name, std::vector<double> breaks = {})
        : player_(player), lambda_(lambda), rule_(std::move(rule)), name_(std::move(name)), breaks_(std::move(breaks)) {
        if (player != 1 && player != 2) throw std::invalid_argument("player must be 1 or 2");
        if (!(lambda >= 0.0)) throw std::invalid_argument("control intensity must be >= 0");
    }

    static ControlPolicy constant(int player, double lambda, bool on) {
        return ControlPolicy(player, lambda, [on](double, double) { return on; }, on ? "always" : "off");
    }

    /// The indicator control read from a solved value.
    static ControlPolicy optimal(int player, double lambda, Rule rule) {
        ControlPolicy c(player, lambda, std::move(rule), "optimal");
        c.kind_ = Kind::Optimal;
        return c;
    }

    /// Equal time blocks on [0, T]; block k is off (0), on (1) or optimal (2).
    static ControlPolicy blocks(const ControlPolicy& optimal, std::vector<int> plan, double T) {
        std::string name = "blocks ";
        std::vector<double> edges;
        for (std::size_t k = 0; k < plan.size(); ++k) {
            name += "01*"[plan[k]];
            if (k > 0) edges.push_back(T * static_cast<double>(k) / static_cast<double>(plan.size()));
        }
        auto rule = [plan, optimal, T](double t, double x) {
            const int c = plan[block_of(t, T, plan.size())];
            return c == 2 ? optimal.active(t, x) : c == 1;
        };
        ControlPolicy out(optimal.player(), optimal.lambda(), rule, name, std::move(edges));
        out.kind_ = Kind::Blocks;
        out.plan_ = std::move(plan);
        out.horizon_ = T;
        return out;
    }

    double operator()(double t, double x) const { return rule_(t, x) ? lambda_ : 0.0; }

    /// Same value when the optimal control's decision at (t, x) is already known.
    double at(double t, double x, bool optimal_on) const {
        switch (kind_) {
            case Kind::Optimal: return optimal_on ? lambda_ : 0.0;
            case Kind::Blocks: {
                const int c = plan_[block_of(t, horizon_, plan_.size())];
                return (c == 2 ? optimal_on : c == 1) ? lambda_ : 0.0;
            }
            case Kind::Rule: break;
        }
        return (*this)(t, x);
    }

    int player() const { return player_; }
    double lambda() const { return lambda_; }
    Kind kind() const { return kind_; }
    const std::string& name() const { return name_; }
    const std::vector<double>& breaks() const { return breaks_; }
    bool active(double t, double x) const { return rule_(t, x); }

private:
    static std::size_t block_of(double t, double T, std::size_t n) {
        if (!(t > 0.0)) return 0;
        return std::min(n - 1, static_cast<std::size_t>(t / T * static_cast<double>(n)));
    }

    int player_;
    double lambda_;
    Rule rule_;
    std::string name_;
    std::vector<double> breaks_;
    Kind kind_ = Kind::Rule;
    std::vector<int> plan_;
    double horizon_ = 1.0;
};

namespace detail {

// Auxiliary obstacles at the nodes of a path, with the running payoff
// accumulated by the trapezoid rule.
struct PathTerms {
    double r = 0.0;
    std::vector<double> times;
    std::vector<double> states;
    std::vector<double> ubar;
    std::vector<double> lbar;
    double xi_bar = 0.0;
};

inline PathTerms path_terms(const PayoffBundle& bundle, const RiskFunction& g, const StatePath& path) {
    const double T = bundle.T;
    if (path.times.size() < 2 || path.times.back() < T * (1.0 - 1e-12)) {
        throw std::invalid_argument("sdg_payoff needs a path covering [0, T]");
    }
    PathTerms out;
    out.r = bundle.r;
    const double r = bundle.r;
    double running = 0.0;
    double prev_f = 0.0;
    for (std::size_t j = 0; j < path.times.size() && path.times[j] <= T; ++j) {
        const double t = path.times[j];
        const double x = path.states[j];
        const double fj = std::exp(-r * t) * bundle.f(t, x);
        if (j > 0) running += 0.5 * (t - out.times.back()) * (prev_f + fj);
        prev_f = fj;
        out.times.push_back(t);
        out.states.push_back(x);
        out.ubar.push_back(to_auxiliary(g, r, t, bundle.U(t, x), running));
        out.lbar.push_back(to_auxiliary(g, r, t, bundle.L(t, x), running));
        if (t == T) {
            out.xi_bar = to_auxiliary(g, r, T, bundle.xi(T, x), running);
            return out;
        }
    }
    throw std::invalid_argument("sdg_payoff needs a path node at T");
}

// a and b hold the control values at the path nodes.
inline double sdg_from_rates(const PathTerms& p, const std::vector<double>& a, const std::vector<double>& b) {
    double hazard = 0.0;
    double prev_c = a[0] + b[0] + p.r;
    double prev_w = a[0] * p.ubar[0] + b[0] * p.lbar[0];
    CompensatedSum acc;
    for (std::size_t j = 1; j < p.times.size(); ++j) {
        const double c = a[j] + b[j] + p.r;
        const double w = a[j] * p.ubar[j] + b[j] * p.lbar[j];
        const double h = p.times[j] - p.times[j - 1];
        const double cbar = 0.5 * (prev_c + c);
        const double wbar = 0.5 * (prev_w + w);
        const double mass = cbar * h > 1e-300 ? -std::expm1(-cbar * h) / cbar : h;
        if (wbar != 0.0) acc.add(std::exp(-hazard) * wbar * mass);
        hazard += cbar * h;
        prev_c = c;
        prev_w = w;
    }
    acc.add(std::exp(-hazard) * p.xi_bar);
    return acc.value();
}

}  // namespace detail

/// J(a, b) along one path in auxiliary coordinates. The accumulated rate
/// a + b + r uses the trapezoid rule; on each step the outer integral is
/// integrated exactly against the exponential of that rate with the
/// trapezoid-averaged weight a U-bar + b L-bar, so constant equal obstacles
/// give J = g(K) for every control pair.
inline double sdg_payoff(const PayoffBundle& bundle, const RiskFunction& g, const StatePath& path,
                         const ControlPolicy& a, const ControlPolicy& b) {
    const detail::PathTerms p = detail::path_terms(bundle, g, path);
    std::vector<double> av(p.times.size());
    std::vector<double> bv(p.times.size());
    for (std::size_t j = 0; j < p.times.size(); ++j) {
        av[j] = a(p.times[j], p.states[j]);
        bv[j] = b(p.times[j], p.states[j]);
    }
    return detail::sdg_from_rates(p, av, bv);
}

/// a* = l1 1{Q-bar >= U-bar}, b* = l2 1{Q-bar <= L-bar}.
inline std::pair<ControlPolicy, ControlPolicy> optimal_controls(std::shared_ptr<const DiscountedValues> v) {
    const double l1 = v->model().lambda1;
    const double l2 = v->model().lambda2;
    return {ControlPolicy::optimal(
                1, l1, [v](double t, double x) { return v->qbar(t, x) >= v->auxiliary(Obstacle::U, t, x); }),
            ControlPolicy::optimal(
                2, l2, [v](double t, double x) { return v->qbar(t, x) <= v->auxiliary(Obstacle::L, t, x); })};
}

inline std::pair<ControlPolicy, ControlPolicy> optimal_controls(const MarkovModel& m,
                                                                std::shared_ptr<const ValueSurface> surface) {
    return optimal_controls(std::make_shared<const DiscountedValues>(m, std::move(surface)));
}

/// Piecewise-constant deviations on `blocks` equal time blocks; each block
/// independently uses 0, the full intensity, or the optimal control.
inline std::vector<ControlPolicy> random_deviations(int player, std::shared_ptr<const DiscountedValues> v,
                                                    std::size_t count, std::size_t blocks, std::uint64_t seed) {
    if (blocks < 1) throw std::invalid_argument("deviations need at least one block");
    const auto [a_star, b_star] = optimal_controls(v);
    const ControlPolicy optimal = player == 1 ? a_star : b_star;
    const double T = v->model().horizon();
    std::vector<ControlPolicy> out;
    for (std::size_t d = 0; d < count; ++d) {
        CounterRng rng(derive_seed(seed, static_cast<std::uint64_t>(player), d));
        std::vector<int> plan(blocks);
        for (auto& c : plan) c = std::min(2, static_cast<int>(3.0 * rng.uniform()));
        out.push_back(ControlPolicy::blocks(optimal, std::move(plan), T));
    }
    return out;
}

namespace detail {

// Times in (0, T) where Q-bar crosses U-bar or L-bar on an ODE surface.
inline std::vector<double> control_switch_times(const DiscountedValues& v) {
    std::vector<double> out;
    const auto* traj = v.trajectory();
    if (!traj) return out;
    const double x = v.model().x0;
    const auto& scan = traj->times();
    for (Obstacle which : {Obstacle::U, Obstacle::L}) {
        for (double s : crossings(scan, [&](double t) { return v.qbar(t, x) - v.auxiliary(which, t, x); })) {
            out.push_back(s);
        }
    }
    return out;
}

}  // namespace detail

/// J(a, b) for a model whose payoffs do not depend on the state, integrated
/// exactly piece by piece: the controls are constant between the switch
/// times, the accumulated rate is linear there, and the remaining integral is
/// Gauss-Legendre with `quad_points` nodes per piece.
inline double sdg_value_quadrature(const DiscountedValues& v, const ControlPolicy& a, const ControlPolicy& b,
                                   const std::vector<double>& switch_times, int quad_points = 64) {
    const auto& m = v.model();
    const double T = m.horizon();
    const double r = m.bundle.r;
    const double x = m.x0;
    std::vector<double> cuts{0.0, T};
    for (const auto* list : {&switch_times, &a.breaks(), &b.breaks()}) {
        for (double s : *list) {
            if (s > 0.0 && s < T) cuts.push_back(s);
        }
    }
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    const GaussLegendreRule rule = gauss_legendre(quad_points);
    CompensatedSum acc;
    double hazard = 0.0;
    for (std::size_t i = 1; i < cuts.size(); ++i) {
        const double s0 = cuts[i - 1];
        const double s1 = cuts[i];
        const double mid = 0.5 * (s0 + s1);
        const double ak = a(mid, x);
        const double bk = b(mid, x);
        const double c = ak + bk + r;
        if (ak > 0.0 || bk > 0.0) {
            acc.add(integrate(rule, s0, s1, [&](double s) {
                return std::exp(-(hazard + c * (s - s0))) *
                       (ak * v.auxiliary(Obstacle::U, s, x) + bk * v.auxiliary(Obstacle::L, s, x));
            }));
        }
        hazard += c * (s1 - s0);
    }
    acc.add(std::exp(-hazard) * v.auxiliary(Obstacle::Xi, T, x));
    return acc.value();
}

struct SdgConfig {
    std::size_t n_steps = 200;
    std::size_t n_paths = 10000;
    std::uint64_t seed = 1;
    int jobs = 1;
    int quad_points = 64;
    std::size_t deviations_per_player = 10;
    std::size_t blocks = 8;
    double band = 3.0;             // standard errors allowed in Monte Carlo comparisons
    double quad_tolerance = 1e-6;  // relative value tolerance of the quadrature comparison
};

struct ControlDeviation {
    int player = 1;
    std::string policy;
    double value = 0.0;
    double margin = 0.0;  // positive means the deviation did better than allowed
    double stderr_margin = 0.0;
    bool holds = true;
};

struct RepresentationReport {
    std::string method;  // "quadrature" or "monte carlo"
    double sdg_value = 0.0;
    double stderr_value = 0.0;
    double bsde_value = 0.0;
    double difference = 0.0;
    double scale = 0.0;
    bool value_holds = true;
    std::vector<ControlDeviation> deviations;
    bool pass = true;
};

/// Compares g^{-1}(E J(a*, b*)) with g^{-1}(Q-bar_0) and tests
/// E J(a*, b) <= E J(a*, b*) <= E J(a, b*) for sampled binary deviations.
/// ODE surfaces are checked by quadrature (value within quad_tolerance of the
/// value scale, deviations within 1e-9 of it); other surfaces by Monte Carlo
/// on common Euler paths, within `band` standard errors.
inline RepresentationReport representation_check(const MarkovModel& m, std::shared_ptr<const ValueSurface> surface,
                                                 const SdgConfig& cfg) {
    m.validate();
    const auto v = std::make_shared<const DiscountedValues>(m, surface);
    const auto [a_star, b_star] = optimal_controls(v);
    std::vector<ControlPolicy> devs = random_deviations(1, v, cfg.deviations_per_player, cfg.blocks, cfg.seed);
    for (auto& d : random_deviations(2, v, cfg.deviations_per_player, cfg.blocks, cfg.seed)) devs.push_back(d);
    std::vector<std::pair<const ControlPolicy*, const ControlPolicy*>> pairs{{&a_star, &b_star}};
    for (const auto& d : devs) {
        if (d.player() == 1) {
            pairs.emplace_back(&d, &b_star);
        } else {
            pairs.emplace_back(&a_star, &d);
        }
    }

    RepresentationReport rep;
    rep.bsde_value = m.g.inverse(v->qbar(0.0, m.x0));
    rep.scale = 1e-12;
    for (double q : surface->q) rep.scale = std::max(rep.scale, std::fabs(q));

    std::vector<std::vector<double>> js(pairs.size());
    if (surface->ode_mode()) {
        detail::require_time_only(m);
        rep.method = "quadrature";
        const auto switches = detail::control_switch_times(*v);
        for (std::size_t k = 0; k < pairs.size(); ++k) {
            js[k] = {sdg_value_quadrature(*v, *pairs[k].first, *pairs[k].second, switches, cfg.quad_points)};
        }
    } else {
        rep.method = "monte carlo";
        if (cfg.n_paths < 100) throw std::invalid_argument("Monte Carlo estimates need at least 100 paths");
        for (auto& j : js) j.resize(cfg.n_paths);
        parallel_for(cfg.n_paths, cfg.jobs, [&](std::size_t p) {
            const StatePath path = simulate_path(m, cfg.n_steps, derive_seed(derive_seed(cfg.seed, p), 0));
            const detail::PathTerms terms = detail::path_terms(m.bundle, m.g, path);
            const std::size_t n = terms.times.size();
            std::vector<char> a_on(n);
            std::vector<char> b_on(n);
            for (std::size_t j = 0; j < n; ++j) {
                a_on[j] = a_star.active(terms.times[j], terms.states[j]);
                b_on[j] = b_star.active(terms.times[j], terms.states[j]);
            }
            std::vector<double> av(n);
            std::vector<double> bv(n);
            for (std::size_t k = 0; k < pairs.size(); ++k) {
                for (std::size_t j = 0; j < n; ++j) {
                    av[j] = pairs[k].first->at(terms.times[j], terms.states[j], a_on[j]);
                    bv[j] = pairs[k].second->at(terms.times[j], terms.states[j], b_on[j]);
                }
                js[k][p] = detail::sdg_from_rates(terms, av, bv);
            }
        });
    }

    const McEstimate star = to_estimate(m.g, summarize(js[0]));
    rep.sdg_value = star.value;
    rep.stderr_value = star.stderr_value;
    rep.difference = rep.sdg_value - rep.bsde_value;
    const bool quadrature = surface->ode_mode();
    rep.value_holds = quadrature ? std::fabs(rep.difference) <= cfg.quad_tolerance * rep.scale
                                 : std::fabs(rep.difference) <= cfg.band * rep.stderr_value;
    rep.pass = rep.value_holds;
    const double slope = std::fabs(m.g.derivative(star.value));
    std::vector<double> diff(js[0].size());
    for (std::size_t k = 0; k < devs.size(); ++k) {
        const auto& jd = js[k + 1];
        ControlDeviation d;
        d.player = devs[k].player();
        d.policy = devs[k].name();
        d.value = m.g.inverse(summarize(jd).mean);
        const double sign = d.player == 2 ? 1.0 : -1.0;
        d.margin = sign * (d.value - star.value);
        if (quadrature) {
            d.holds = d.margin <= 1e-9 * rep.scale;
        } else {
            for (std::size_t p = 0; p < diff.size(); ++p) diff[p] = sign * (jd[p] - js[0][p]);
            d.stderr_margin = slope > 0.0 ? summarize(diff).stderr_mean / slope : 0.0;
            d.holds = d.margin <= cfg.band * d.stderr_margin;
        }
        rep.pass = rep.pass && d.holds;
        rep.deviations.push_back(std::move(d));
    }
    return rep;
}

}  // namespace dynkin
