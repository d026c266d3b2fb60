#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dynkin/bsde.hpp"
#include "dynkin/markov.hpp"
#include "dynkin/parallel.hpp"
#include "dynkin/quadrature.hpp"
#include "dynkin/rng.hpp"
#include "dynkin/signals.hpp"
#include "dynkin/stats.hpp"
#include "dynkin/value_surface.hpp"

namespace dynkin {

struct SimulationConfig {
    std::size_t n_steps = 200;
    std::size_t n_paths = 10000;
    std::uint64_t seed = 1;
    int jobs = 1;
};

/// Everything random about one realization: the state path (refined at the
/// arrival times before T) and both signal streams.
struct Scenario {
    std::uint64_t key = 0;
    StatePath path;
    SignalStream s1;
    SignalStream s2;
};

/// Path `index` of master seed `seed`: key = derive_seed(seed, index); the
/// Euler draws use derive_seed(key, 0), stream i uses derive_seed(key, i) and
/// the bridge refinement derive_seed(key, 3).
inline Scenario simulate_scenario(const MarkovModel& m, std::size_t n_steps, std::uint64_t seed, std::size_t index) {
    Scenario s;
    s.key = derive_seed(seed, index);
    const double T = m.horizon();
    s.s1 = sample_stream(m.lambda1, T, s.key, 1);
    s.s2 = sample_stream(m.lambda2, T, s.key, 2);
    StatePath coarse = simulate_path(m, n_steps, derive_seed(s.key, 0));
    if (m.deterministic_state) {
        s.path = std::move(coarse);
        return s;
    }
    std::vector<double> extra;
    for (const auto& e : merge(s.s1, s.s2)) {
        if (e.time >= T) break;
        if (extra.empty() || e.time > extra.back()) extra.push_back(e.time);
    }
    s.path = refine_path(m, coarse, extra, derive_seed(s.key, 3));
    return s;
}

/// Rule deciding whether a player stops at one of its own arrivals. Whatever
/// the rule, the M_i-th arrival (the first one after T) is a forced stop.
class StoppingPolicy {
public:
    enum class Kind { Threshold, FixedIndex, Never, Custom };
    using Rule = std::function<bool(double t, double x, std::size_t n)>;

    static StoppingPolicy threshold(int player, std::shared_ptr<const ValueSurface> surface, PayoffBundle bundle,
                                    double shift = 0.0) {
        StoppingPolicy p(player, Kind::Threshold);
        p.surface_ = std::move(surface);
        p.bundle_ = std::move(bundle);
        p.shift_ = shift;
        p.name_ = shift == 0.0 ? "threshold" : "threshold" + std::string(shift > 0 ? "+" : "") + format_number(shift);
        return p;
    }

    static StoppingPolicy fixed_index(int player, std::size_t n) {
        if (n < 1) throw std::invalid_argument("fixed-index policy needs n >= 1");
        StoppingPolicy p(player, Kind::FixedIndex);
        p.index_ = n;
        p.name_ = "fixed-index " + std::to_string(n);
        return p;
    }

    static StoppingPolicy never(int player) {
        StoppingPolicy p(player, Kind::Never);
        p.name_ = "never";
        return p;
    }

    static StoppingPolicy custom(int player, Rule rule, std::string name) {
        StoppingPolicy p(player, Kind::Custom);
        p.rule_ = std::move(rule);
        p.name_ = std::move(name);
        return p;
    }

    int player() const { return player_; }
    Kind kind() const { return kind_; }
    const std::string& name() const { return name_; }
    double shift() const { return shift_; }

    /// Decision at the n-th own arrival t with state x.
    bool stops(double t, double x, std::size_t n) const {
        switch (kind_) {
            case Kind::Never: return false;
            case Kind::FixedIndex: return n == index_;
            case Kind::Custom: return rule_(t, x, n);
            case Kind::Threshold: {
                if (!surface_->covers(x)) clamps_->fetch_add(1, std::memory_order_relaxed);
                const double q = surface_->q_at(t, x);
                if (player_ == 1) return q >= bundle_.U(t, x) + shift_;
                return q <= bundle_.L(t, x) + shift_;
            }
        }
        return false;
    }

    /// Number of threshold decisions whose state fell outside the surface grid.
    std::size_t clamp_count() const { return clamps_->load(); }

private:
    StoppingPolicy(int player, Kind kind) : player_(player), kind_(kind) {
        if (player != 1 && player != 2) throw std::invalid_argument("player must be 1 or 2");
    }

    int player_ = 1;
    Kind kind_ = Kind::Never;
    std::shared_ptr<const ValueSurface> surface_;
    PayoffBundle bundle_;
    double shift_ = 0.0;
    std::size_t index_ = 1;
    Rule rule_;
    std::string name_;
    std::shared_ptr<std::atomic<std::size_t>> clamps_ = std::make_shared<std::atomic<std::size_t>>(0);
};

/// Executes a policy on the player's own stream: the returned time is one of
/// the arrivals, at index at most M_i (kNever for a silent stream).
inline double stopping_time(const StoppingPolicy& p, const SignalStream& s, const StatePath& path, double T) {
    const std::size_t cap = m_index(s, T);
    for (std::size_t n = 1; n <= cap; ++n) {
        const double t = s.arrivals[n - 1];
        if (is_never(t) || n == cap) return t;
        if (p.stops(t, path.state_at(t), n)) return t;
    }
    return kNever;
}

enum class Regime { Terminal, Lower, Upper };

inline const char* regime_name(Regime r) {
    switch (r) {
        case Regime::Terminal: return "terminal";
        case Regime::Lower: return "lower";
        case Regime::Upper: return "upper";
    }
    return "";
}

struct Realization {
    double payoff = 0.0;
    Regime regime = Regime::Terminal;
};

/// R(sigma, tau): running payoff up to sigma ^ tau ^ T plus the discounted
/// obstacle of whoever stopped first (L on ties) or the terminal payoff.
inline Realization realized_payoff(const PayoffBundle& b, const StatePath& path, double sigma, double tau) {
    const double T = b.T;
    const double stop = std::min({sigma, tau, T});
    Realization out;
    const double running = running_integral(b, path, stop);
    if (std::min(sigma, tau) >= T) {
        out.regime = Regime::Terminal;
        out.payoff = running + std::exp(-b.r * T) * b.xi(T, path.state_at(T));
    } else if (tau <= sigma) {
        out.regime = Regime::Lower;
        out.payoff = running + std::exp(-b.r * tau) * b.L(tau, path.state_at(tau));
    } else {
        out.regime = Regime::Upper;
        out.payoff = running + std::exp(-b.r * sigma) * b.U(sigma, path.state_at(sigma));
    }
    return out;
}

struct GameRecord {
    std::uint64_t key = 0;
    double sigma = kNever;
    double tau = kNever;
    Realization outcome;
};

struct McEstimate {
    std::size_t n = 0;
    double mean_g = 0.0;
    double stderr_g = 0.0;
    double value = 0.0;
    double stderr_value = 0.0;
};

inline McEstimate to_estimate(const RiskFunction& g, const SampleSummary& s) {
    McEstimate e;
    e.n = s.n;
    e.mean_g = s.mean;
    e.stderr_g = s.stderr_mean;
    e.value = g.inverse(s.mean);
    const double slope = std::fabs(g.derivative(e.value));
    e.stderr_value = s.stderr_mean > 0.0 && slope > 0.0 ? s.stderr_mean / slope : 0.0;
    return e;
}

namespace detail {

inline void check_sim(const MarkovModel& m, const SimulationConfig& cfg) {
    m.validate();
    if (cfg.n_paths < 100) throw std::invalid_argument("Monte Carlo estimates need at least 100 paths");
    if (cfg.n_steps < 1) throw std::invalid_argument("simulation grid needs at least one step");
}

inline double g_of_payoff(const RiskFunction& g, double payoff, std::uint64_t key) {
    try {
        return g(payoff);
    } catch (const DomainError& e) {
        throw DomainError(std::string(e.what()) + " (path seed " + std::to_string(key) + ")");
    }
}

inline void check_feasible(const StoppingPolicy& p, const SignalStream& s, double t, double T) {
    if (is_never(t)) return;
    const auto it = std::lower_bound(s.arrivals.begin(), s.arrivals.end(), t);
    if (it == s.arrivals.end() || *it != t) throw std::logic_error("policy " + p.name() + " stopped off its stream");
    if (static_cast<std::size_t>(it - s.arrivals.begin()) + 1 > m_index(s, T)) {
        throw std::logic_error("policy " + p.name() + " stopped after its cap");
    }
}

}  // namespace detail

/// Plays one pair of policies on every scenario; record p is path p.
inline std::vector<GameRecord> simulate_games(const MarkovModel& m, const StoppingPolicy& p1,
                                              const StoppingPolicy& p2, const SimulationConfig& cfg) {
    detail::check_sim(m, cfg);
    if (p1.player() != 1 || p2.player() != 2) throw std::invalid_argument("policies must belong to players 1 and 2");
    std::vector<GameRecord> out(cfg.n_paths);
    const double T = m.horizon();
    parallel_for(cfg.n_paths, cfg.jobs, [&](std::size_t p) {
        const Scenario s = simulate_scenario(m, cfg.n_steps, cfg.seed, p);
        GameRecord& rec = out[p];
        rec.key = s.key;
        rec.sigma = stopping_time(p1, s.s1, s.path, T);
        rec.tau = stopping_time(p2, s.s2, s.path, T);
        detail::check_feasible(p1, s.s1, rec.sigma, T);
        detail::check_feasible(p2, s.s2, rec.tau, T);
        rec.outcome = realized_payoff(m.bundle, s.path, rec.sigma, rec.tau);
    });
    return out;
}

/// g^{-1}(mean g(R)) over the scenarios with its delta-method error.
inline McEstimate estimate_value(const MarkovModel& m, const StoppingPolicy& p1, const StoppingPolicy& p2,
                                 const SimulationConfig& cfg) {
    const auto records = simulate_games(m, p1, p2, cfg);
    std::vector<double> gv(records.size());
    for (std::size_t p = 0; p < records.size(); ++p) {
        gv[p] = detail::g_of_payoff(m.g, records[p].outcome.payoff, records[p].key);
    }
    return to_estimate(m.g, summarize(gv));
}

inline void write_paths_csv(std::ostream& os, const std::vector<GameRecord>& records) {
    os << "seed,sigma,tau,regime,R\n";
    os.precision(17);
    auto time = [&os](double t) {
        if (is_never(t)) {
            os << "never";
        } else {
            os << t;
        }
    };
    for (const auto& r : records) {
        os << r.key << ',';
        time(r.sigma);
        os << ',';
        time(r.tau);
        os << ',' << regime_name(r.outcome.regime) << ',' << r.outcome.payoff << '\n';
    }
}

/// g(R) for several policy pairs on common scenarios; result[k][p] belongs to
/// pair k and path p.
inline std::vector<std::vector<double>> evaluate_pairs(
    const MarkovModel& m, const std::vector<std::pair<const StoppingPolicy*, const StoppingPolicy*>>& pairs,
    const SimulationConfig& cfg) {
    detail::check_sim(m, cfg);
    std::vector<std::vector<double>> out(pairs.size(), std::vector<double>(cfg.n_paths));
    const double T = m.horizon();
    parallel_for(cfg.n_paths, cfg.jobs, [&](std::size_t p) {
        const Scenario s = simulate_scenario(m, cfg.n_steps, cfg.seed, p);
        for (std::size_t k = 0; k < pairs.size(); ++k) {
            const double sigma = stopping_time(*pairs[k].first, s.s1, s.path, T);
            const double tau = stopping_time(*pairs[k].second, s.s2, s.path, T);
            out[k][p] = detail::g_of_payoff(m.g, realized_payoff(m.bundle, s.path, sigma, tau).payoff, s.key);
        }
    });
    return out;
}

inline void check_surface(const ValueSurface& surface, const PayoffBundle& b) {
    if (surface.n_t() < 2 || std::fabs(surface.times.back() - b.T) > 1e-12 * std::max(1.0, b.T) ||
        surface.qbar.size() != surface.n_t() * surface.n_x() || surface.q.size() != surface.qbar.size()) {
        throw std::invalid_argument("surface/model mismatch: the surface does not span [0, T] of this model");
    }
}

/// Threshold rules read from the solved value: player 1 stops at an own
/// arrival with Q >= U, player 2 with Q <= L.
inline std::pair<StoppingPolicy, StoppingPolicy> optimal_policies(std::shared_ptr<const ValueSurface> surface,
                                                                  const PayoffBundle& b) {
    check_surface(*surface, b);
    return {StoppingPolicy::threshold(1, surface, b), StoppingPolicy::threshold(2, surface, b)};
}

/// Eleven alternatives for one player: never, the first three own arrivals,
/// shifted thresholds, and "first arrival in the second half".
inline std::vector<StoppingPolicy> default_deviations(int player, std::shared_ptr<const ValueSurface> surface,
                                                      const PayoffBundle& b) {
    double scale = 1e-3;
    for (double q : surface->q) scale = std::max(scale, std::fabs(q));
    std::vector<StoppingPolicy> out;
    out.push_back(StoppingPolicy::never(player));
    for (std::size_t n = 1; n <= 3; ++n) out.push_back(StoppingPolicy::fixed_index(player, n));
    for (double s : {-0.1, -0.05, -0.02, 0.02, 0.05, 0.1}) {
        out.push_back(StoppingPolicy::threshold(player, surface, b, s * scale));
    }
    const double half = 0.5 * b.T;
    out.push_back(StoppingPolicy::custom(player, [half](double t, double, std::size_t) { return t >= half; },
                                         "second half"));
    return out;
}

struct DeviationResult {
    int player = 1;
    std::string policy;
    double value = 0.0;
    double margin = 0.0;  // positive means the deviation did better than allowed
    double stderr_margin = 0.0;
    bool holds = true;
};

struct SaddleReport {
    McEstimate optimal;
    std::vector<DeviationResult> deviations;
    double lower = 0.0;  // max over player-2 deviations of J(sigma*, tau)
    double upper = 0.0;  // min over player-1 deviations of J(sigma, tau*)
    bool pass = true;
};

/// J(sigma*, tau) <= J(sigma*, tau*) <= J(sigma, tau*) on common scenarios.
/// Each margin holds when it is at most `band` standard errors of the paired
/// g-scale difference, mapped to the value scale by 1 / g'(J*).
inline SaddleReport saddle_check(const MarkovModel& m, const StoppingPolicy& sigma_star,
                                 const StoppingPolicy& tau_star, const std::vector<StoppingPolicy>& deviations,
                                 const SimulationConfig& cfg, double band = 3.0) {
    std::vector<std::pair<const StoppingPolicy*, const StoppingPolicy*>> pairs{{&sigma_star, &tau_star}};
    for (const auto& d : deviations) {
        if (d.player() == 1) {
            pairs.emplace_back(&d, &tau_star);
        } else {
            pairs.emplace_back(&sigma_star, &d);
        }
    }
    const auto gv = evaluate_pairs(m, pairs, cfg);
    SaddleReport rep;
    rep.optimal = to_estimate(m.g, summarize(gv[0]));
    const double slope = std::fabs(m.g.derivative(rep.optimal.value));
    rep.lower = rep.optimal.value;
    rep.upper = rep.optimal.value;
    std::vector<double> diff(cfg.n_paths);
    for (std::size_t k = 0; k < deviations.size(); ++k) {
        const auto& dev = deviations[k];
        const auto& dv = gv[k + 1];
        DeviationResult r;
        r.player = dev.player();
        r.policy = dev.name();
        r.value = m.g.inverse(summarize(dv).mean);
        const double sign = r.player == 2 ? 1.0 : -1.0;
        for (std::size_t p = 0; p < diff.size(); ++p) diff[p] = sign * (dv[p] - gv[0][p]);
        const SampleSummary ds = summarize(diff);
        r.margin = sign * (r.value - rep.optimal.value);
        r.stderr_margin = slope > 0.0 ? ds.stderr_mean / slope : 0.0;
        r.holds = r.margin <= band * r.stderr_margin;
        rep.pass = rep.pass && r.holds;
        if (r.player == 2) rep.lower = std::max(rep.lower, r.value);
        if (r.player == 1) rep.upper = std::min(rep.upper, r.value);
        rep.deviations.push_back(std::move(r));
    }
    return rep;
}

/// Q-bar of an ODE surface between nodes by cubic Hermite interpolation,
/// with slopes dQ-bar/dt = -driver taken from the model.
class OdeTrajectory {
public:
    OdeTrajectory(const MarkovModel& m, const ValueSurface& v) : times_(v.times), qbar_(v.qbar) {
        if (!v.ode_mode()) throw std::invalid_argument("trajectory needs a surface from the ODE solver");
        const RunningIntegral F(m.bundle, v.times);
        slope_.resize(times_.size());
        for (std::size_t i = 0; i < times_.size(); ++i) {
            const double t = times_[i];
            slope_[i] = -driver(qbar_[i], auxiliary_at(m, F, Obstacle::U, t, m.x0),
                                auxiliary_at(m, F, Obstacle::L, t, m.x0), m.lambda1, m.lambda2, m.bundle.r);
        }
    }

    double operator()(double t) const {
        if (t <= times_.front()) return qbar_.front();
        if (t >= times_.back()) return qbar_.back();
        auto it = std::upper_bound(times_.begin(), times_.end(), t);
        const auto i = static_cast<std::size_t>(std::distance(times_.begin(), it)) - 1;
        const double h = times_[i + 1] - times_[i];
        const double s = (t - times_[i]) / h;
        const double h10 = s * (1.0 - s) * (1.0 - s);
        const double h11 = s * s * (s - 1.0);
        const double h01 = s * s * (3.0 - 2.0 * s);
        return qbar_[i] + h * (h10 * slope_[i] + h11 * slope_[i + 1]) + h01 * (qbar_[i + 1] - qbar_[i]);
    }

    const std::vector<double>& times() const { return times_; }

private:
    std::vector<double> times_;
    std::vector<double> qbar_;
    std::vector<double> slope_;
};

/// Discounted coordinates read from a solved surface: g(Q~_t) = e^{-rt} Q-bar_t,
/// h~_t = e^{-rt} h_t + F(t).
class DiscountedValues {
public:
    DiscountedValues(MarkovModel m, std::shared_ptr<const ValueSurface> surface)
        : m_(std::move(m)), surface_(std::move(surface)), F_(m_.bundle, surface_->times) {
        check_surface(*surface_, m_.bundle);
        if (surface_->ode_mode()) trajectory_.emplace(m_, *surface_);
    }

    double qbar(double t, double x) const { return trajectory_ ? (*trajectory_)(t) : surface_->qbar_at(t, x); }

    /// e^{-rt} Q-bar(t, x), the g-image of Q~.
    double g_value(double t, double x) const { return std::exp(-m_.bundle.r * t) * qbar(t, x); }

    double value(double t, double x) const { return m_.g.inverse(g_value(t, x)); }

    double obstacle(Obstacle which, double t, double x) const {
        if (which == Obstacle::Xi) t = m_.bundle.T;
        return std::exp(-m_.bundle.r * t) * evaluate(m_.bundle, which, t, x) + F_(t);
    }

    /// Q-hat at a merged event: xi~ at or after T, else min(U~, Q~) after a
    /// player-1 signal and max(L~, Q~) after a player-2 signal.
    double qhat(double theta, int label, double x) const {
        if (theta >= m_.bundle.T) return obstacle(Obstacle::Xi, m_.bundle.T, x);
        const double q = value(theta, x);
        if (label == 1) return std::min(obstacle(Obstacle::U, theta, x), q);
        return std::max(obstacle(Obstacle::L, theta, x), q);
    }

    /// e^{rt} g(h~_t), the auxiliary obstacle.
    double auxiliary(Obstacle which, double t, double x) const {
        if (which == Obstacle::Xi) t = m_.bundle.T;
        return std::exp(m_.bundle.r * t) * m_.g(obstacle(which, t, x));
    }

    const MarkovModel& model() const { return m_; }
    const ValueSurface& surface() const { return *surface_; }
    const OdeTrajectory* trajectory() const { return trajectory_ ? &*trajectory_ : nullptr; }

private:
    MarkovModel m_;
    std::shared_ptr<const ValueSurface> surface_;
    RunningIntegral F_;
    std::optional<OdeTrajectory> trajectory_;
};

inline double qhat(const DiscountedValues& v, double theta, int label, double x) { return v.qhat(theta, label, x); }

namespace detail {

// Roots of gap between consecutive scan points where its sign flips.
template <class Fn>
std::vector<double> crossings(const std::vector<double>& scan, Fn&& gap) {
    std::vector<double> out;
    double prev = gap(scan.front());
    for (std::size_t i = 1; i < scan.size(); ++i) {
        const double cur = gap(scan[i]);
        if (prev != 0.0 && cur != 0.0 && (prev > 0.0) != (cur > 0.0)) {
            out.push_back(bisect_root(scan[i - 1], scan[i], gap));
        }
        prev = cur;
    }
    return out;
}

}  // namespace detail

struct RecursionResult {
    double t = 0.0;
    double residual = 0.0;
    double scale = 0.0;
};

/// Residual of the one-step recursion at time t for a deterministic model:
/// e^{-Lam(T-t)} g(xi~) + int_t^T e^{-Lam(s-t)} [l1 min(g(U~), y) + l2 max(g(L~), y)] ds - y_t
/// with y = g(Q~) and Lam = l1 + l2. The integral is composite Gauss-Legendre
/// with `quad_points` nodes per panel, panels split where y crosses an obstacle.
inline RecursionResult recursion_residual(const MarkovModel& m, std::shared_ptr<const ValueSurface> surface, double t,
                                          int quad_points = 64) {
    const double T = m.horizon();
    if (!(t >= 0.0) || t >= T) throw std::out_of_range("recursion residual needs t in [0, T)");
    detail::require_time_only(m);
    const DiscountedValues v(m, surface);
    if (!v.trajectory()) throw std::invalid_argument("recursion residual needs a surface from the ODE solver");
    const double x = m.x0;
    const double lam = m.lambda1 + m.lambda2;
    auto y = [&](double s) { return v.g_value(s, x); };
    auto gu = [&](double s) { return m.g(v.obstacle(Obstacle::U, s, x)); };
    auto gl = [&](double s) { return m.g(v.obstacle(Obstacle::L, s, x)); };

    std::vector<double> scan{t};
    for (double s : v.trajectory()->times()) {
        if (s > t && s < T) scan.push_back(s);
    }
    scan.push_back(T);
    std::vector<double> breaks = detail::crossings(scan, [&](double s) { return y(s) - gu(s); });
    for (double b : detail::crossings(scan, [&](double s) { return y(s) - gl(s); })) breaks.push_back(b);
    breaks.push_back(t);
    breaks.push_back(T);
    std::sort(breaks.begin(), breaks.end());

    const GaussLegendreRule rule = gauss_legendre(quad_points);
    auto integrand = [&](double s) {
        const double ys = y(s);
        return std::exp(-lam * (s - t)) * (m.lambda1 * std::min(gu(s), ys) + m.lambda2 * std::max(gl(s), ys));
    };
    CompensatedSum acc;
    acc.add(std::exp(-lam * (T - t)) * m.g(v.obstacle(Obstacle::Xi, T, x)));
    for (std::size_t i = 1; i < breaks.size(); ++i) {
        if (breaks[i] > breaks[i - 1]) acc.add(integrate(rule, breaks[i - 1], breaks[i], integrand));
    }
    const double yt = y(t);
    acc.add(-yt);
    RecursionResult r;
    r.t = t;
    r.residual = acc.value();
    r.scale = std::fabs(m.g(v.obstacle(Obstacle::Xi, T, x)));
    for (double s : scan) r.scale = std::max({r.scale, std::fabs(y(s)), std::fabs(gu(s)), std::fabs(gl(s))});
    return r;
}

struct IncrementStat {
    std::size_t step = 0;  // increment from theta_step to theta_{step+1}
    double mean = 0.0;
    double stderr_mean = 0.0;
    bool pass = true;
};

struct MartingaleProperty {
    std::string name;
    std::string sense;  // "zero", "nonpositive" or "nonnegative"
    std::string sigma_policy;
    std::string tau_policy;
    std::vector<IncrementStat> steps;
    bool pass = true;
};

struct MartingaleReport {
    std::vector<MartingaleProperty> properties;
    bool pass = true;
};

/// Mean increments of g(Q-hat) along the merged events theta_0 = 0,
/// theta_1, ..., stopped when the acting player's policy stops or theta >= T.
/// The state is frozen at x0, so only the Poisson streams are sampled.
inline MartingaleReport martingale_check(const MarkovModel& m, std::shared_ptr<const ValueSurface> surface,
                                         std::size_t k_max, std::size_t n_paths, std::uint64_t seed, int jobs = 1,
                                         double band_sigmas = 3.0) {
    m.validate();
    detail::require_time_only(m);
    if (k_max < 1) throw std::invalid_argument("martingale check needs k_max >= 1");
    if (n_paths < 100) throw std::invalid_argument("Monte Carlo estimates need at least 100 paths");
    const DiscountedValues v(m, surface);
    const double T = m.horizon();
    const double x = m.x0;
    const auto [sigma_star, tau_star] = optimal_policies(surface, m.bundle);
    const StoppingPolicy sigma_never = StoppingPolicy::never(1);
    const StoppingPolicy sigma_first = StoppingPolicy::fixed_index(1, 1);
    const StoppingPolicy tau_never = StoppingPolicy::never(2);
    struct Case {
        const char* name;
        const char* sense;
        const StoppingPolicy* sigma;
        const StoppingPolicy* tau;
    };
    const std::vector<Case> cases{{"(i) optimal pair", "zero", &sigma_star, &tau_star},
                                  {"(ii) tau never", "nonpositive", &sigma_star, &tau_never},
                                  {"(iii) sigma never", "nonnegative", &sigma_never, &tau_star},
                                  {"(iii) sigma first arrival", "nonnegative", &sigma_first, &tau_star}};

    // inc[c][k][p]
    std::vector<std::vector<std::vector<double>>> inc(
        cases.size(), std::vector<std::vector<double>>(k_max, std::vector<double>(n_paths, 0.0)));
    const double y0 = v.g_value(0.0, x);
    parallel_for(n_paths, jobs, [&](std::size_t p) {
        const std::uint64_t key = derive_seed(seed, p);
        const SignalStream s1 = sample_stream(m.lambda1, T, key, 1);
        const SignalStream s2 = sample_stream(m.lambda2, T, key, 2);
        const MergedSequence events = merge(s1, s2);
        for (std::size_t c = 0; c < cases.size(); ++c) {
            double y = y0;
            bool stopped = events.empty();
            std::size_t own[3] = {0, 0, 0};
            for (std::size_t k = 0; k < k_max && !stopped; ++k) {
                const MergedEvent& e = events[k];
                const double next = m.g(v.qhat(e.time, e.label, x));
                inc[c][k][p] = next - y;
                y = next;
                const std::size_t n = ++own[e.label];
                const StoppingPolicy& pol = e.label == 1 ? *cases[c].sigma : *cases[c].tau;
                stopped = e.time >= T || k + 1 >= events.size() || pol.stops(e.time, x, n);
            }
        }
    });

    MartingaleReport rep;
    for (std::size_t c = 0; c < cases.size(); ++c) {
        MartingaleProperty prop;
        prop.name = cases[c].name;
        prop.sense = cases[c].sense;
        prop.sigma_policy = cases[c].sigma->name();
        prop.tau_policy = cases[c].tau->name();
        for (std::size_t k = 0; k < k_max; ++k) {
            const SampleSummary s = summarize(inc[c][k]);
            IncrementStat st;
            st.step = k;
            st.mean = s.mean;
            st.stderr_mean = s.stderr_mean;
            const double band = band_sigmas * s.stderr_mean;
            if (prop.sense == std::string("zero")) {
                st.pass = std::fabs(s.mean) <= band;
            } else if (prop.sense == std::string("nonpositive")) {
                st.pass = s.mean <= band;
            } else {
                st.pass = s.mean >= -band;
            }
            prop.pass = prop.pass && st.pass;
            prop.steps.push_back(st);
        }
        rep.pass = rep.pass && prop.pass;
        rep.properties.push_back(std::move(prop));
    }
    return rep;
}

}  // namespace dynkin
