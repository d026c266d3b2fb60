#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <sstream>

#include "dynkin/bsde.hpp"
#include "dynkin/game.hpp"
#include "support/instances.hpp"

using namespace dynkin;
using dynkin::fixtures::constant_model;
using dynkin::fixtures::desk_model;
using dynkin::fixtures::gbm_model;

namespace {

std::shared_ptr<const ValueSurface> ode_surface(const MarkovModel& m, std::size_t n_t = 2000) {
    return std::make_shared<const ValueSurface>(solve_ode(m, n_t));
}

std::shared_ptr<const ValueSurface> pde_surface(const MarkovModel& m) {
    return std::make_shared<const ValueSurface>(solve_pde(m, PdeGrid{400, 200, 0.2, 5.0, GridKind::Log}));
}

SimulationConfig config(std::size_t n_paths, std::uint64_t seed = 11, std::size_t n_steps = 100) {
    SimulationConfig c;
    c.n_paths = n_paths;
    c.seed = seed;
    c.n_steps = n_steps;
    return c;
}

}  // namespace

TEST(RealizedPayoff, Examples) {
    auto m = constant_model(0.3, 1, 1, 2.0, 3.0, 5.0, 4.0);
    const auto path = StatePath::constant(1.0, 4.0, 8);
    const auto never = realized_payoff(m.bundle, path, kNever, kNever);
    EXPECT_EQ(never.regime, Regime::Terminal);
    EXPECT_NEAR(never.payoff, std::exp(-1.2) * 5.0, 1e-15);

    m.bundle.r = 0.0;
    const auto tie = realized_payoff(m.bundle, path, 1.0, 1.0);
    EXPECT_EQ(tie.regime, Regime::Lower);
    EXPECT_EQ(tie.payoff, 2.0);

    m.bundle.r = 0.1;
    const auto up = realized_payoff(m.bundle, path, 1.0, 2.0);
    EXPECT_EQ(up.regime, Regime::Upper);
    EXPECT_NEAR(up.payoff, std::exp(-0.1) * 3.0, 1e-15);

    // an arrival after T counts as not stopping
    EXPECT_EQ(realized_payoff(m.bundle, path, 4.5, 6.0).regime, Regime::Terminal);
    EXPECT_EQ(realized_payoff(m.bundle, path, 5.0, 3.0).regime, Regime::Lower);
}

TEST(RealizedPayoff, RunningPayoffUpToFirstStop) {
    const auto m = constant_model(0.0, 1, 1, 0.0, 0.0, 0.0, 2.0, RiskFunction::identity(), 1.5);
    const auto path = StatePath::constant(0.0, 2.0, 20);
    EXPECT_NEAR(realized_payoff(m.bundle, path, 0.8, kNever).payoff, 1.2, 1e-14);
    EXPECT_NEAR(realized_payoff(m.bundle, path, kNever, kNever).payoff, 3.0, 1e-14);
}

TEST(RealizedPayoff, RegimePartitionProperty) {
    const auto m = gbm_model();
    for (std::size_t p = 0; p < 500; ++p) {
        const Scenario s = simulate_scenario(m, 50, 3, p);
        CounterRng pick(derive_seed(99, p));
        const double sigma = s.s1.arrivals[static_cast<std::size_t>(pick.uniform() * s.s1.arrivals.size())];
        const double tau = s.s2.arrivals[static_cast<std::size_t>(pick.uniform() * s.s2.arrivals.size())];
        const auto r = realized_payoff(m.bundle, s.path, sigma, tau);
        const int active = (std::min(sigma, tau) >= 1.0) + (tau < 1.0 && tau <= sigma) + (sigma < 1.0 && sigma < tau);
        EXPECT_EQ(active, 1);
        EXPECT_TRUE(std::isfinite(r.payoff));
    }
}

TEST(StoppingTime, FeasibilityProperty) {
    const auto m = gbm_model();
    const auto surface = pde_surface(m);
    const auto [s1, s2] = optimal_policies(surface, m.bundle);
    std::vector<StoppingPolicy> all{s1, s2};
    for (int player : {1, 2}) {
        for (auto& d : default_deviations(player, surface, m.bundle)) all.push_back(d);
    }
    for (std::size_t p = 0; p < 300; ++p) {
        const Scenario s = simulate_scenario(m, 50, 5, p);
        for (const auto& pol : all) {
            const auto& stream = pol.player() == 1 ? s.s1 : s.s2;
            const double t = stopping_time(pol, stream, s.path, 1.0);
            const auto it = std::find(stream.arrivals.begin(), stream.arrivals.end(), t);
            ASSERT_NE(it, stream.arrivals.end()) << pol.name();
            EXPECT_LE(static_cast<std::size_t>(it - stream.arrivals.begin()) + 1, m_index(stream, 1.0));
        }
    }
}

TEST(StoppingTime, SilentStreamNeverStops) {
    const auto s = sample_stream(0.0, 1.0, 1, 1);
    EXPECT_EQ(stopping_time(StoppingPolicy::fixed_index(1, 1), s, StatePath::constant(0, 1), 1.0), kNever);
}

TEST(Scenario, RefinementKeepsCoarseNodes) {
    const auto m = gbm_model();
    const Scenario s = simulate_scenario(m, 40, 8, 17);
    const StatePath coarse = simulate_path(m, 40, derive_seed(s.key, 0));
    for (std::size_t i = 0; i < coarse.times.size(); ++i) {
        const auto it = std::find(s.path.times.begin(), s.path.times.end(), coarse.times[i]);
        ASSERT_NE(it, s.path.times.end());
        EXPECT_EQ(s.path.states[static_cast<std::size_t>(it - s.path.times.begin())], coarse.states[i]);
    }
    for (double t : s.s1.arrivals) {
        if (t < 1.0) {
            EXPECT_NE(std::find(s.path.times.begin(), s.path.times.end(), t), s.path.times.end());
        }
    }
}

TEST(EstimateValue, NeverNeverMatchesPlainMonteCarlo) {
    const auto m = gbm_model();
    const auto cfg = config(2000, 21, 50);
    const auto est = estimate_value(m, StoppingPolicy::never(1), StoppingPolicy::never(2), cfg);
    std::vector<double> oracle(cfg.n_paths);
    for (std::size_t p = 0; p < cfg.n_paths; ++p) {
        const StatePath path = simulate_path(m, cfg.n_steps, derive_seed(derive_seed(cfg.seed, p), 0));
        oracle[p] = std::exp(-0.05) * std::max(path.states.back() - 1.0, 0.0);
    }
    const auto s = summarize(oracle);
    EXPECT_EQ(est.value, s.mean);
    EXPECT_EQ(est.stderr_value, s.stderr_mean);
    EXPECT_EQ(est.n, 2000u);
}

TEST(EstimateValue, AllPayoffsEqualGiveExactValue) {
    for (const auto& g : {RiskFunction::identity(), RiskFunction::exponential(1.0)}) {
        const auto m = constant_model(0.0, 2, 3, 1.0, 1.0, 1.0, 1.0, g);
        for (const auto& p1 : {StoppingPolicy::never(1), StoppingPolicy::fixed_index(1, 1)}) {
            for (const auto& p2 : {StoppingPolicy::never(2), StoppingPolicy::fixed_index(2, 2)}) {
                const auto est = estimate_value(m, p1, p2, config(500));
                EXPECT_DOUBLE_EQ(est.value, 1.0) << g.name();
                EXPECT_EQ(est.stderr_value, 0.0);
            }
        }
    }
}

TEST(EstimateValue, RejectsFewPaths) {
    EXPECT_THROW(estimate_value(desk_model(), StoppingPolicy::never(1), StoppingPolicy::never(2), config(50)),
                 std::invalid_argument);
}

TEST(EstimateValue, DomainErrorNamesPathSeed) {
    auto m = constant_model(0.0, 1, 1, 5.0, 5.0, 5.0, 1.0);
    m.g = RiskFunction::custom([](double x) { return x; }, -1.0, 1.0, [](double y) { return y; });
    try {
        estimate_value(m, StoppingPolicy::never(1), StoppingPolicy::never(2), config(100));
        FAIL();
    } catch (const DomainError& e) {
        EXPECT_NE(std::string(e.what()).find("path seed " + std::to_string(derive_seed(11, 0))), std::string::npos)
            << e.what();
    }
}

TEST(EstimateValue, JobsDoNotChangeResult) {
    const auto m = gbm_model(RiskFunction::exponential(0.5));
    auto cfg = config(3000);
    const auto a = estimate_value(m, StoppingPolicy::fixed_index(1, 2), StoppingPolicy::fixed_index(2, 1), cfg);
    cfg.jobs = 4;
    const auto b = estimate_value(m, StoppingPolicy::fixed_index(1, 2), StoppingPolicy::fixed_index(2, 1), cfg);
    EXPECT_EQ(a.value, b.value);
    EXPECT_EQ(a.stderr_value, b.stderr_value);
}

TEST(EstimateValue, OptimalPoliciesReachSolverValueDeterministic) {
    for (const auto& g : {RiskFunction::identity(), RiskFunction::exponential(0.5)}) {
        const auto m = desk_model(g);
        const auto surface = ode_surface(m);
        const auto [p1, p2] = optimal_policies(surface, m.bundle);
        const auto est = estimate_value(m, p1, p2, config(20000));
        EXPECT_LE(std::fabs(est.value - surface->q.front()), 3.0 * est.stderr_value)
            << g.name() << " mc=" << est.value << " ode=" << surface->q.front();
    }
}

TEST(EstimateValue, OptimalPoliciesReachSolverValueMarkov) {
    const auto m = gbm_model();
    const auto surface = pde_surface(m);
    const auto [p1, p2] = optimal_policies(surface, m.bundle);
    const auto est = estimate_value(m, p1, p2, config(20000));
    const double q0 = surface->q_at(0.0, m.x0);
    EXPECT_LE(std::fabs(est.value - q0), 3.0 * est.stderr_value) << "mc=" << est.value << " pde=" << q0;
    EXPECT_EQ(p1.clamp_count(), 0u);
}

TEST(OptimalPolicies, UnreachableUpperMeansCapOnly) {
    auto m = desk_model();
    m.bundle.U = PayoffMap::constant(1e9);
    const auto surface = ode_surface(m);
    const auto [p1, p2] = optimal_policies(surface, m.bundle);
    for (std::size_t p = 0; p < 200; ++p) {
        const Scenario s = simulate_scenario(m, 20, 2, p);
        EXPECT_EQ(stopping_time(p1, s.s1, s.path, 1.0), s.s1.arrivals[m_index(s.s1, 1.0) - 1]);
    }
}

TEST(OptimalPolicies, HugeLowerStopsAtFirstArrival) {
    auto m = desk_model();
    m.bundle.L = PayoffMap::constant(1e9);
    const auto surface = ode_surface(m);
    const auto [p1, p2] = optimal_policies(surface, m.bundle);
    for (std::size_t p = 0; p < 200; ++p) {
        const Scenario s = simulate_scenario(m, 20, 2, p);
        EXPECT_EQ(stopping_time(p2, s.s2, s.path, 1.0), s.s2.arrivals.front());
    }
}

TEST(OptimalPolicies, InteriorRegimeReducesToCaps) {
    // L < Q < U throughout: neither threshold fires
    const auto m = constant_model(0.05, 1, 2, 0.2, 2.0, 1.0, 1.0);
    const auto surface = ode_surface(m);
    for (double q : surface->q) {
        EXPECT_GT(q, 0.2);
        EXPECT_LT(q, 2.0);
    }
    const auto [p1, p2] = optimal_policies(surface, m.bundle);
    for (std::size_t p = 0; p < 200; ++p) {
        const Scenario s = simulate_scenario(m, 20, 4, p);
        EXPECT_GT(stopping_time(p1, s.s1, s.path, 1.0), 1.0);
        EXPECT_GT(stopping_time(p2, s.s2, s.path, 1.0), 1.0);
    }
}

TEST(OptimalPolicies, SurfaceMismatch) {
    const auto surface = ode_surface(desk_model());
    auto m = desk_model();
    m.bundle.T = 2.0;
    EXPECT_THROW(optimal_policies(surface, m.bundle), std::invalid_argument);
}

TEST(SaddleCheck, OptimalDeviationHasZeroMargin) {
    const auto m = desk_model();
    const auto surface = ode_surface(m);
    const auto [p1, p2] = optimal_policies(surface, m.bundle);
    const auto rep = saddle_check(m, p1, p2, {p1, p2}, config(2000));
    ASSERT_EQ(rep.deviations.size(), 2u);
    for (const auto& d : rep.deviations) {
        EXPECT_EQ(d.margin, 0.0);
        EXPECT_EQ(d.stderr_margin, 0.0);
        EXPECT_TRUE(d.holds);
    }
}

TEST(SaddleCheck, DefaultDeviationsDeterministic) {
    for (const auto& g : {RiskFunction::identity(), RiskFunction::exponential(0.5)}) {
        const auto m = desk_model(g);
        const auto surface = ode_surface(m);
        const auto [p1, p2] = optimal_policies(surface, m.bundle);
        auto devs = default_deviations(1, surface, m.bundle);
        for (auto& d : default_deviations(2, surface, m.bundle)) devs.push_back(d);
        ASSERT_GE(devs.size(), 20u);
        const auto rep = saddle_check(m, p1, p2, devs, config(20000));
        for (const auto& d : rep.deviations) {
            EXPECT_TRUE(d.holds) << g.name() << " player " << d.player << " " << d.policy << " margin " << d.margin
                                 << " se " << d.stderr_margin;
        }
        EXPECT_TRUE(rep.pass);
        EXPECT_LE(rep.lower, rep.upper + 1e-12);
    }
}

TEST(SaddleCheck, StoppingIsStrictlyProfitableForPlayerTwo) {
    // L above the discounted terminal payoff: never stopping costs player 2
    const auto m = constant_model(0.1, 0.0, 3.0, 0.8, 5.0, 0.2, 1.0);
    const auto surface = ode_surface(m);
    const auto [p1, p2] = optimal_policies(surface, m.bundle);
    const auto rep = saddle_check(m, p1, p2, {StoppingPolicy::never(2), StoppingPolicy::fixed_index(1, 1)},
                                  config(5000));
    EXPECT_LT(rep.deviations[0].margin, -3.0 * rep.deviations[0].stderr_margin);
    EXPECT_TRUE(rep.pass);
}

TEST(Qhat, Examples) {
    const auto m = desk_model();
    const auto surface = ode_surface(m);
    const DiscountedValues v(m, surface);
    EXPECT_DOUBLE_EQ(qhat(v, 1.0, 1, 1.0), v.obstacle(Obstacle::Xi, 1.0, 1.0));
    EXPECT_DOUBLE_EQ(qhat(v, 3.0, 2, 1.0), v.obstacle(Obstacle::Xi, 1.0, 1.0));

    auto high = desk_model();
    high.bundle.U = PayoffMap::constant(1e6);
    high.bundle.L = PayoffMap::constant(1e6);
    const auto hs = ode_surface(high);
    const DiscountedValues hv(high, hs);
    EXPECT_DOUBLE_EQ(qhat(hv, 0.4, 1, 1.0), hv.value(0.4, 1.0));
    EXPECT_DOUBLE_EQ(qhat(hv, 0.4, 2, 1.0), hv.obstacle(Obstacle::L, 0.4, 1.0));
}

TEST(Qhat, DiscountedValueMatchesPullback) {
    const auto m = desk_model(RiskFunction::exponential(0.5));
    const auto surface = ode_surface(m);
    const DiscountedValues v(m, surface);
    const RunningIntegral F(m.bundle, surface->times);
    for (std::size_t i = 0; i < surface->n_t(); i += 250) {
        const double t = surface->times[i];
        EXPECT_NEAR(v.value(t, 1.0), std::exp(-0.05 * t) * surface->q[i] + F.at_node(i), 1e-12);
    }
}

TEST(RecursionResidual, ConstantFixedPoint) {
    const auto m = constant_model(0.0, 2, 3, 1.0, 1.0, 1.0, 1.0, RiskFunction::exponential(1.0));
    const auto surface = ode_surface(m, 100);
    for (double t : {0.0, 0.3, 0.9}) EXPECT_NEAR(recursion_residual(m, surface, t, 16).residual, 0.0, 1e-14);
}

TEST(RecursionResidual, NoSignalsIsPureDiscount) {
    const auto m = constant_model(0.07, 0, 0, 0.3, 0.4, 0.9, 1.0, RiskFunction::exponential(0.5), 0.2);
    const auto surface = ode_surface(m, 1000);
    for (double t : {0.0, 0.5}) EXPECT_NEAR(recursion_residual(m, surface, t, 16).residual, 0.0, 1e-12);
}

TEST(RecursionResidual, GenericInstance) {
    for (const auto& g : {RiskFunction::identity(), RiskFunction::exponential(0.5)}) {
        const auto m = desk_model(g);
        const auto surface = ode_surface(m, 10000);
        for (double t : {0.0, 0.1, 0.25, 0.5, 0.8}) {
            const auto r = recursion_residual(m, surface, t, 64);
            EXPECT_LE(std::fabs(r.residual), 1e-6 * r.scale) << g.name() << " t=" << t << " res=" << r.residual;
        }
    }
}

TEST(RecursionResidual, Errors) {
    const auto m = desk_model();
    const auto surface = ode_surface(m, 100);
    EXPECT_THROW(recursion_residual(m, surface, 1.0), std::out_of_range);
    const auto mg = gbm_model();
    EXPECT_THROW(recursion_residual(mg, pde_surface(mg), 0.2), ModeError);
}

TEST(MartingaleCheck, ConstantInstanceHasZeroIncrements) {
    const auto m = constant_model(0.0, 2, 3, 1.0, 1.0, 1.0, 1.0);
    const auto rep = martingale_check(m, ode_surface(m, 100), 4, 500, 3);
    for (const auto& prop : rep.properties) {
        for (const auto& st : prop.steps) {
            EXPECT_EQ(st.mean, 0.0);
            EXPECT_EQ(st.stderr_mean, 0.0);
        }
    }
    EXPECT_TRUE(rep.pass);
}

TEST(MartingaleCheck, GenericInstance) {
    for (const auto& g : {RiskFunction::identity(), RiskFunction::exponential(0.5)}) {
        const auto m = desk_model(g);
        const auto rep = martingale_check(m, ode_surface(m, 4000), 4, 20000, 17, 2);
        ASSERT_EQ(rep.properties.size(), 4u);
        for (const auto& prop : rep.properties) {
            EXPECT_TRUE(prop.pass) << g.name() << " " << prop.name;
            EXPECT_EQ(prop.steps.size(), 4u);
        }
        // never stopping player 2 forgoes L above the continuation value
        double total = 0.0;
        for (const auto& st : rep.properties[1].steps) total += st.mean;
        EXPECT_LT(total, 0.0);
    }
}

TEST(Symmetry, PlayerExchangeNegatesValue) {
    auto a = constant_model(0.02, 1.5, 1.5, 0.0, 0.0, 0.0, 1.0, RiskFunction::identity(), 0.1);
    a.bundle.L = PayoffMap([](double t, double) { return 0.3 + 0.1 * t; }, false);
    a.bundle.U = PayoffMap([](double t, double) { return 0.7 - 0.2 * t; }, false);
    a.bundle.xi = PayoffMap::constant(0.45);
    auto b = a;
    b.bundle.f = PayoffMap::constant(-0.1);
    b.bundle.L = PayoffMap([](double t, double) { return -(0.7 - 0.2 * t); }, false);
    b.bundle.U = PayoffMap([](double t, double) { return -(0.3 + 0.1 * t); }, false);
    b.bundle.xi = PayoffMap::constant(-0.45);
    for (std::size_t k1 = 1; k1 <= 3; ++k1) {
        for (std::size_t k2 = 1; k2 <= 3; ++k2) {
            std::vector<double> ra;
            std::vector<double> rb;
            for (std::size_t p = 0; p < 2000; ++p) {
                const Scenario s = simulate_scenario(a, 20, 31, p);
                const double sigma = stopping_time(StoppingPolicy::fixed_index(1, k1), s.s1, s.path, 1.0);
                const double tau = stopping_time(StoppingPolicy::fixed_index(2, k2), s.s2, s.path, 1.0);
                ra.push_back(realized_payoff(a.bundle, s.path, sigma, tau).payoff);
                // player roles and streams exchanged
                const double sigma_b = stopping_time(StoppingPolicy::fixed_index(1, k2), s.s2, s.path, 1.0);
                const double tau_b = stopping_time(StoppingPolicy::fixed_index(2, k1), s.s1, s.path, 1.0);
                rb.push_back(realized_payoff(b.bundle, s.path, sigma_b, tau_b).payoff);
            }
            EXPECT_EQ(summarize(ra).mean, -summarize(rb).mean) << k1 << "," << k2;
        }
    }
}

TEST(PathsCsv, HeaderAndRows) {
    const auto m = constant_model(0.0, 1, 0, 1.0, 2.0, 3.0, 1.0);
    const auto recs = simulate_games(m, StoppingPolicy::fixed_index(1, 1), StoppingPolicy::never(2), config(100));
    std::ostringstream os;
    write_paths_csv(os, recs);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "seed,sigma,tau,regime,R");
    std::getline(is, line);
    EXPECT_NE(line.find(",never,"), std::string::npos) << line;
    std::size_t rows = 1;
    while (std::getline(is, line)) ++rows;
    EXPECT_EQ(rows, 100u);
}
