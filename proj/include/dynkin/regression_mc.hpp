#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynkin/bsde.hpp"
#include "dynkin/markov.hpp"
#include "dynkin/parallel.hpp"
#include "dynkin/rng.hpp"
#include "dynkin/stats.hpp"

namespace dynkin {

struct RegressionConfig {
    std::size_t n_t = 100;
    std::size_t n_paths = 10000;
    int basis_degree = 3;
    std::uint64_t seed = 1;
    int jobs = 1;
};

/// Conditional-expectation fit at one time step: a polynomial in
/// (x - center) / scale with the listed coefficients (lowest degree first).
struct StepFit {
    double t = 0.0;
    double center = 0.0;
    double scale = 1.0;
    std::vector<double> coefficients;

    double operator()(double x) const {
        const double z = (x - center) / scale;
        double acc = 0.0;
        for (auto it = coefficients.rbegin(); it != coefficients.rend(); ++it) acc = acc * z + *it;
        return acc;
    }
};

struct RegressionResult {
    double qbar0 = 0.0;
    double stderr_qbar = 0.0;
    double value = 0.0;         // g^{-1}(qbar0)
    double stderr_value = 0.0;  // delta method
    std::vector<StepFit> fits;  // one per time step 0 .. n_t - 1
    std::vector<std::string> warnings;
};

namespace detail {

// Least-squares fit of y on centered and scaled monomials; lowers the degree
// while the design is rank deficient.
inline StepFit fit_step(double t, const std::vector<double>& x, const std::vector<double>& y, int degree,
                        std::set<std::string>& warnings) {
    StepFit fit;
    fit.t = t;
    const auto n = static_cast<Eigen::Index>(x.size());
    const SampleSummary sx = summarize(x);
    fit.center = sx.mean;
    fit.scale = std::sqrt(sx.variance);
    if (!(fit.scale > 1e-12 * std::max(1.0, std::fabs(sx.mean)))) {
        fit.scale = 1.0;
        fit.coefficients = {summarize(y).mean};
        return fit;
    }
    const Eigen::Map<const Eigen::VectorXd> rhs(y.data(), n);
    for (int d = degree; d >= 0; --d) {
        Eigen::MatrixXd a(n, d + 1);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double z = (x[static_cast<std::size_t>(i)] - fit.center) / fit.scale;
            double p = 1.0;
            for (int k = 0; k <= d; ++k) {
                a(i, k) = p;
                p *= z;
            }
        }
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
        if (qr.rank() == d + 1) {
            const Eigen::VectorXd c = qr.solve(rhs);
            fit.coefficients.assign(c.data(), c.data() + c.size());
            if (d < degree) {
                warnings.insert("rank-deficient regression: basis degree reduced from " + std::to_string(degree) +
                                " to " + std::to_string(d));
            }
            return fit;
        }
    }
    fit.coefficients = {summarize(y).mean};
    return fit;
}

}  // namespace detail

/// Backward induction on Euler paths with the trapezoidal multistep scheme:
/// S_k = S_{k+1} + dt/2 (driver(Y_k) + driver(Y_{k+1})), Y_k = E[S_k | X_k] by
/// least squares, the implicit half resolved by `picard` refits per step.
inline RegressionResult solve_regression_mc(const MarkovModel& m, const RegressionConfig& cfg) {
    m.validate();
    detail::require_time_only_f(m);
    if (cfg.n_paths < 1000) throw std::invalid_argument("regression Monte Carlo needs at least 1000 paths");
    if (cfg.basis_degree < 0) throw std::invalid_argument("basis degree must be >= 0");
    if (cfg.n_t < 1) throw std::invalid_argument("regression Monte Carlo needs n_t >= 1");
    const std::size_t np = cfg.n_paths;
    const std::size_t nt = cfg.n_t;
    const std::vector<double> times = uniform_times(m.horizon(), nt);
    const RunningIntegral F(m.bundle, times);
    const auto& b = m.bundle;

    // states[k * np + p]
    std::vector<double> states((nt + 1) * np);
    parallel_for(np, cfg.jobs, [&](std::size_t p) {
        const StatePath path = simulate_path(m, nt, derive_seed(cfg.seed, p, 0));
        for (std::size_t k = 0; k <= nt; ++k) states[k * np + p] = path.states[k];
    });
    auto drive = [&](std::size_t k, double x, double y) {
        const double t = times[k];
        return driver(y, auxiliary_at(m, F, Obstacle::U, t, x), auxiliary_at(m, F, Obstacle::L, t, x), m.lambda1,
                      m.lambda2, b.r);
    };

    std::vector<double> sums(np);   // S_{k+1}, then S_k
    std::vector<double> d_next(np); // driver at (k+1, X_{k+1}, Y_{k+1})
    parallel_for(np, cfg.jobs, [&](std::size_t p) {
        const double x = states[nt * np + p];
        sums[p] = auxiliary_at(m, F, Obstacle::Xi, b.T, x);
        d_next[p] = drive(nt, x, sums[p]);
    });

    RegressionResult res;
    res.fits.resize(nt);
    std::set<std::string> warnings;
    std::vector<double> xk(np);
    std::vector<double> base(np);
    std::vector<double> trial(np);
    const int picard = 3;
    for (std::size_t k = nt; k-- > 0;) {
        const double dt = times[k + 1] - times[k];
        parallel_for(np, cfg.jobs, [&](std::size_t p) {
            xk[p] = states[k * np + p];
            base[p] = sums[p] + 0.5 * dt * d_next[p];
            trial[p] = sums[p] + dt * d_next[p];
        });
        StepFit fit = detail::fit_step(times[k], xk, trial, cfg.basis_degree, warnings);
        for (int it = 0; it < picard; ++it) {
            parallel_for(np, cfg.jobs,
                         [&](std::size_t p) { trial[p] = base[p] + 0.5 * dt * drive(k, xk[p], fit(xk[p])); });
            fit = detail::fit_step(times[k], xk, trial, cfg.basis_degree, warnings);
        }
        parallel_for(np, cfg.jobs, [&](std::size_t p) {
            sums[p] = trial[p];
            d_next[p] = drive(k, xk[p], fit(xk[p]));
        });
        res.fits[k] = std::move(fit);
    }

    const SampleSummary s = summarize(sums);
    res.qbar0 = s.mean;
    res.stderr_qbar = s.stderr_mean;
    res.value = m.g.inverse(res.qbar0);
    const double slope = m.g.derivative(res.value);
    res.stderr_value = slope > 0.0 ? res.stderr_qbar / slope : 0.0;
    res.warnings.assign(warnings.begin(), warnings.end());
    return res;
}

}  // namespace dynkin
