#pragma once

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynkin {

enum class GridKind { Linear, Log };

/// Solved field on a (t, x) grid, stored row-major with one row per time.
/// In ODE mode `states` is empty and each row holds a single value.
struct ValueSurface {
    std::vector<double> times;
    std::vector<double> states;
    GridKind grid = GridKind::Linear;
    std::vector<double> qbar;
    std::vector<double> zbar;
    std::vector<double> q;

    bool ode_mode() const { return states.empty(); }
    std::size_t n_t() const { return times.size(); }
    std::size_t n_x() const { return ode_mode() ? 1 : states.size(); }
    std::size_t index(std::size_t i, std::size_t j) const { return i * n_x() + j; }

    double x_min() const { return ode_mode() ? 0.0 : states.front(); }
    double x_max() const { return ode_mode() ? 0.0 : states.back(); }
    bool covers(double x) const { return ode_mode() || (x >= states.front() && x <= states.back()); }

    /// Bilinear interpolation in (t, x); x outside the grid is clamped.
    double interpolate(const std::vector<double>& field, double t, double x) const {
        const auto [i, wt] = bracket(times, t);
        if (ode_mode()) return (1.0 - wt) * field[i] + wt * field[i + 1];
        const auto [j, wx] = bracket(states, x);
        const std::size_t nx = n_x();
        const double lo = (1.0 - wx) * field[i * nx + j] + wx * field[i * nx + j + 1];
        const double hi = (1.0 - wx) * field[(i + 1) * nx + j] + wx * field[(i + 1) * nx + j + 1];
        return (1.0 - wt) * lo + wt * hi;
    }

    double qbar_at(double t, double x) const { return interpolate(qbar, t, x); }
    double q_at(double t, double x) const { return interpolate(q, t, x); }

    void write_csv(std::ostream& os) const {
        os << "t,x,qbar,zbar,q\n";
        os.precision(17);
        for (std::size_t i = 0; i < n_t(); ++i) {
            for (std::size_t j = 0; j < n_x(); ++j) {
                const std::size_t k = index(i, j);
                os << times[i] << ',';
                if (!ode_mode()) os << states[j];
                os << ',' << qbar[k] << ',' << zbar[k] << ',' << q[k] << '\n';
            }
        }
    }

private:
    // Segment index and weight of v in a sorted grid, clamped to the ends.
    static std::pair<std::size_t, double> bracket(const std::vector<double>& grid, double v) {
        if (grid.size() < 2) throw std::logic_error("value surface grid needs two points");
        if (v <= grid.front()) return {0, 0.0};
        if (v >= grid.back()) return {grid.size() - 2, 1.0};
        auto it = std::upper_bound(grid.begin(), grid.end(), v);
        const auto j = static_cast<std::size_t>(std::distance(grid.begin(), it)) - 1;
        return {j, (v - grid[j]) / (grid[j + 1] - grid[j])};
    }
};

}  // namespace dynkin
