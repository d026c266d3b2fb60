#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "dynkin/risk.hpp"
#include "dynkin/rng.hpp"

namespace dynkin {

// "Never" is the largest finite time, so comparisons and min() stay total.
inline constexpr double kNever = std::numeric_limits<double>::max();

inline bool is_never(double t) { return t >= kNever; }

struct SignalStream {
    double intensity = 0.0;
    std::vector<double> arrivals;
    int id = 1;

    bool silent() const { return arrivals.size() == 1 && is_never(arrivals.front()); }
};

struct MergedEvent {
    double time;
    int label;

    bool operator==(const MergedEvent&) const = default;
};

using MergedSequence = std::vector<MergedEvent>;

/// Poisson arrivals of rate `lambda` up to and including the first arrival
/// strictly after `horizon_cap`. Stream `stream_id` of master seed `seed`
/// draws from its own derived key. A zero rate gives the single arrival kNever.
inline SignalStream sample_stream(double lambda, double horizon_cap, std::uint64_t seed, int stream_id) {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw std::invalid_argument("parameter error: intensity must be >= 0, got " + format_number(lambda));
    }
    if (!(horizon_cap > 0.0)) throw std::invalid_argument("parameter error: horizon cap must be > 0");
    SignalStream s;
    s.intensity = lambda;
    s.id = stream_id;
    if (lambda == 0.0) {
        s.arrivals.push_back(kNever);
        return s;
    }
    CounterRng rng(derive_seed(seed, static_cast<std::uint64_t>(stream_id)));
    double t = 0.0;
    while (true) {
        const double gap = rng.exponential(lambda);
        // A zero gap would break strict monotonicity; redraw.
        if (!(gap > 0.0)) continue;
        t += gap;
        s.arrivals.push_back(t);
        if (t > horizon_cap) break;
    }
    return s;
}

/// Two-way merge of the finite arrivals; on equal times label 2 comes first.
inline MergedSequence merge(const SignalStream& s1, const SignalStream& s2) {
    MergedSequence out;
    out.reserve(s1.arrivals.size() + s2.arrivals.size());
    std::size_t i = 0;
    std::size_t j = 0;
    const auto& a = s1.arrivals;
    const auto& b = s2.arrivals;
    while (true) {
        const bool has_a = i < a.size() && !is_never(a[i]);
        const bool has_b = j < b.size() && !is_never(b[j]);
        if (!has_a && !has_b) break;
        if (has_b && (!has_a || b[j] <= a[i])) {
            out.push_back({b[j++], s2.id});
        } else {
            out.push_back({a[i++], s1.id});
        }
    }
    return out;
}

/// First arrival strictly after t, or kNever.
inline double next_arrival(const SignalStream& s, double t) {
    auto it = std::upper_bound(s.arrivals.begin(), s.arrivals.end(), t);
    return it == s.arrivals.end() ? kNever : *it;
}

/// The n >= 1 with T_{n-1} <= T < T_n (T_0 = 0).
inline std::size_t m_index(const SignalStream& s, double T) {
    if (!(T >= 0.0)) throw std::invalid_argument("m_index needs T >= 0");
    auto it = std::upper_bound(s.arrivals.begin(), s.arrivals.end(), T);
    if (it == s.arrivals.end()) throw std::runtime_error("stream truncated before horizon");
    return static_cast<std::size_t>(std::distance(s.arrivals.begin(), it)) + 1;
}

inline void write_streams_csv(std::ostream& os, const SignalStream& s1, const SignalStream& s2) {
    os << "time,label\n";
    os.precision(17);
    for (const auto& e : merge(s1, s2)) os << e.time << ',' << e.label << '\n';
}

}  // namespace dynkin
