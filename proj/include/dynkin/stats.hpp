#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace dynkin {

// Neumaier-compensated running sum. Order of add() calls is the summation
// order, so results are reproducible for a fixed input sequence.
class CompensatedSum {
public:
    void add(double v) {
        const double t = sum_ + v;
        if (std::fabs(sum_) >= std::fabs(v)) {
            comp_ += (sum_ - t) + v;
        } else {
            comp_ += (v - t) + sum_;
        }
        sum_ = t;
    }
    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

struct SampleSummary {
    std::size_t n = 0;
    double mean = 0.0;
    double variance = 0.0;  // unbiased
    double stderr_mean = 0.0;
};

// Mean and spread of a sample, accumulated left to right. Values are shifted
// by the first sample before summing, so n copies of c give exactly c with
// zero variance.
inline SampleSummary summarize(std::span<const double> xs) {
    SampleSummary s;
    s.n = xs.size();
    if (xs.empty()) return s;
    const double shift = xs.front();
    CompensatedSum acc;
    for (double x : xs) acc.add(x - shift);
    const double mean_shifted = acc.value() / static_cast<double>(s.n);
    s.mean = shift + mean_shifted;
    if (s.n > 1) {
        CompensatedSum sq;
        for (double x : xs) {
            const double d = (x - shift) - mean_shifted;
            sq.add(d * d);
        }
        s.variance = sq.value() / static_cast<double>(s.n - 1);
        s.stderr_mean = std::sqrt(s.variance / static_cast<double>(s.n));
    }
    return s;
}

}  // namespace dynkin
