#include "penet/specfun.h"

#include "penet/errors.h"

#include <cmath>
#include <numbers>
#include <string>

namespace penet::specfun {
namespace {

// Below this the argument is shifted upward by recurrence before the
// asymptotic expansions are applied.
constexpr double kAsymptoticFloor = 10.0;

void require_positive(double x, const char* fn) {
    if (!(x > 0.0)) {
        throw DomainError(std::string(fn) + ": argument must be > 0, got " + std::to_string(x));
    }
}

double stirling_log_gamma(double z) {
    const double inv = 1.0 / z;
    const double inv2 = inv * inv;
    // Bernoulli terms B_{2k} / (2k (2k-1) z^{2k-1})
    const double series =
        inv * (1.0 / 12.0 +
               inv2 * (-1.0 / 360.0 +
                       inv2 * (1.0 / 1260.0 +
                               inv2 * (-1.0 / 1680.0 +
                                       inv2 * (1.0 / 1188.0 +
                                               inv2 * (-691.0 / 360360.0 + inv2 * (1.0 / 156.0)))))));
    return (z - 0.5) * std::log(z) - z + 0.5 * std::log(2.0 * std::numbers::pi) + series;
}

double asymptotic_digamma(double z) {
    const double inv = 1.0 / z;
    const double inv2 = inv * inv;
    const double series =
        inv2 * (1.0 / 12.0 -
                inv2 * (1.0 / 120.0 -
                        inv2 * (1.0 / 252.0 -
                                inv2 * (1.0 / 240.0 -
                                        inv2 * (5.0 / 660.0 -
                                                inv2 * (691.0 / 32760.0 - inv2 * (1.0 / 12.0)))))));
    return std::log(z) - 0.5 * inv - series;
}

double asymptotic_trigamma(double z) {
    const double inv = 1.0 / z;
    const double inv2 = inv * inv;
    const double series =
        inv * inv2 *
        (1.0 / 6.0 -
         inv2 * (1.0 / 30.0 -
                 inv2 * (1.0 / 42.0 -
                         inv2 * (1.0 / 30.0 -
                                 inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * (7.0 / 6.0)))))));
    return inv + 0.5 * inv2 + series;
}

} // namespace

double log_gamma(double x) {
    require_positive(x, "log_gamma");
    if (x >= kAsymptoticFloor) {
        return stirling_log_gamma(x);
    }
    // ln Gamma(x) = ln Gamma(x + n) - ln(x (x+1) ... (x+n-1))
    double product = 1.0;
    double z = x;
    while (z < kAsymptoticFloor) {
        product *= z;
        z += 1.0;
    }
    return stirling_log_gamma(z) - std::log(product);
}

double digamma(double x) {
    require_positive(x, "digamma");
    double shift = 0.0;
    double z = x;
    while (z < kAsymptoticFloor) {
        shift += 1.0 / z;
        z += 1.0;
    }
    return asymptotic_digamma(z) - shift;
}

double trigamma(double x) {
    require_positive(x, "trigamma");
    double shift = 0.0;
    double z = x;
    while (z < kAsymptoticFloor) {
        shift += 1.0 / (z * z);
        z += 1.0;
    }
    return asymptotic_trigamma(z) + shift;
}

double log_beta(double a, double b) {
    return log_gamma(a) + log_gamma(b) - log_gamma(a + b);
}

} // namespace penet::specfun
