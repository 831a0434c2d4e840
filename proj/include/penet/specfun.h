#pragma once

// Real special functions on the positive half-line, used by the Beta pdf and
// the Beta loss. Each throws penet::DomainError for x <= 0 (or NaN).

namespace penet::specfun {

/// ln Gamma(x) for x > 0.
double log_gamma(double x);

/// psi(x) = d/dx ln Gamma(x) for x > 0.
double digamma(double x);

/// psi'(x) for x > 0.
double trigamma(double x);

/// ln B(a, b) = ln Gamma(a) + ln Gamma(b) - ln Gamma(a + b).
double log_beta(double a, double b);

} // namespace penet::specfun
