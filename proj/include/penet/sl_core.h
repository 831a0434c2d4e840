#pragma once

// Subjective-logic algebra for binary propositions: Beta evidence, binomial
// opinions and the evidence-to-opinion mapping.

namespace penet::sl {

/// Uncertainty evidence amount for binomial opinions. Fixed.
inline constexpr double kUncertaintyWeight = 2.0;

/// Prior shared by every class unless a caller says otherwise.
inline constexpr double kDefaultBaseRate = 0.5;

/// Positive (alpha) and negative (beta) pseudo-counts of a Beta distribution.
/// Both must be >= 1 for the opinion mapping to yield non-negative masses.
struct BetaEvidence {
    double alpha = 1.0;
    double beta = 1.0;

    double total() const { return alpha + beta; }
};

/// (belief, disbelief, vacuity, base rate); b + d + u = 1.
struct BinomialOpinion {
    double belief = 0.0;
    double disbelief = 0.0;
    double vacuity = 1.0;
    double base_rate = kDefaultBaseRate;
};

/// Throws DomainError unless alpha >= 1 and beta >= 1 (and both finite).
void validate(const BetaEvidence& ev);

/// Mapping rule b = (alpha-1)/S, d = (beta-1)/S, u = W/S with S = alpha+beta.
BinomialOpinion opinion_from_evidence(const BetaEvidence& ev, double base_rate = kDefaultBaseRate);

/// Projected probability b + a*u.
double expected_probability(const BinomialOpinion& op);

/// Convenience: expected_probability(opinion_from_evidence(ev, a)).
double expected_probability(const BetaEvidence& ev, double base_rate = kDefaultBaseRate);

/// W / (alpha + beta).
double vacuity(const BetaEvidence& ev);

/// (alpha-1) ln p + (beta-1) ln(1-p) - ln B(alpha, beta).
///
/// The endpoints are accepted only when the matching exponent is zero
/// (e.g. p = 0 with alpha = 1); if the exponent is positive the density is 0
/// and -infinity is returned, if negative a DomainError is thrown.
double beta_log_pdf(double p, const BetaEvidence& ev);

} // namespace penet::sl
