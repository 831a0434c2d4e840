#include "penet/sl_core.h"

#include "penet/errors.h"
#include "penet/specfun.h"

#include <cmath>
#include <limits>
#include <string>

namespace penet::sl {

void validate(const BetaEvidence& ev) {
    if (!(ev.alpha >= 1.0) || !(ev.beta >= 1.0) || !std::isfinite(ev.alpha) || !std::isfinite(ev.beta)) {
        throw DomainError("Beta evidence requires alpha >= 1 and beta >= 1, got (" +
                          std::to_string(ev.alpha) + ", " + std::to_string(ev.beta) + ")");
    }
}

BinomialOpinion opinion_from_evidence(const BetaEvidence& ev, double base_rate) {
    validate(ev);
    if (!(base_rate >= 0.0 && base_rate <= 1.0)) {
        throw DomainError("base rate must lie in [0, 1]");
    }
    const double total = ev.total();
    BinomialOpinion op;
    op.belief = (ev.alpha - 1.0) / total;
    op.disbelief = (ev.beta - 1.0) / total;
    op.vacuity = kUncertaintyWeight / total;
    op.base_rate = base_rate;
    return op;
}

double expected_probability(const BinomialOpinion& op) {
    return op.belief + op.base_rate * op.vacuity;
}

double expected_probability(const BetaEvidence& ev, double base_rate) {
    return expected_probability(opinion_from_evidence(ev, base_rate));
}

double vacuity(const BetaEvidence& ev) {
    validate(ev);
    return kUncertaintyWeight / ev.total();
}

double beta_log_pdf(double p, const BetaEvidence& ev) {
    if (!(ev.alpha > 0.0) || !(ev.beta > 0.0)) {
        throw DomainError("beta_log_pdf: shape parameters must be positive");
    }
    if (!(p >= 0.0 && p <= 1.0)) {
        throw DomainError("beta_log_pdf: p must lie in [0, 1]");
    }
    const double a1 = ev.alpha - 1.0;
    const double b1 = ev.beta - 1.0;
    auto edge_term = [](double exponent, double x) {
        // exponent * ln x with the 0 * ln 0 = 0 convention
        if (x > 0.0) {
            return exponent * std::log(x);
        }
        if (exponent == 0.0) {
            return 0.0;
        }
        if (exponent > 0.0) {
            return -std::numeric_limits<double>::infinity();
        }
        throw DomainError("beta_log_pdf: density is unbounded at this endpoint");
    };
    return edge_term(a1, p) + edge_term(b1, 1.0 - p) - specfun::log_beta(ev.alpha, ev.beta);
}

} // namespace penet::sl
