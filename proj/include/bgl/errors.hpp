#pragma once

#include <stdexcept>
#include <string>

namespace bgl {

enum class ErrorKind {
    domain,              ///< argument outside the mathematical domain
    precondition,        ///< caller violated a documented precondition
    no_interaction,      ///< trajectory never enters the interaction range
    trapped_or_singular, ///< tangency or trapping, quadrature path not usable
    integration_stiff,   ///< step-size underflow or near-singular approach
    overflow,            ///< combinatorial counter overflow
    no_preimage,         ///< angle outside every branch image
    rejected,            ///< parameter point violates a measure constraint
    budget_exhausted,
    config,
};

inline const char* to_string(ErrorKind k)
{
    switch (k) {
    case ErrorKind::domain: return "domain";
    case ErrorKind::precondition: return "precondition";
    case ErrorKind::no_interaction: return "no-interaction";
    case ErrorKind::trapped_or_singular: return "trapped-or-singular";
    case ErrorKind::integration_stiff: return "integration-stiff";
    case ErrorKind::overflow: return "overflow";
    case ErrorKind::no_preimage: return "no-preimage";
    case ErrorKind::rejected: return "rejected";
    case ErrorKind::budget_exhausted: return "budget-exhausted";
    case ErrorKind::config: return "config";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

} // namespace bgl
