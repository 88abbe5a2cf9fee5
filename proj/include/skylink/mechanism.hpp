#pragma once

#include <string>
#include <string_view>

namespace skylink {

/// Helper message-generation scheme.
enum class Method { Vanilla, Mha, Isha };

std::string_view method_name(Method m);
/// Parses "vanilla" / "mha" / "isha" (case-insensitive). Throws on anything else.
Method parse_method(std::string_view s);

/// Selected mechanism and its size parameter (N_H for MHA, N_I for ISHA,
/// ignored for Vanilla).
struct MechanismSpec {
  Method method = Method::Isha;
  int count = 3;
  double beta = 1.0;

  /// Short label, e.g. "ISHA3", "MHA3", "Vanilla".
  std::string label() const;
};

/// Inverse of MechanismSpec::label(): "ISHA1", "mha3", "Vanilla". Beta is 1.
MechanismSpec parse_mechanism_label(std::string_view label);

}  // namespace skylink
