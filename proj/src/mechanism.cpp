#include "skylink/mechanism.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace skylink {

std::string_view method_name(Method m) {
  switch (m) {
    case Method::Vanilla: return "vanilla";
    case Method::Mha: return "mha";
    case Method::Isha: return "isha";
  }
  return "unknown";
}

Method parse_method(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "vanilla") return Method::Vanilla;
  if (lower == "mha") return Method::Mha;
  if (lower == "isha") return Method::Isha;
  throw std::invalid_argument("unknown mechanism '" + std::string(s) +
                              "' (expected vanilla, mha or isha)");
}

std::string MechanismSpec::label() const {
  switch (method) {
    case Method::Vanilla: return "Vanilla";
    case Method::Mha: return "MHA" + std::to_string(count);
    case Method::Isha: return "ISHA" + std::to_string(count);
  }
  return "unknown";
}

MechanismSpec parse_mechanism_label(std::string_view label) {
  std::size_t split = label.size();
  while (split > 0 && std::isdigit(static_cast<unsigned char>(label[split - 1]))) --split;
  MechanismSpec spec;
  spec.method = parse_method(label.substr(0, split));
  const auto digits = label.substr(split);
  if (spec.method == Method::Vanilla) {
    if (!digits.empty()) throw std::invalid_argument("mechanism label '" + std::string(label) + "': Vanilla takes no count");
    spec.count = 0;
    return spec;
  }
  if (digits.empty()) throw std::invalid_argument("mechanism label '" + std::string(label) + "' needs a count, e.g. ISHA3");
  spec.count = std::stoi(std::string(digits));
  return spec;
}

}  // namespace skylink
