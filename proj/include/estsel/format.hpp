#pragma once

#include <string>

namespace estsel {

/// Shortest decimal text that parses back to the same double; "NA" for NaN.
std::string format_number(double value);

/// Fixed-point with `decimals` places, trailing zeros (and a bare point) removed.
std::string format_trimmed(double value, int decimals);

}  // namespace estsel
