#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace steu::csv {

/// Quotes a field when it holds a comma, quote, or line break.
std::string escape(std::string_view field);

/// Splits one CSV record, honoring double-quoted fields.
std::vector<std::string> split(std::string_view line);

/// Shortest "%.*g" rendering (up to 17 digits) that parses back exactly.
std::string number(double value);

/// Fixed "%.Ng" rendering.
std::string number(double value, int significant_digits);

}  // namespace steu::csv
