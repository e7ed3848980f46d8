#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace feds {

enum ExitCode { kExitOk = 0, kExitUser = 1, kExitInternal = 2 };

// args excludes the program name. Normal output goes to `out`, usage and
// error text to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace feds
