#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mdt::cli {

/// Runs one `mdt` invocation; args excludes the program name.
/// Returns 0 on success, 1 on runtime failure and 2 on usage errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mdt::cli
