#pragma once

#include <iosfwd>

namespace penet::cli {

/// Runs the `penet` command line with the given arguments (argv[0] is the
/// program name). Returns the exit code: 0 on success, 1 for usage or
/// configuration errors, 2 for runtime errors.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace penet::cli
