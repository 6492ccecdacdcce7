#pragma once

namespace maskany {

/// Command-line entry point. Exit status: 0 on success, 2 for usage or
/// configuration errors, 1 for runtime failures.
int run_cli(int argc, char** argv);

}  // namespace maskany
