#pragma once

#include <string>
#include <vector>

namespace cellprompt {

/// Runs the `cellprompt` command line. `args` excludes the program name. Returns the exit code:
/// 0 on success, nonzero with a message on stderr otherwise.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

} // namespace cellprompt
