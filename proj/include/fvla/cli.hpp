#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fvla {

/// The `fvla` command line: schedule, actions, visual, dataset, env, gen,
/// eval and serve. Returns 0 on success, 2 on a usage error, 1 on a runtime
/// error. `args` excludes the program name.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_main(int argc, char** argv);

}  // namespace fvla
