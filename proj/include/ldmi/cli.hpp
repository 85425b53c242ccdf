#pragma once

#include <iosfwd>

namespace ldmi {

/// Runs one `ldmi` subcommand. Returns 0 on success, 2 on usage or config
/// errors, 1 on runtime failures; failures print a single line
/// "ldmi: error[<code>]: <message>" to `err`.
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ldmi
