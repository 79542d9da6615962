#pragma once

namespace cstbir {

// Entry point of the `cstbir` tool. Returns the process exit code: 0 on
// success, 1 with a one-line "error: <code>: <message>" on stderr for failed
// commands, 2 with usage text for an unknown or missing subcommand.
int run_cli(int argc, char** argv);

}  // namespace cstbir
