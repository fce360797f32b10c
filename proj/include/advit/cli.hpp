#pragma once

namespace advit {

// Entry point shared by the installed binary and the CLI tests.
// Returns 0 on success, 1 on runtime failure, 2 on usage errors.
int run_cli(int argc, char** argv);

}  // namespace advit
