#pragma once

namespace pcd {

// Entry point behind the `pcd` binary. Exit codes: 0 success, 1 runtime
// failure, 2 usage error.
int cli_main(int argc, const char* const* argv);

}  // namespace pcd
