#pragma once

namespace fold2seq::cli {

// Entry point for the fold2seq binary. Returns the process exit code:
// 0 success, 1 usage error, 2 data error, 3 numeric failure.
int run(int argc, char** argv);

}  // namespace fold2seq::cli
