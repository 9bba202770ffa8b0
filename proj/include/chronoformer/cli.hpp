// Batch command-line surface. run_cli is the whole program: main() only
// forwards argv, so tests can drive every subcommand in-process and capture
// the streams.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace chronoformer {

// Subcommands: gen, train, forecast, eval, pe, mask, attn, bench.
// Returns the process exit code: 0 success, 1 usage/configuration error,
// 2 data/parse error, 3 numeric divergence.
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);
int run_cli(const std::vector<std::string>& args);

}  // namespace chronoformer
