#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "qlab/config.hpp"
#include "qlab/corpus.hpp"

namespace qlab {

/// Exit codes of cli_main.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Subcommands train, quantize, eval, hessian and report. `args` excludes the
/// program name. Precedence: --set / dedicated flags, then the config file,
/// then built-in defaults.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_main(int argc, char** argv);

/// Training and holdout streams of the configured corpus (holdout is the
/// trailing data.holdout_fraction).
struct CorpusSplit {
  TokenStream train;
  TokenStream holdout;
};
CorpusSplit load_split(const RunConfig& config);

}  // namespace qlab
