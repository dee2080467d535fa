#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace solens {

/// Runs one subcommand. Returns 0 on success, 1 on validation failures
/// (bad flags, bad config, contract violations) and 2 on I/O failures.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace solens
