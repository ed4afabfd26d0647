#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace icubert::cli {

// Exit codes: 0 success, 1 domain error, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

// Flat key=value file; '#' starts a comment. Throws on malformed lines.
std::map<std::string, std::string> read_config_file(const std::string& path);

}  // namespace icubert::cli
