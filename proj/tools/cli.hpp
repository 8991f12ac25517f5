#pragma once
#include <iosfwd>
#include <string>
#include <vector>
namespace genemamba::cli {

// Exit codes: 0 success, 1 usage, 2 data/config/state error, 3 numeric failure.
int run(const std::vector<std::string>& args);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::vector<std::string> subcommands();
// Long flag names (with leading dashes) accepted by a subcommand.
std::vector<std::string> flags(const std::string& subcommand);

}  // namespace genemamba::cli
