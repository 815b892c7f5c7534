#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace t2tbio {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDataError = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitBelowFloor = 3;

// args excludes the program name. Reports go to `out`, logs and errors to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct CommandDoc {
    std::string name;
    std::string help;                                        // rendered --help text
    std::vector<std::pair<std::string, std::string>> flags;  // long name, description
};
std::vector<CommandDoc> command_docs();

}  // namespace t2tbio
