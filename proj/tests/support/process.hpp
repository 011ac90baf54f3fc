#pragma once

#include <string>
#include <vector>

namespace opensat::testing {

struct ProcessResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

// fork/exec without a shell; stdout and stderr are captured separately.
ProcessResult run_process(const std::vector<std::string>& argv);

}  // namespace opensat::testing
