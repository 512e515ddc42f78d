#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sprune::cli {

enum ExitCode : int {
  kOk = 0,
  kFailed = 1,        // a pipeline stage raised, or the record is marked failed
  kUsage = 2,         // bad flags or config
  kNotConverged = 3,  // completed, but the structure search missed the budget
};

/// Runs the command line `args` (without the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Printable views of a saved record.
int inspect(const std::string& record_path, const std::string& csv_dir, std::ostream& out,
            std::ostream& err);

}  // namespace sprune::cli
