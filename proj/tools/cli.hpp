#pragma once

#include <iosfwd>

namespace rlar::cli {

// Exit status: 0 success, 1 validation or parse error, 2 numerical failure.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rlar::cli
