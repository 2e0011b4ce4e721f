#pragma once

namespace rfm {

// Full command-line surface. Exit codes: 0 success, 2 usage/config error,
// 3 data/checkpoint error, 4 experiment failure (divergence).
int run_cli(int argc, char** argv);

}  // namespace rfm
