#include <string>
#include <vector>

#include "grafit/runner.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return grafit::cli::run(std::move(args));
}
