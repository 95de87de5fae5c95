#include "oucopula/cli.hpp"
#include "oucopula/runtime.hpp"

int main(int argc, char** argv) {
  oucopula::tune_allocator();
  return oucopula::cli::run_cli(argc, argv);
}
