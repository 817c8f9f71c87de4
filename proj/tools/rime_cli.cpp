#include "rime/cli.hpp"
#include "rime/numcore/allocator.hpp"

int main(int argc, char** argv) {
  rime::tune_allocator();
  return rime::run_cli(argc, argv);
}
