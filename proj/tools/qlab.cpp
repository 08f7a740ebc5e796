#include "qlab/cli.hpp"
#include "qlab/kernels.hpp"

int main(int argc, char** argv) {
  qlab::kernels::retain_freed_memory();
  return qlab::cli_main(argc, argv);
}
