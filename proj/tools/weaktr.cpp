#include <cstdio>

int main() {
  std::puts("weaktr: subcommands pending");
  return 0;
}
