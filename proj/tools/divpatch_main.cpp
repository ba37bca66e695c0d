#include <iostream>

int main() {
  std::cout << "divpatch: subcommands pending\n";
  return 1;
}
