// Placeholder entry point; subcommands land as the library modules do.
#include <cstdio>

int main() {
  std::puts("editproc: not wired up yet");
  return 1;
}
