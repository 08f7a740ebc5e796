// Writes the synthetic pseudo-English training corpus.
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "qlab/corpus.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a deterministic toy text corpus"};
  std::string path;
  std::size_t bytes = 200000;
  std::uint64_t seed = 0;
  app.add_option("path", path, "Output file")->required();
  app.add_option("--bytes", bytes, "Corpus size in bytes")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "Generator seed");
  CLI11_PARSE(app, argc, argv);

  const std::string text = qlab::synthesize_corpus(bytes, seed);
  std::ofstream out(path, std::ios::binary);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) {
    std::cerr << "cannot write " << path << "\n";
    return 2;
  }
  std::cout << "wrote " << text.size() << " bytes to " << path << "\n";
  return 0;
}
