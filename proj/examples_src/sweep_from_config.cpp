// Runs a full Monte-Carlo sweep described by a JSON config and prints the
// mean curves together with the selected parameters.
#include <cstdio>
#include <klrisk/klrisk.hpp>

using namespace klrisk;

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s config.json\n", argv[0]);
    return 2;
  }
  try {
    auto cfg = ExperimentConfig::from_json(json::parse(read_text(argv[1])));
    SweepResult r = run_sweep(cfg);
    std::printf("%12s", "param");
    for (const auto& c : r.curves) std::printf(" %14s", c.name.c_str());
    std::printf(" %10s\n", "MNAE");
    for (std::size_t k = 0; k < r.grid.size(); ++k) {
      std::printf("%12.5g", r.grid[k]);
      for (const auto& c : r.curves) std::printf(" %14.4f", c.mean[k]);
      std::printf(" %10.4f\n", r.mnae_mean[k]);
    }
    for (const auto& c : r.curves)
      std::printf("argmin %-10s %12.5g  (MNAE %.4f)\n", c.name.c_str(), r.grid[c.argmin()], r.mnae_mean[c.argmin()]);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
