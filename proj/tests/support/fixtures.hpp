#pragma once

// Tiny experiment configuration for pipeline tests: small splits, few steps.

#include <filesystem>
#include <string>

#include "loda/fedsim.hpp"

namespace loda::fixtures {

using json = nlohmann::json;

inline json tiny_config_json() {
  return json::parse(R"({
    "dataset": {"synthetic_count": 300, "sizes": [60, 20, 160, 40]},
    "extractor": {"train": {"epochs": 2, "stop_accuracy": null}},
    "metric": {"train": {"epochs": 2, "stop_accuracy": null}},
    "defense": {"loda": {"T": 10}},
    "attack": {"eval_count": 4, "gla": {"steps": 10}, "mix": {"steps": 20}, "mix_restarts": 2,
               "loda": {"steps": 5}, "loda_c": [0, 1]},
    "train": {"epochs": 2}
  })");
}

inline fedsim::ExperimentConfig tiny_config() {
  fedsim::ExperimentConfig c;
  fedsim::apply_json_config(c, tiny_config_json());
  return c;
}

inline std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("loda-test-" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace loda::fixtures
