#pragma once

#include <iosfwd>
#include <string>

namespace acceptance {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct ExperimentOutcomes {
  Outcome ac2, ac3, ac4;
};

// Trains one shared base model, then runs the pretraining comparison, the
// HuFT vs TFT comparison and the null control. Progress goes to `log`.
ExperimentOutcomes run_experiments(std::ostream& log);

}  // namespace acceptance
