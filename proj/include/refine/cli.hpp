#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "refine/config.hpp"

namespace refine {

// args[0] is the program name. Returns the process exit status.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string usage();

struct Corpus {
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> valid;
};

// From data.train / data.valid, or the synthetic corpus when unset.
Corpus load_training_data(const RunConfig& cfg);
// From data.tasks, or data.task_n synthetic tasks of kind data.task.
std::vector<TaskSample> load_task_data(const RunConfig& cfg);

// Cells of a sweep: each "axis=v1,v2" multiplies the grid. Axes k, c,
// strategy and reward are short for phase.k, phase.c, phase.strategy, phase.reward.
struct SweepCell {
  std::string name;
  KeyValues assignments;
};
std::vector<SweepCell> expand_sweep(const std::vector<std::string>& specs);

}  // namespace refine
