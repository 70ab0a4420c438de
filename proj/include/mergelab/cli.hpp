// Command-line entry point and the reporting analytics shared between
// `mergelab report` and the acceptance suite.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mergelab/csv.hpp"

namespace mergelab {

namespace report {

struct ConfigSummary {
  double eta = 0;
  std::int64_t batch = 0;
  double weight_decay = 0;
  bool augment = false;
  double s_tilde = 0;
  double median_gain = 0;
  double mean_gain = 0;
  double stderr_gain = 0;
  std::size_t events = 0;
  std::size_t diverged = 0;
};

// Per-(eta,batch,wd,augment) aggregation of gain_mean over all non-diverged
// merge events (checkpoints x seeds pooled).
std::vector<ConfigSummary> summarize_gains(const CsvTable& merge_reports);

struct NoiseBin {
  double lo = 0, hi = 0;      // noise-coordinate range of the bin
  double median_gain = 0;     // pooled over events in the bin
  double stderr_gain = 0;     // cross-seed standard error of the bin median
  std::size_t events = 0;
  std::size_t seeds = 0;
};

// Log-spaced bins over the non-diverged events' noise coordinates. Seed ids
// are parsed from the `_s<N>` suffix of config_id.
std::vector<NoiseBin> noise_bins(const CsvTable& merge_reports, int bins);

// Collapse score over per-config median gains (see analysis.hpp).
double collapse_score_from_table(const CsvTable& merge_reports, int bins);

struct TransitionRow {
  std::string config_id;
  std::int64_t checkpoint_epoch = 0;
  std::string transition;
  std::string transition_smoothed;
};

std::vector<TransitionRow> transition_table(const CsvTable& merge_reports);

}  // namespace report

namespace cli {

int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

}  // namespace cli

}  // namespace mergelab
