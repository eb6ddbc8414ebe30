#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "promptrisk/eval.hpp"

namespace promptrisk {

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_score = 0.0;  // per-note AUROC, or -BCE when valid is single-class
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_valid_score = 0.0;
  std::string selection_metric = "valid_note_auroc";
};

// Model-selection score on validation notes. Second member is false when the
// labels are single-class and the score fell back to negative mean BCE.
inline std::pair<double, bool> selection_score(std::span<const double> probs, std::span<const int> labels) {
  const bool pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
  const bool neg = std::find(labels.begin(), labels.end(), 0) != labels.end();
  if (pos && neg) return {eval::auroc(probs, labels), true};
  double bce = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], 1e-12, 1.0 - 1e-12);
    bce -= labels[i] ? std::log(p) : std::log(1.0 - p);
  }
  return {-bce / static_cast<double>(std::max<std::size_t>(1, probs.size())), false};
}

}  // namespace promptrisk
