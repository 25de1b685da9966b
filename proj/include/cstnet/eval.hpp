// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "cstnet/boxes.hpp"

namespace cstnet {

/// Threshold sweep plus its scalar summary.
struct MetricCurve {
  std::vector<double> thresholds;
  std::vector<double> fractions;
  double summary = 0.0;
};

struct EvalOptions {
  double pr_pixel_threshold = 20.0;  // community default; 5.0 for GTOT-style
  bool sr_strict_greater = false;    // success comparison: IoU >= tau (default) or > tau
};

/// Fraction of frames whose center error is <= tau, tau = 0..50 px step 1.
/// Summary is the value at the configured pixel threshold.
MetricCurve precision_curve(const std::vector<Box>& pred, const std::vector<Box>& gt,
                            double pixel_threshold = 20.0);

/// Center error with components normalized by the ground-truth box size,
/// tau = 0..0.5 step 0.01. Summary is the exact area under the empirical
/// curve over [0, 0.5], normalized by 0.5.
MetricCurve normalized_precision_curve(const std::vector<Box>& pred,
                                       const std::vector<Box>& gt);

/// Fraction of frames with IoU >= tau (or > tau in strict mode),
/// tau = 0..1 step 0.05. Summary is the mean over the 21 thresholds.
MetricCurve success_curve(const std::vector<Box>& pred, const std::vector<Box>& gt,
                          bool strict_greater = false);

struct EvalReport {
  MetricCurve pr;
  MetricCurve npr;
  MetricCurve sr;
};

EvalReport evaluate(const std::vector<Box>& pred, const std::vector<Box>& gt,
                    const EvalOptions& opt = {});

/// Plain-text box files: one frame per line, "x,y,w,h" as decimal reals.
std::vector<Box> read_box_file(const std::string& path);
void write_box_file(const std::string& path, const std::vector<Box>& boxes);

}  // namespace cstnet
