// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "cstnet/eval.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "cstnet/error.hpp"

namespace cstnet {

namespace {

void require_aligned(const std::vector<Box>& pred, const std::vector<Box>& gt) {
  if (pred.size() != gt.size())
    throw ContractError("evaluation: " + std::to_string(pred.size()) + " predictions vs " +
                        std::to_string(gt.size()) + " ground-truth boxes");
  if (gt.empty()) throw ContractError("evaluation: empty sequence");
}

void check_monotone(const MetricCurve& c, bool nondecreasing, const char* what) {
  for (std::size_t i = 1; i < c.fractions.size(); ++i) {
    const bool ok = nondecreasing ? c.fractions[i] >= c.fractions[i - 1]
                                  : c.fractions[i] <= c.fractions[i - 1];
    if (!ok) throw Error(std::string(what) + ": curve is not monotone");
  }
}

}  // namespace

MetricCurve precision_curve(const std::vector<Box>& pred, const std::vector<Box>& gt,
                            double pixel_threshold) {
  require_aligned(pred, gt);
  std::vector<double> err(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) err[i] = center_distance(pred[i], gt[i]);

  MetricCurve c;
  for (int tau = 0; tau <= 50; ++tau) {
    std::size_t hit = 0;
    for (double e : err)
      if (e <= double(tau)) ++hit;
    c.thresholds.push_back(double(tau));
    c.fractions.push_back(double(hit) / double(err.size()));
  }
  std::size_t hit = 0;
  for (double e : err)
    if (e <= pixel_threshold) ++hit;
  c.summary = double(hit) / double(err.size());
  check_monotone(c, true, "precision_curve");
  return c;
}

MetricCurve normalized_precision_curve(const std::vector<Box>& pred,
                                       const std::vector<Box>& gt) {
  require_aligned(pred, gt);
  std::vector<double> err(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i].w <= 0.0 || gt[i].h <= 0.0)
      throw ContractError("normalized_precision_curve: degenerate ground-truth box at frame " +
                          std::to_string(i));
    const double dx = (pred[i].cx() - gt[i].cx()) / gt[i].w;
    const double dy = (pred[i].cy() - gt[i].cy()) / gt[i].h;
    err[i] = std::sqrt(dx * dx + dy * dy);
  }

  MetricCurve c;
  for (int k = 0; k <= 50; ++k) {
    const double tau = double(k) / 100.0;
    std::size_t hit = 0;
    for (double e : err)
      if (e <= tau) ++hit;
    c.thresholds.push_back(tau);
    c.fractions.push_back(double(hit) / double(err.size()));
  }
  // Exact area under the empirical step curve over [0, 0.5], normalized:
  // each frame contributes max(0, 0.5 - err) / 0.5.
  double auc = 0.0;
  for (double e : err) auc += std::max(0.0, 0.5 - e) / 0.5;
  c.summary = auc / double(err.size());
  check_monotone(c, true, "normalized_precision_curve");
  return c;
}

MetricCurve success_curve(const std::vector<Box>& pred, const std::vector<Box>& gt,
                          bool strict_greater) {
  require_aligned(pred, gt);
  std::vector<double> ov(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) ov[i] = iou(pred[i], gt[i]);

  MetricCurve c;
  double acc = 0.0;
  for (int k = 0; k <= 20; ++k) {
    const double tau = double(k) / 20.0;
    std::size_t hit = 0;
    for (double o : ov)
      if (strict_greater ? o > tau : o >= tau) ++hit;
    c.thresholds.push_back(tau);
    c.fractions.push_back(double(hit) / double(ov.size()));
    acc += c.fractions.back();
  }
  c.summary = acc / double(c.fractions.size());
  check_monotone(c, false, "success_curve");
  return c;
}

EvalReport evaluate(const std::vector<Box>& pred, const std::vector<Box>& gt,
                    const EvalOptions& opt) {
  EvalReport r;
  r.pr = precision_curve(pred, gt, opt.pr_pixel_threshold);
  r.npr = normalized_precision_curve(pred, gt);
  r.sr = success_curve(pred, gt, opt.sr_strict_greater);
  return r;
}

std::vector<Box> read_box_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open box file '" + path + "'");
  std::vector<Box> boxes;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    Box b;
    char c1, c2, c3;
    if (!(ls >> b.x >> c1 >> b.y >> c2 >> b.w >> c3 >> b.h) || c1 != ',' || c2 != ',' ||
        c3 != ',')
      throw IoError("box file '" + path + "': malformed line " + std::to_string(lineno) +
                    ": '" + line + "'");
    boxes.push_back(b);
  }
  if (boxes.empty()) throw IoError("box file '" + path + "' contains no boxes");
  return boxes;
}

void write_box_file(const std::string& path, const std::vector<Box>& boxes) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open box file '" + path + "' for writing");
  os.precision(10);
  for (const Box& b : boxes) os << b.x << ',' << b.y << ',' << b.w << ',' << b.h << '\n';
  if (!os) throw IoError("write failed for box file '" + path + "'");
}

}  // namespace cstnet
