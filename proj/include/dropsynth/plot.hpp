#pragma once

// PNG charts drawn with OpenCV: PR curves, FID bars and the mixing ladder.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dropsynth/detection.hpp"
#include "dropsynth/experiment.hpp"
#include "dropsynth/fid.hpp"

namespace dropsynth::plot {

namespace fs = std::filesystem;

struct Series {
  std::string label;
  std::vector<double> x, y;
};

struct Axes {
  std::string title, x_label, y_label;
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
};

void line_chart(const fs::path& out, const Axes& axes, const std::vector<Series>& series);

// One group of bars per category; series[k].y[i] is bar k of category i.
void bar_chart(const fs::path& out, const Axes& axes, const std::vector<std::string>& categories,
               const std::vector<Series>& series);

// Precision against recall at IoU 0.5, one curve per report.
void pr_curves(const fs::path& out, const std::vector<std::pair<std::string, detect::DetectionReport>>& reports);

void fid_bars(const fs::path& out, const std::vector<std::pair<std::string, fid::FidReport>>& reports);

// mAP50 and mAP50-95 per rung for the validation and test splits.
void ladder(const fs::path& out, const experiment::ExperimentReport& report);

}  // namespace dropsynth::plot
