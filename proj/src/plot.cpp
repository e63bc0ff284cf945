#include "dropsynth/plot.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dropsynth/error.hpp"

namespace dropsynth::plot {

namespace {

constexpr int kWidth = 900, kHeight = 620;
constexpr int kLeft = 80, kRight = 200, kTop = 50, kBottom = 70;

const cv::Scalar kPalette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214},
                               {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};

cv::Scalar color(std::size_t i) { return kPalette[i % std::size(kPalette)]; }

struct Frame {
  cv::Mat img{kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255)};
  Axes axes;

  int px(double x) const {
    const double t = (x - axes.x_min) / std::max(1e-12, axes.x_max - axes.x_min);
    return kLeft + static_cast<int>(std::lround(t * (kWidth - kLeft - kRight)));
  }
  int py(double y) const {
    const double t = (y - axes.y_min) / std::max(1e-12, axes.y_max - axes.y_min);
    return kHeight - kBottom - static_cast<int>(std::lround(t * (kHeight - kTop - kBottom)));
  }
};

void text(cv::Mat& img, const std::string& s, cv::Point at, double scale = 0.45, int thickness = 1) {
  cv::putText(img, s, at, cv::FONT_HERSHEY_SIMPLEX, scale, cv::Scalar(30, 30, 30), thickness, cv::LINE_AA);
}

Frame frame(const Axes& axes, bool x_ticks) {
  Frame f;
  f.axes = axes;
  const cv::Scalar grid(225, 225, 225), ink(60, 60, 60);
  for (int i = 0; i <= 5; ++i) {
    const double y = axes.y_min + (axes.y_max - axes.y_min) * i / 5.0;
    cv::line(f.img, {kLeft, f.py(y)}, {kWidth - kRight, f.py(y)}, grid, 1);
    text(f.img, fmt::format("{:.2f}", y), {kLeft - 55, f.py(y) + 5});
    if (x_ticks) {
      const double x = axes.x_min + (axes.x_max - axes.x_min) * i / 5.0;
      cv::line(f.img, {f.px(x), kTop}, {f.px(x), kHeight - kBottom}, grid, 1);
      text(f.img, fmt::format("{:.2f}", x), {f.px(x) - 16, kHeight - kBottom + 20});
    }
  }
  cv::rectangle(f.img, {kLeft, kTop}, {kWidth - kRight, kHeight - kBottom}, ink, 1);
  text(f.img, axes.title, {kLeft + 110, kTop - 18}, 0.6, 2);
  text(f.img, axes.x_label, {(kLeft + kWidth - kRight) / 2 - 30, kHeight - 20}, 0.5);
  text(f.img, axes.y_label, {8, kTop - 18}, 0.5);
  return f;
}

void legend(Frame& f, const std::vector<Series>& series) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    const int y = kTop + 20 + 24 * static_cast<int>(i);
    cv::rectangle(f.img, {kWidth - kRight + 15, y - 10}, {kWidth - kRight + 35, y + 2}, color(i), cv::FILLED);
    text(f.img, series[i].label, {kWidth - kRight + 42, y});
  }
}

void save(const fs::path& out, const cv::Mat& img) {
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  if (!cv::imwrite(out.string(), img)) throw IoError(fmt::format("cannot write {}", out.string()));
}

}  // namespace

void line_chart(const fs::path& out, const Axes& axes, const std::vector<Series>& series) {
  Frame f = frame(axes, true);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const Series& s = series[i];
    if (s.x.size() != s.y.size()) throw InvalidArgument(fmt::format("series '{}' has mismatched x and y", s.label));
    std::vector<cv::Point> pts;
    for (std::size_t k = 0; k < s.x.size(); ++k) pts.emplace_back(f.px(s.x[k]), f.py(s.y[k]));
    if (pts.size() == 1) cv::circle(f.img, pts[0], 3, color(i), cv::FILLED);
    if (pts.size() > 1) cv::polylines(f.img, pts, false, color(i), 2, cv::LINE_AA);
  }
  legend(f, series);
  save(out, f.img);
}

void bar_chart(const fs::path& out, const Axes& axes, const std::vector<std::string>& categories,
               const std::vector<Series>& series) {
  Frame f = frame(axes, false);
  const int n = static_cast<int>(categories.size());
  if (n == 0 || series.empty()) throw InvalidArgument("bar chart needs categories and series");
  const int span = (kWidth - kLeft - kRight) / n;
  const int bar = std::max(2, (span - 16) / static_cast<int>(series.size()));
  for (int c = 0; c < n; ++c) {
    const int x0 = kLeft + c * span + 8;
    for (std::size_t k = 0; k < series.size(); ++k) {
      if (series[k].y.size() != categories.size()) {
        throw InvalidArgument(fmt::format("series '{}' needs one value per category", series[k].label));
      }
      const double v = std::clamp(series[k].y[static_cast<std::size_t>(c)], axes.y_min, axes.y_max);
      const int bx = x0 + static_cast<int>(k) * bar;
      cv::rectangle(f.img, {bx, f.py(v)}, {bx + bar - 2, f.py(axes.y_min)}, color(k), cv::FILLED);
    }
    text(f.img, categories[static_cast<std::size_t>(c)], {x0, kHeight - kBottom + 20});
  }
  legend(f, series);
  save(out, f.img);
}

void pr_curves(const fs::path& out, const std::vector<std::pair<std::string, detect::DetectionReport>>& reports) {
  std::vector<Series> series;
  for (const auto& [label, r] : reports) {
    // Envelope makes the curve readable; anchor it at recall 0.
    std::vector<double> p = r.curve.precision;
    for (std::size_t k = p.size(); k-- > 1;) p[k - 1] = std::max(p[k - 1], p[k]);
    Series s{fmt::format("{} ({:.3f})", label, r.map50), {0.0}, {p.empty() ? 1.0 : p.front()}};
    s.x.insert(s.x.end(), r.curve.recall.begin(), r.curve.recall.end());
    s.y.insert(s.y.end(), p.begin(), p.end());
    series.push_back(std::move(s));
  }
  line_chart(out, {"Precision-recall (IoU 0.5)", "recall", "precision", 0, 1, 0, 1}, series);
}

void fid_bars(const fs::path& out, const std::vector<std::pair<std::string, fid::FidReport>>& reports) {
  std::vector<std::string> cats;
  Series s{"FID", {}, {}};
  double top = 0;
  for (const auto& [label, r] : reports) {
    cats.push_back(label);
    s.y.push_back(r.fid);
    top = std::max(top, r.fid);
  }
  bar_chart(out, {"FID", "", "FID", 0, 1, 0, top > 0 ? top * 1.1 : 1}, cats, {s});
}

void ladder(const fs::path& out, const experiment::ExperimentReport& report) {
  std::vector<std::string> cats;
  std::vector<Series> series{{"val mAP50", {}, {}}, {"val mAP50-95", {}, {}}, {"test mAP50", {}, {}},
                             {"test mAP50-95", {}, {}}};
  for (const auto& r : report.rungs) {
    cats.push_back(std::to_string(r.train_size));
    const experiment::RungMetrics none;
    const auto& v = r.val ? *r.val : none;
    const auto& t = r.test ? *r.test : none;
    series[0].y.push_back(v.map50);
    series[1].y.push_back(v.map50_95);
    series[2].y.push_back(t.map50);
    series[3].y.push_back(t.map50_95);
  }
  bar_chart(out, {"Detection by training-set size", "training images", "mAP", 0, 1, 0, 1}, cats, series);
}

}  // namespace dropsynth::plot
