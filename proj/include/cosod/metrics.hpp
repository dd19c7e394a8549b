#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <opencv2/core.hpp>

namespace cosod {

struct EvalConfig {
    double lambda = 0.5;   // binarization threshold for IoU/SR
    double beta_sq = 0.3;  // F-measure precision weight
    int n_thresholds = 256;

    nlohmann::json to_json() const;
    static EvalConfig from_json(const nlohmann::json& j);
};

/// Intersection over union of two {0,1} masks; 1 when both are empty.
double iou(const cv::Mat& pred, const cv::Mat& gt);

/// Fraction of detections with IoU strictly above 0.5.
double success_rate(const std::vector<double>& ious);

/// Mean absolute per-pixel difference between a [0,1] map and a {0,1} mask.
double mae(const cv::Mat& pred, const cv::Mat& gt);

/// Per-threshold F-measure curve over n equally spaced thresholds k/n.
/// F = (1+b^2) P R / (b^2 P + R), 0 when the denominator vanishes.
std::vector<double> f_measure_curve(const cv::Mat& pred, const cv::Mat& gt, double beta_sq,
                                    int n_thresholds);
double max_f_measure(const cv::Mat& pred, const cv::Mat& gt, double beta_sq = 0.3,
                     int n_thresholds = 256);

/// Per-threshold enhanced-alignment curve. For each threshold the prediction
/// is binarized, both maps are bias-aligned (value minus mean), the elementwise
/// alignment xi = 2 pq / (p^2 + q^2) is enhanced as ((xi+1)^2)/4 and averaged.
/// Degenerate gt: all-one -> mean(B); all-zero -> mean(1-B).
std::vector<double> e_measure_curve(const cv::Mat& pred, const cv::Mat& gt, int n_thresholds);
double e_measure_max(const cv::Mat& pred, const cv::Mat& gt, int n_thresholds = 256);

/// Structure measure: 0.5 * object-aware + 0.5 * region-aware similarity.
/// Degenerate gt: all-zero -> 1 - mean(pred); all-one -> mean(pred).
/// Result clamped to [0,1].
double s_measure(const cv::Mat& pred, const cv::Mat& gt);

struct PerImageMetrics {
    std::string image_id;
    std::string group;
    double iou = 0.0;
    double mae = 0.0;
    double s_measure = 0.0;
    double max_f = 0.0;
    double max_e = 0.0;
    std::vector<double> f_curve;
    std::vector<double> e_curve;
    bool missing_pred = false;
    bool empty_gt = false;
};

struct MetricAggregate {
    double sr = 0.0;
    double iou = 0.0;
    double mae = 0.0;
    double max_f = 0.0;      // max over thresholds of the image-averaged F curve
    double e_max = 0.0;      // max over thresholds of the image-averaged E curve
    double s_measure = 0.0;
    // Means of per-image maxima, emitted alongside for transparency.
    double per_image_max_f = 0.0;
    double per_image_e_max = 0.0;
};

struct MetricReport {
    std::vector<PerImageMetrics> per_image;
    MetricAggregate aggregate;
    EvalConfig config;
    std::vector<std::string> missing; // gt images without a prediction
    std::vector<std::string> flagged; // images with empty gt

    nlohmann::json summary_json() const;
};

/// Metrics for one (soft prediction, gt mask) pair.
PerImageMetrics evaluate_pair(const cv::Mat& pred_soft, const cv::Mat& gt,
                              const std::string& image_id, const std::string& group,
                              const EvalConfig& cfg);

/// Deterministic fold of per-image rows into the dataset aggregate.
MetricAggregate aggregate_from_rows(const std::vector<PerImageMetrics>& rows,
                                    const EvalConfig& cfg);

/// Evaluate a prediction tree against a ground-truth tree. Ground truth is
/// gt_root/<group>/<image>.png; predictions resolve, in order, to
/// pred_root/<group>/soft/<image>.png, pred_root/<group>/<image>.png,
/// pred_root/<group>/mask/<image>.png. Missing predictions count as all-zero
/// and are listed in the report.
MetricReport evaluate_dataset(const std::filesystem::path& pred_root,
                              const std::filesystem::path& gt_root, const EvalConfig& cfg);

/// Write report.json, per_image.csv and curves.csv under report_dir.
void write_report(const MetricReport& report, const std::filesystem::path& report_dir);

} // namespace cosod
