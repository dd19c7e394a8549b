#include "cosod/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cosod/errors.hpp"
#include "cosod/image.hpp"

namespace cosod {

using nlohmann::json;

namespace fs = std::filesystem;

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

void require_soft(const cv::Mat& m, const char* what) {
    if (m.empty() || m.type() != CV_64FC1) {
        throw ShapeError(std::string(what) + ": expected a CV_64FC1 map");
    }
}

void require_binary(const cv::Mat& m, const char* what) {
    if (m.empty() || m.type() != CV_8UC1) {
        throw ShapeError(std::string(what) + ": expected a CV_8UC1 mask");
    }
}

void require_same_size(const cv::Mat& a, const cv::Mat& b, const char* what) {
    if (a.size() != b.size()) {
        std::ostringstream msg;
        msg << what << ": size mismatch " << a.rows << "x" << a.cols << " vs " << b.rows << "x"
            << b.cols;
        throw ShapeError(msg.str());
    }
}

} // namespace

json EvalConfig::to_json() const {
    return json{{"lambda", lambda}, {"beta_sq", beta_sq}, {"n_thresholds", n_thresholds}};
}

EvalConfig EvalConfig::from_json(const json& j) {
    EvalConfig c;
    if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
    if (j.contains("beta_sq")) c.beta_sq = j.at("beta_sq").get<double>();
    if (j.contains("n_thresholds")) c.n_thresholds = j.at("n_thresholds").get<int>();
    return c;
}

// ---------------------------------------------------------------------------
// Pairwise measures
// ---------------------------------------------------------------------------

double iou(const cv::Mat& pred, const cv::Mat& gt) {
    require_binary(pred, "iou");
    require_binary(gt, "iou");
    require_same_size(pred, gt, "iou");
    long inter = 0;
    long uni = 0;
    for (int y = 0; y < pred.rows; ++y) {
        const uint8_t* p = pred.ptr<uint8_t>(y);
        const uint8_t* g = gt.ptr<uint8_t>(y);
        for (int x = 0; x < pred.cols; ++x) {
            const bool a = p[x] != 0;
            const bool b = g[x] != 0;
            inter += (a && b) ? 1 : 0;
            uni += (a || b) ? 1 : 0;
        }
    }
    if (uni == 0) {
        return 1.0; // both maps empty
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double success_rate(const std::vector<double>& ious) {
    if (ious.empty()) {
        throw ValidationError("success_rate: empty IoU list");
    }
    long ok = 0;
    for (double v : ious) {
        if (v > 0.5) ++ok; // strictly above
    }
    return static_cast<double>(ok) / static_cast<double>(ious.size());
}

double mae(const cv::Mat& pred, const cv::Mat& gt) {
    require_soft(pred, "mae");
    require_binary(gt, "mae");
    require_same_size(pred, gt, "mae");
    double acc = 0.0;
    for (int y = 0; y < pred.rows; ++y) {
        const double* p = pred.ptr<double>(y);
        const uint8_t* g = gt.ptr<uint8_t>(y);
        for (int x = 0; x < pred.cols; ++x) {
            acc += std::abs(p[x] - (g[x] != 0 ? 1.0 : 0.0));
        }
    }
    return acc / (static_cast<double>(pred.rows) * pred.cols);
}

std::vector<double> f_measure_curve(const cv::Mat& pred, const cv::Mat& gt, double beta_sq,
                                    int n_thresholds) {
    require_soft(pred, "f_measure");
    require_binary(gt, "f_measure");
    require_same_size(pred, gt, "f_measure");
    if (n_thresholds <= 0) {
        throw ValidationError("f_measure: n_thresholds must be positive");
    }
    long gt_pos = 0;
    for (int y = 0; y < gt.rows; ++y) {
        const uint8_t* g = gt.ptr<uint8_t>(y);
        for (int x = 0; x < gt.cols; ++x) {
            gt_pos += g[x] != 0 ? 1 : 0;
        }
    }
    std::vector<double> curve(static_cast<size_t>(n_thresholds), 0.0);
    for (int k = 0; k < n_thresholds; ++k) {
        const double theta = static_cast<double>(k) / n_thresholds;
        long tp = 0;
        long pp = 0;
        for (int y = 0; y < pred.rows; ++y) {
            const double* p = pred.ptr<double>(y);
            const uint8_t* g = gt.ptr<uint8_t>(y);
            for (int x = 0; x < pred.cols; ++x) {
                if (p[x] >= theta) {
                    ++pp;
                    if (g[x] != 0) ++tp;
                }
            }
        }
        const double precision = pp > 0 ? static_cast<double>(tp) / pp : 0.0;
        const double recall = gt_pos > 0 ? static_cast<double>(tp) / gt_pos : 0.0;
        const double denom = beta_sq * precision + recall;
        curve[static_cast<size_t>(k)] =
            denom > 0.0 ? (1.0 + beta_sq) * precision * recall / denom : 0.0;
    }
    return curve;
}

double max_f_measure(const cv::Mat& pred, const cv::Mat& gt, double beta_sq, int n_thresholds) {
    const auto curve = f_measure_curve(pred, gt, beta_sq, n_thresholds);
    return *std::max_element(curve.begin(), curve.end());
}

std::vector<double> e_measure_curve(const cv::Mat& pred, const cv::Mat& gt, int n_thresholds) {
    require_soft(pred, "e_measure");
    require_binary(gt, "e_measure");
    require_same_size(pred, gt, "e_measure");
    if (n_thresholds <= 0) {
        throw ValidationError("e_measure: n_thresholds must be positive");
    }
    const double n_px = static_cast<double>(gt.rows) * gt.cols;
    long gt_pos = 0;
    for (int y = 0; y < gt.rows; ++y) {
        const uint8_t* g = gt.ptr<uint8_t>(y);
        for (int x = 0; x < gt.cols; ++x) {
            gt_pos += g[x] != 0 ? 1 : 0;
        }
    }
    const bool gt_all_one = gt_pos == static_cast<long>(n_px);
    const bool gt_all_zero = gt_pos == 0;
    const double gt_mean = static_cast<double>(gt_pos) / n_px;

    std::vector<double> curve(static_cast<size_t>(n_thresholds), 0.0);
    for (int k = 0; k < n_thresholds; ++k) {
        const double theta = static_cast<double>(k) / n_thresholds;
        long pred_pos = 0;
        for (int y = 0; y < pred.rows; ++y) {
            const double* p = pred.ptr<double>(y);
            for (int x = 0; x < pred.cols; ++x) {
                pred_pos += p[x] >= theta ? 1 : 0;
            }
        }
        const double pred_mean = static_cast<double>(pred_pos) / n_px;

        double value = 0.0;
        if (gt_all_one) {
            value = pred_mean;
        } else if (gt_all_zero) {
            value = 1.0 - pred_mean;
        } else {
            double acc = 0.0;
            for (int y = 0; y < pred.rows; ++y) {
                const double* p = pred.ptr<double>(y);
                const uint8_t* g = gt.ptr<uint8_t>(y);
                for (int x = 0; x < pred.cols; ++x) {
                    const double pb = (p[x] >= theta ? 1.0 : 0.0) - pred_mean;
                    const double gb = (g[x] != 0 ? 1.0 : 0.0) - gt_mean;
                    const double denom = pb * pb + gb * gb;
                    const double xi = denom > 0.0 ? 2.0 * pb * gb / denom : 0.0;
                    acc += (xi + 1.0) * (xi + 1.0) / 4.0;
                }
            }
            value = acc / n_px;
        }
        curve[static_cast<size_t>(k)] = value;
    }
    return curve;
}

double e_measure_max(const cv::Mat& pred, const cv::Mat& gt, int n_thresholds) {
    const auto curve = e_measure_curve(pred, gt, n_thresholds);
    return *std::max_element(curve.begin(), curve.end());
}

// ---------------------------------------------------------------------------
// Structure measure
// ---------------------------------------------------------------------------

namespace {

// Mean contrast similarity of pred against a constant-1 region:
// 2x / (x^2 + 1 + sigma_x), computed over pixels selected by `select`.
double object_score(const cv::Mat& pred, const cv::Mat& gt, bool foreground) {
    double sum = 0.0;
    long n = 0;
    for (int y = 0; y < pred.rows; ++y) {
        const double* p = pred.ptr<double>(y);
        const uint8_t* g = gt.ptr<uint8_t>(y);
        for (int x = 0; x < pred.cols; ++x) {
            if ((g[x] != 0) == foreground) {
                sum += foreground ? p[x] : 1.0 - p[x];
                ++n;
            }
        }
    }
    if (n == 0) {
        return 0.0;
    }
    const double mean = sum / n;
    double var = 0.0;
    if (n > 1) {
        for (int y = 0; y < pred.rows; ++y) {
            const double* p = pred.ptr<double>(y);
            const uint8_t* g = gt.ptr<uint8_t>(y);
            for (int x = 0; x < pred.cols; ++x) {
                if ((g[x] != 0) == foreground) {
                    const double v = (foreground ? p[x] : 1.0 - p[x]) - mean;
                    var += v * v;
                }
            }
        }
        var /= static_cast<double>(n - 1);
    }
    const double sigma = std::sqrt(var);
    return 2.0 * mean / (mean * mean + 1.0 + sigma + kEps);
}

double s_object(const cv::Mat& pred, const cv::Mat& gt, double gt_mean) {
    const double fg = object_score(pred, gt, true);
    const double bg = object_score(pred, gt, false);
    return gt_mean * fg + (1.0 - gt_mean) * bg;
}

// SSIM-style similarity on one rectangular region (sample variances, N-1).
double region_ssim(const cv::Mat& pred, const cv::Mat& gt, int y0, int y1, int x0, int x1) {
    const long n = static_cast<long>(y1 - y0) * (x1 - x0);
    if (n <= 0) {
        return 0.0; // zero-weight region
    }
    double sx = 0.0, sy = 0.0;
    for (int y = y0; y < y1; ++y) {
        const double* p = pred.ptr<double>(y);
        const uint8_t* g = gt.ptr<uint8_t>(y);
        for (int x = x0; x < x1; ++x) {
            sx += p[x];
            sy += g[x] != 0 ? 1.0 : 0.0;
        }
    }
    const double mx = sx / n;
    const double my = sy / n;
    double vx = 0.0, vy = 0.0, vxy = 0.0;
    for (int y = y0; y < y1; ++y) {
        const double* p = pred.ptr<double>(y);
        const uint8_t* g = gt.ptr<uint8_t>(y);
        for (int x = x0; x < x1; ++x) {
            const double dx = p[x] - mx;
            const double dy = (g[x] != 0 ? 1.0 : 0.0) - my;
            vx += dx * dx;
            vy += dy * dy;
            vxy += dx * dy;
        }
    }
    const double norm = static_cast<double>(n - 1) + kEps;
    vx /= norm;
    vy /= norm;
    vxy /= norm;
    const double alpha = 4.0 * mx * my * vxy;
    const double beta = (mx * mx + my * my) * (vx + vy);
    if (alpha != 0.0) {
        return alpha / (beta + kEps);
    }
    return beta == 0.0 ? 1.0 : 0.0;
}

double s_region(const cv::Mat& pred, const cv::Mat& gt, long gt_pos) {
    const int rows = gt.rows;
    const int cols = gt.cols;
    // Centroid of the gt foreground, 1-based with round-half-away (the
    // convention of the measure's reference implementation).
    long cx = 0, cy = 0;
    if (gt_pos == 0) {
        cx = std::llround(cols / 2.0);
        cy = std::llround(rows / 2.0);
    } else {
        double wx = 0.0, wy = 0.0;
        for (int y = 0; y < rows; ++y) {
            const uint8_t* g = gt.ptr<uint8_t>(y);
            for (int x = 0; x < cols; ++x) {
                if (g[x] != 0) {
                    wx += x + 1.0;
                    wy += y + 1.0;
                }
            }
        }
        cx = std::llround(wx / gt_pos);
        cy = std::llround(wy / gt_pos);
    }
    cx = std::clamp(cx, long{1}, static_cast<long>(cols));
    cy = std::clamp(cy, long{1}, static_cast<long>(rows));
    const int X = static_cast<int>(cx);
    const int Y = static_cast<int>(cy);

    const double area = static_cast<double>(rows) * cols;
    const double w1 = static_cast<double>(X) * Y / area;
    const double w2 = static_cast<double>(cols - X) * Y / area;
    const double w3 = static_cast<double>(X) * (rows - Y) / area;
    const double w4 = 1.0 - w1 - w2 - w3;

    double q = 0.0;
    if (w1 > 0.0) q += w1 * region_ssim(pred, gt, 0, Y, 0, X);
    if (w2 > 0.0) q += w2 * region_ssim(pred, gt, 0, Y, X, cols);
    if (w3 > 0.0) q += w3 * region_ssim(pred, gt, Y, rows, 0, X);
    if (w4 > 0.0) q += w4 * region_ssim(pred, gt, Y, rows, X, cols);
    return q;
}

} // namespace

double s_measure(const cv::Mat& pred, const cv::Mat& gt) {
    require_soft(pred, "s_measure");
    require_binary(gt, "s_measure");
    require_same_size(pred, gt, "s_measure");

    long gt_pos = 0;
    double pred_sum = 0.0;
    for (int y = 0; y < gt.rows; ++y) {
        const uint8_t* g = gt.ptr<uint8_t>(y);
        const double* p = pred.ptr<double>(y);
        for (int x = 0; x < gt.cols; ++x) {
            gt_pos += g[x] != 0 ? 1 : 0;
            pred_sum += p[x];
        }
    }
    const double n_px = static_cast<double>(gt.rows) * gt.cols;
    const double pred_mean = pred_sum / n_px;

    double q = 0.0;
    if (gt_pos == 0) {
        q = 1.0 - pred_mean;
    } else if (gt_pos == static_cast<long>(n_px)) {
        q = pred_mean;
    } else {
        const double gt_mean = static_cast<double>(gt_pos) / n_px;
        q = 0.5 * s_object(pred, gt, gt_mean) + 0.5 * s_region(pred, gt, gt_pos);
    }
    return std::clamp(q, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Dataset evaluation
// ---------------------------------------------------------------------------

PerImageMetrics evaluate_pair(const cv::Mat& pred_soft, const cv::Mat& gt,
                              const std::string& image_id, const std::string& group,
                              const EvalConfig& cfg) {
    PerImageMetrics row;
    row.image_id = image_id;
    row.group = group;

    cv::Mat pred_bin(pred_soft.size(), CV_8UC1);
    for (int y = 0; y < pred_soft.rows; ++y) {
        const double* p = pred_soft.ptr<double>(y);
        uint8_t* b = pred_bin.ptr<uint8_t>(y);
        for (int x = 0; x < pred_soft.cols; ++x) {
            b[x] = p[x] >= cfg.lambda ? 1 : 0;
        }
    }

    row.iou = iou(pred_bin, gt);
    row.mae = mae(pred_soft, gt);
    row.s_measure = s_measure(pred_soft, gt);
    row.f_curve = f_measure_curve(pred_soft, gt, cfg.beta_sq, cfg.n_thresholds);
    row.e_curve = e_measure_curve(pred_soft, gt, cfg.n_thresholds);
    row.empty_gt = cv::countNonZero(gt) == 0;
    row.max_f = row.empty_gt ? 0.0 : *std::max_element(row.f_curve.begin(), row.f_curve.end());
    row.max_e = *std::max_element(row.e_curve.begin(), row.e_curve.end());
    return row;
}

MetricAggregate aggregate_from_rows(const std::vector<PerImageMetrics>& rows,
                                    const EvalConfig& cfg) {
    if (rows.empty()) {
        throw ValidationError("aggregate: no per-image rows");
    }
    MetricAggregate agg;
    std::vector<double> ious;
    ious.reserve(rows.size());
    std::vector<double> f_mean(static_cast<size_t>(cfg.n_thresholds), 0.0);
    std::vector<double> e_mean(static_cast<size_t>(cfg.n_thresholds), 0.0);
    for (const auto& row : rows) {
        ious.push_back(row.iou);
        agg.iou += row.iou;
        agg.mae += row.mae;
        agg.s_measure += row.s_measure;
        agg.per_image_max_f += row.max_f;
        agg.per_image_e_max += row.max_e;
        if (row.f_curve.size() != f_mean.size() || row.e_curve.size() != e_mean.size()) {
            throw ValidationError("aggregate: inconsistent curve lengths across rows");
        }
        for (size_t k = 0; k < f_mean.size(); ++k) {
            f_mean[k] += row.f_curve[k];
            e_mean[k] += row.e_curve[k];
        }
    }
    const double n = static_cast<double>(rows.size());
    agg.iou /= n;
    agg.mae /= n;
    agg.s_measure /= n;
    agg.per_image_max_f /= n;
    agg.per_image_e_max /= n;
    for (size_t k = 0; k < f_mean.size(); ++k) {
        f_mean[k] /= n;
        e_mean[k] /= n;
    }
    agg.sr = success_rate(ious);
    agg.max_f = *std::max_element(f_mean.begin(), f_mean.end());
    agg.e_max = *std::max_element(e_mean.begin(), e_mean.end());
    return agg;
}

MetricReport evaluate_dataset(const fs::path& pred_root, const fs::path& gt_root,
                              const EvalConfig& cfg) {
    if (!fs::is_directory(gt_root)) {
        throw IoError("gt root does not exist: " + gt_root.string());
    }
    std::vector<fs::path> groups;
    for (const auto& e : fs::directory_iterator(gt_root)) {
        if (e.is_directory()) groups.push_back(e.path());
    }
    std::sort(groups.begin(), groups.end());
    if (groups.empty()) {
        throw ValidationError("gt root has no groups: " + gt_root.string());
    }

    MetricReport report;
    report.config = cfg;
    for (const auto& gdir : groups) {
        const std::string group = gdir.filename().string();
        std::vector<fs::path> masks;
        for (const auto& e : fs::directory_iterator(gdir)) {
            if (e.is_regular_file() && e.path().extension() == ".png") {
                masks.push_back(e.path());
            }
        }
        std::sort(masks.begin(), masks.end());
        for (const auto& mask_path : masks) {
            const std::string stem = mask_path.stem().string();
            const std::string image_id = group + "/" + stem;
            const cv::Mat gt = load_mask_binary(mask_path);

            cv::Mat pred;
            const fs::path candidates[] = {
                pred_root / group / "soft" / (stem + ".png"),
                pred_root / group / (stem + ".png"),
                pred_root / group / "mask" / (stem + ".png"),
            };
            bool found = false;
            for (const auto& cand : candidates) {
                if (fs::exists(cand)) {
                    pred = load_gray_unit(cand);
                    found = true;
                    break;
                }
            }
            if (!found) {
                pred = cv::Mat::zeros(gt.size(), CV_64FC1);
                report.missing.push_back(image_id);
            } else if (pred.size() != gt.size()) {
                pred = resize_bilinear(pred, gt.rows, gt.cols);
            }

            PerImageMetrics row = evaluate_pair(pred, gt, image_id, group, cfg);
            row.missing_pred = !found;
            if (row.empty_gt) {
                report.flagged.push_back(image_id);
            }
            report.per_image.push_back(std::move(row));
        }
    }
    report.aggregate = aggregate_from_rows(report.per_image, cfg);
    return report;
}

json MetricReport::summary_json() const {
    return json{{"format_version", 1},
                {"config", config.to_json()},
                {"aggregate",
                 {{"sr", aggregate.sr},
                  {"iou", aggregate.iou},
                  {"mae", aggregate.mae},
                  {"max_f", aggregate.max_f},
                  {"e_max", aggregate.e_max},
                  {"s_measure", aggregate.s_measure}}},
                {"per_image_max", {{"max_f", aggregate.per_image_max_f},
                                   {"e_max", aggregate.per_image_e_max}}},
                {"n_images", per_image.size()},
                {"missing", missing},
                {"flagged_empty_gt", flagged}};
}

void write_report(const MetricReport& report, const fs::path& report_dir) {
    fs::create_directories(report_dir);
    atomic_write_text(report_dir / "report.json", report.summary_json().dump(2) + "\n");

    std::ostringstream rows;
    rows << "image_id,group,iou,mae,s_measure\n";
    rows.precision(9);
    for (const auto& row : report.per_image) {
        rows << row.image_id << "," << row.group << "," << row.iou << "," << row.mae << ","
             << row.s_measure << "\n";
    }
    atomic_write_text(report_dir / "per_image.csv", rows.str());

    std::ostringstream curves;
    curves << "image_id";
    const size_t n = report.per_image.empty() ? 0 : report.per_image.front().f_curve.size();
    for (size_t k = 0; k < n; ++k) curves << ",f@" << k;
    for (size_t k = 0; k < n; ++k) curves << ",e@" << k;
    curves << "\n";
    curves.precision(9);
    for (const auto& row : report.per_image) {
        curves << row.image_id;
        for (double v : row.f_curve) curves << "," << v;
        for (double v : row.e_curve) curves << "," << v;
        curves << "\n";
    }
    atomic_write_text(report_dir / "curves.csv", curves.str());
}

} // namespace cosod
