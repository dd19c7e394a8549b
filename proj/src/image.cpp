#include "cosod/image.hpp"

#include <cmath>
#include <fstream>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cosod/errors.hpp"
#include "cosod/rng.hpp"

namespace cosod {

namespace fs = std::filesystem;

cv::Mat load_image_rgb(const fs::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw IoError("cannot read image: " + path.string());
    }
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    cv::Mat out;
    rgb.convertTo(out, CV_64FC3, 1.0 / 255.0);
    return out;
}

cv::Mat load_mask_binary(const fs::path& path) {
    cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (gray.empty()) {
        throw IoError("cannot read mask: " + path.string());
    }
    cv::Mat bin(gray.size(), CV_8UC1);
    for (int y = 0; y < gray.rows; ++y) {
        const uint8_t* src = gray.ptr<uint8_t>(y);
        uint8_t* dst = bin.ptr<uint8_t>(y);
        for (int x = 0; x < gray.cols; ++x) {
            dst[x] = src[x] >= 128 ? 1 : 0;
        }
    }
    return bin;
}

cv::Mat load_gray_unit(const fs::path& path) {
    cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (gray.empty()) {
        throw IoError("cannot read image: " + path.string());
    }
    cv::Mat out;
    gray.convertTo(out, CV_64FC1, 1.0 / 255.0);
    return out;
}

namespace {

void atomic_write_encoded(const cv::Mat& mat8u, const fs::path& path) {
    std::vector<unsigned char> buf;
    std::string ext = path.extension().string();
    if (ext.empty()) {
        ext = ".png";
    }
    if (!cv::imencode(ext, mat8u, buf)) {
        throw IoError("cannot encode image for: " + path.string());
    }
    atomic_write_bytes(path, buf.data(), buf.size());
}

} // namespace

void save_gray_png(const cv::Mat& gray_unit, const fs::path& path) {
    if (gray_unit.type() != CV_64FC1) {
        throw ShapeError("save_gray_png expects CV_64FC1");
    }
    cv::Mat u8(gray_unit.size(), CV_8UC1);
    for (int y = 0; y < gray_unit.rows; ++y) {
        const double* src = gray_unit.ptr<double>(y);
        uint8_t* dst = u8.ptr<uint8_t>(y);
        for (int x = 0; x < gray_unit.cols; ++x) {
            long v = std::lround(255.0 * std::clamp(src[x], 0.0, 1.0));
            dst[x] = static_cast<uint8_t>(v);
        }
    }
    atomic_write_encoded(u8, path);
}

void save_mask_png(const cv::Mat& binary, const fs::path& path) {
    if (binary.type() != CV_8UC1) {
        throw ShapeError("save_mask_png expects CV_8UC1");
    }
    cv::Mat u8;
    binary.convertTo(u8, CV_8UC1, 255.0);
    atomic_write_encoded(u8, path);
}

void save_image_rgb(const cv::Mat& rgb_unit, const fs::path& path) {
    if (rgb_unit.type() != CV_64FC3) {
        throw ShapeError("save_image_rgb expects CV_64FC3");
    }
    cv::Mat u8(rgb_unit.size(), CV_8UC3);
    for (int y = 0; y < rgb_unit.rows; ++y) {
        const cv::Vec3d* src = rgb_unit.ptr<cv::Vec3d>(y);
        cv::Vec3b* dst = u8.ptr<cv::Vec3b>(y);
        for (int x = 0; x < rgb_unit.cols; ++x) {
            for (int c = 0; c < 3; ++c) {
                long v = std::lround(255.0 * std::clamp(src[x][c], 0.0, 1.0));
                // imencode expects BGR
                dst[x][2 - c] = static_cast<uint8_t>(v);
            }
        }
    }
    atomic_write_encoded(u8, path);
}

cv::Mat resize_bilinear(const cv::Mat& src, int out_rows, int out_cols) {
    if (src.empty() || out_rows <= 0 || out_cols <= 0) {
        throw ShapeError("resize_bilinear: empty input or non-positive output size");
    }
    if (src.type() != CV_64FC1 && src.type() != CV_64FC3) {
        throw ShapeError("resize_bilinear expects CV_64FC1 or CV_64FC3");
    }
    const int ch = src.channels();
    cv::Mat dst(out_rows, out_cols, src.type());
    const double sy = static_cast<double>(src.rows) / out_rows;
    const double sx = static_cast<double>(src.cols) / out_cols;
    for (int y = 0; y < out_rows; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(src.rows - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.rows - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_cols; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(src.cols - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.cols - 1);
            const double wx = fx - x0;
            const double* p00 = src.ptr<double>(y0) + x0 * ch;
            const double* p01 = src.ptr<double>(y0) + x1 * ch;
            const double* p10 = src.ptr<double>(y1) + x0 * ch;
            const double* p11 = src.ptr<double>(y1) + x1 * ch;
            double* out = dst.ptr<double>(y) + x * ch;
            for (int c = 0; c < ch; ++c) {
                const double top = p00[c] * (1.0 - wx) + p01[c] * wx;
                const double bot = p10[c] * (1.0 - wx) + p11[c] * wx;
                out[c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    return dst;
}

cv::Mat clamp_unit(const cv::Mat& m) {
    cv::Mat out = m.clone();
    const int ch = out.channels();
    for (int y = 0; y < out.rows; ++y) {
        double* p = out.ptr<double>(y);
        for (int x = 0; x < out.cols * ch; ++x) {
            p[x] = std::clamp(p[x], 0.0, 1.0);
        }
    }
    return out;
}

void require_finite(const cv::Mat& m, const std::string& what) {
    const int ch = m.channels();
    for (int y = 0; y < m.rows; ++y) {
        const double* p = m.ptr<double>(y);
        for (int x = 0; x < m.cols * ch; ++x) {
            if (!std::isfinite(p[x])) {
                throw ValidationError(what + ": non-finite value at row " + std::to_string(y));
            }
        }
    }
}

uint64_t content_hash(const cv::Mat& m) {
    uint64_t h = 14695981039346656037ull;
    const int meta[3] = {m.rows, m.cols, m.type()};
    h = fnv1a64(meta, sizeof(meta), h);
    const size_t row_bytes = m.cols * m.elemSize();
    for (int y = 0; y < m.rows; ++y) {
        h = fnv1a64(m.ptr(y), row_bytes, h);
    }
    return h;
}

void atomic_write_bytes(const fs::path& path, const void* data, size_t n) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open for writing: " + tmp.string());
        }
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
        if (!out) {
            throw IoError("short write: " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

void atomic_write_text(const fs::path& path, const std::string& text) {
    atomic_write_bytes(path, text.data(), text.size());
}

} // namespace cosod
