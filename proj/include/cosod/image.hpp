#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <opencv2/core.hpp>

namespace cosod {

// Pixel conventions used across the toolkit:
//   color images   CV_64FC3, RGB channel order, values in [0,1]
//   gray maps      CV_64FC1, values in [0,1]
//   binary masks   CV_8UC1,  values in {0,1}

/// Decode an image file to RGB [0,1]. Throws IoError when unreadable.
cv::Mat load_image_rgb(const std::filesystem::path& path);

/// Decode a grayscale mask and binarize at 128/255.
cv::Mat load_mask_binary(const std::filesystem::path& path);

/// Decode a grayscale image to [0,1] without thresholding.
cv::Mat load_gray_unit(const std::filesystem::path& path);

/// Write a [0,1] gray map as 8-bit PNG, pixel value round(255*s). Atomic.
void save_gray_png(const cv::Mat& gray_unit, const std::filesystem::path& path);

/// Write a {0,1} mask as PNG with values {0,255}. Atomic.
void save_mask_png(const cv::Mat& binary, const std::filesystem::path& path);

/// Write an RGB [0,1] image; format chosen from the extension. Atomic.
void save_image_rgb(const cv::Mat& rgb_unit, const std::filesystem::path& path);

/// Bilinear resize with half-pixel center alignment.
/// Accepts CV_64FC1 and CV_64FC3.
cv::Mat resize_bilinear(const cv::Mat& src, int out_rows, int out_cols);

/// Clamp every element of a CV_64F matrix into [0,1] (returns a copy).
cv::Mat clamp_unit(const cv::Mat& m);

/// Throws ValidationError if any element is NaN/Inf.
void require_finite(const cv::Mat& m, const std::string& what);

/// Content hash over shape, type and raw pixel bytes.
uint64_t content_hash(const cv::Mat& m);

/// Write bytes to path via temp-file-then-rename.
void atomic_write_bytes(const std::filesystem::path& path, const void* data, size_t n);
void atomic_write_text(const std::filesystem::path& path, const std::string& text);

} // namespace cosod
