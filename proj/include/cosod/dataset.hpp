#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

namespace cosod {

struct ImageEntry {
    std::string name;                 // basename with extension
    std::filesystem::path path;
    cv::Mat image;                    // RGB [0,1], resized to the working resolution
    cv::Mat mask;                     // {0,1} at native resolution; empty when no gt
    cv::Size native_size;             // size before the working-resolution resize
};

/// One group of related images sharing a common salient object.
/// Images are kept in lexicographic filename order.
struct ImageGroup {
    std::string name;
    std::vector<ImageEntry> images;
    bool has_masks = false;

    size_t size() const { return images.size(); }
};

struct GroupDataset {
    std::filesystem::path root;
    std::filesystem::path gt_root;    // empty when no ground truth
    std::vector<ImageGroup> groups;

    size_t image_count() const;
};

/// Load a dataset laid out as root/<group>/<image>.{jpg,jpeg,png} with
/// optional gt_root/<group>/<image>.png masks.
///
/// Groups and images come back in lexicographic order. Images decode to RGB
/// [0,1]; masks binarize at 128/255. working_resolution > 0 resizes images
/// (not masks) to that square size; 0 keeps native resolution.
GroupDataset load_dataset(const std::filesystem::path& root,
                          const std::optional<std::filesystem::path>& gt_root = std::nullopt,
                          int working_resolution = 0);

/// Load a single directory of images as one group.
ImageGroup load_group(const std::filesystem::path& dir, int working_resolution = 0);

/// Combined content hash of a group's images (order-sensitive).
uint64_t group_content_hash(const ImageGroup& group);

} // namespace cosod
