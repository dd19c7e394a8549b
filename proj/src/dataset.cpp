#include "cosod/dataset.hpp"

#include <algorithm>

#include "cosod/errors.hpp"
#include "cosod/image.hpp"
#include "cosod/rng.hpp"

namespace cosod {

namespace fs = std::filesystem;

namespace {

bool has_image_extension(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".jpg" || ext == ".jpeg" || ext == ".png";
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool dirs) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (dirs && e.is_directory()) {
            out.push_back(e.path());
        } else if (!dirs && e.is_regular_file() && has_image_extension(e.path())) {
            out.push_back(e.path());
        }
    }
    std::sort(out.begin(), out.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    return out;
}

ImageEntry load_entry(const fs::path& file, int working_resolution) {
    ImageEntry entry;
    entry.name = file.filename().string();
    entry.path = file;
    cv::Mat img = load_image_rgb(file);
    entry.native_size = img.size();
    if (working_resolution > 0 &&
        (img.rows != working_resolution || img.cols != working_resolution)) {
        img = resize_bilinear(img, working_resolution, working_resolution);
    }
    entry.image = img;
    return entry;
}

} // namespace

size_t GroupDataset::image_count() const {
    size_t n = 0;
    for (const auto& g : groups) {
        n += g.images.size();
    }
    return n;
}

ImageGroup load_group(const fs::path& dir, int working_resolution) {
    if (!fs::is_directory(dir)) {
        throw IoError("group directory does not exist: " + dir.string());
    }
    ImageGroup group;
    group.name = dir.filename().string();
    for (const auto& file : sorted_entries(dir, false)) {
        group.images.push_back(load_entry(file, working_resolution));
    }
    if (group.images.empty()) {
        throw ValidationError("empty group: " + dir.string());
    }
    return group;
}

GroupDataset load_dataset(const fs::path& root, const std::optional<fs::path>& gt_root,
                          int working_resolution) {
    if (!fs::is_directory(root)) {
        throw IoError("dataset root does not exist: " + root.string());
    }
    GroupDataset ds;
    ds.root = root;
    if (gt_root) {
        if (!fs::is_directory(*gt_root)) {
            throw IoError("gt root does not exist: " + gt_root->string());
        }
        ds.gt_root = *gt_root;
    }

    const auto group_dirs = sorted_entries(root, true);
    if (group_dirs.empty()) {
        throw ValidationError("dataset has no groups: " + root.string());
    }
    for (const auto& gdir : group_dirs) {
        ImageGroup group = load_group(gdir, working_resolution);
        if (gt_root) {
            group.has_masks = true;
            for (auto& entry : group.images) {
                fs::path mask_path =
                    *gt_root / group.name / (fs::path(entry.name).stem().string() + ".png");
                if (!fs::exists(mask_path)) {
                    throw ValidationError("missing ground-truth mask: " + mask_path.string());
                }
                entry.mask = load_mask_binary(mask_path);
                if (entry.mask.size() != entry.native_size) {
                    throw ValidationError("mask size mismatch for " + mask_path.string());
                }
            }
        }
        ds.groups.push_back(std::move(group));
    }
    return ds;
}

uint64_t group_content_hash(const ImageGroup& group) {
    uint64_t h = fnv1a64(group.name);
    for (const auto& entry : group.images) {
        h = fnv1a64(entry.name, h);
        const uint64_t ih = content_hash(entry.image);
        h = fnv1a64(&ih, sizeof(ih), h);
    }
    return h;
}

} // namespace cosod
