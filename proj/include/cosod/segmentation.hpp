#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <opencv2/core.hpp>

#include "cosod/backend.hpp"
#include "cosod/concept.hpp"
#include "cosod/dataset.hpp"

namespace cosod {

/// Coarse cross-attention localization map, min-max normalized to [0,1].
struct AttentionMap {
    cv::Mat values; // CV_64FC1
    int source_timestep = 0;
};

enum class HeadKind { attention_passthrough, pretrained_adapter };

std::string to_string(HeadKind kind);
HeadKind head_kind_from_string(const std::string& s);

/// External fine-grained segmentation model consuming (z_t, t, concept, attn).
class FineSegDelegate {
public:
    virtual ~FineSegDelegate() = default;
    virtual cv::Mat fine_segment(const LatentTensor& z_t, int t,
                                 const std::vector<double>& concept_embedding,
                                 const AttentionMap& attn) = 0;
};

/// The fine segmentation head. attention-passthrough has no parameters and is
/// always available; pretrained-adapter wraps an external model.
struct SegmentationHead {
    HeadKind kind = HeadKind::attention_passthrough;
    std::shared_ptr<FineSegDelegate> delegate; // required for pretrained_adapter
};

struct SegmentationConfig {
    int timestep = 400; // inference timestep, inside the informative middle interval
    double lambda = 0.5;
    HeadKind head = HeadKind::attention_passthrough;
    std::string prompt_template = "a photo of S*";
    uint64_t seed = 0;
    bool fail_fast = true;
    /// Override for the attention grid size; nullopt keeps the backend grid.
    std::optional<cv::Size> attention_resolution;

    nlohmann::json to_json() const;
    static SegmentationConfig from_json(const nlohmann::json& j);
};

/// Extract the cross-attention map between the concept token and the spatial
/// latent positions of z_t, min-max normalized to [0,1]. A constant raw map
/// normalizes to all-zeros. The forward noise for z_t is seeded from
/// (cfg.seed, image content), making the map a deterministic function of
/// (image, concept, t).
AttentionMap extract_attention(const DiffusionBackend& backend, const cv::Mat& image,
                               const Concept& concept, int t, const SegmentationConfig& cfg);

/// Produce a soft saliency map at image resolution from the coarse attention
/// map. The passthrough head upsamples the attention bilinearly; the adapter
/// head delegates to the wrapped model and validates its output.
cv::Mat fine_segment(const DiffusionBackend& backend, const cv::Mat& image,
                     const Concept& concept, const AttentionMap& attn,
                     const SegmentationHead& head, int t, const SegmentationConfig& cfg);

/// Pixelwise threshold: s >= lambda -> 1, else 0.
cv::Mat binarize(const cv::Mat& soft, double lambda);

struct SegmentationResult {
    std::string image_name;
    cv::Mat soft;    // CV_64FC1 [0,1]
    cv::Mat binary;  // CV_8UC1 {0,1}
    std::string error; // set in skip-and-report mode when the image failed
};

SegmentationHead make_head(HeadKind kind, std::shared_ptr<FineSegDelegate> delegate = nullptr);

/// Segment every image of the group independently; output order matches
/// input order. cfg.fail_fast controls fail-fast vs skip-and-report.
std::vector<SegmentationResult> segment_group(const DiffusionBackend& backend,
                                              const ImageGroup& group, const Concept& concept,
                                              const SegmentationConfig& cfg);

} // namespace cosod
