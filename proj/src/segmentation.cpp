#include "cosod/segmentation.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "cosod/errors.hpp"
#include "cosod/image.hpp"
#include "cosod/rng.hpp"

namespace cosod {

using nlohmann::json;

std::string to_string(HeadKind kind) {
    return kind == HeadKind::attention_passthrough ? "passthrough" : "pretrained";
}

HeadKind head_kind_from_string(const std::string& s) {
    if (s == "passthrough" || s == "attention-passthrough") return HeadKind::attention_passthrough;
    if (s == "pretrained" || s == "pretrained-adapter") return HeadKind::pretrained_adapter;
    throw ValidationError("unknown segmentation head '" + s + "'");
}

json SegmentationConfig::to_json() const {
    json j{{"timestep", timestep}, {"lambda", lambda},      {"head", cosod::to_string(head)},
           {"prompt_template", prompt_template},            {"seed", seed},
           {"fail_fast", fail_fast}};
    if (attention_resolution) {
        j["attention_resolution"] = {attention_resolution->height, attention_resolution->width};
    }
    return j;
}

SegmentationConfig SegmentationConfig::from_json(const json& j) {
    SegmentationConfig c;
    if (j.contains("timestep")) c.timestep = j.at("timestep").get<int>();
    if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
    if (j.contains("head")) c.head = head_kind_from_string(j.at("head").get<std::string>());
    if (j.contains("prompt_template")) c.prompt_template = j.at("prompt_template").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("fail_fast")) c.fail_fast = j.at("fail_fast").get<bool>();
    if (j.contains("attention_resolution")) {
        const auto v = j.at("attention_resolution").get<std::vector<int>>();
        if (v.size() != 2) {
            throw ValidationError("segmentation: attention_resolution must be [rows, cols]");
        }
        c.attention_resolution = cv::Size(v[1], v[0]);
    }
    return c;
}

namespace {

/// Seeded forward sample of the image at timestep t. The noise is a function
/// of (cfg seed, image content), so repeated calls agree.
LatentTensor noisy_latent(const DiffusionBackend& backend, const cv::Mat& image, int t,
                          uint64_t seed) {
    const LatentTensor z0 = backend.encode_image(image);
    Rng rng(mix_seed(seed, content_hash(image)));
    LatentTensor eps(z0.channels, z0.height, z0.width);
    for (double& v : eps.values) {
        v = rng.normal();
    }
    return backend.add_noise(z0, t, eps);
}

cv::Mat min_max_normalize(const cv::Mat& raw) {
    double lo = 0.0, hi = 0.0;
    cv::minMaxLoc(raw, &lo, &hi);
    cv::Mat out(raw.size(), CV_64FC1);
    if (hi - lo <= 0.0) {
        // A constant map carries no localization signal.
        out.setTo(0.0);
        return out;
    }
    const double inv = 1.0 / (hi - lo);
    for (int y = 0; y < raw.rows; ++y) {
        const double* src = raw.ptr<double>(y);
        double* dst = out.ptr<double>(y);
        for (int x = 0; x < raw.cols; ++x) {
            dst[x] = (src[x] - lo) * inv;
        }
    }
    return out;
}

} // namespace

AttentionMap extract_attention(const DiffusionBackend& backend, const cv::Mat& image,
                               const Concept& concept, int t, const SegmentationConfig& cfg) {
    if (!backend.has_attention()) {
        throw FeatureUnavailable("extract_attention: backend has no cross-attention capture");
    }
    concept.validate();
    const LatentTensor z_t = noisy_latent(backend, image, t, cfg.seed);
    const TextEmbeddingSequence prompt = backend.encode_prompt(cfg.prompt_template);
    const TextEmbeddingSequence text = inject_concept(prompt, concept);
    cv::Mat raw = backend.cross_attention(z_t, t, text, *text.placeholder_index);
    if (cfg.attention_resolution && raw.size() != *cfg.attention_resolution) {
        raw = resize_bilinear(raw, cfg.attention_resolution->height,
                              cfg.attention_resolution->width);
    }
    AttentionMap map;
    map.values = min_max_normalize(raw);
    map.source_timestep = t;
    return map;
}

cv::Mat fine_segment(const DiffusionBackend& backend, const cv::Mat& image,
                     const Concept& concept, const AttentionMap& attn,
                     const SegmentationHead& head, int t, const SegmentationConfig& cfg) {
    if (attn.values.empty() || attn.values.type() != CV_64FC1) {
        throw ShapeError("fine_segment: attention map must be CV_64FC1");
    }
    cv::Mat soft;
    switch (head.kind) {
    case HeadKind::attention_passthrough:
        soft = resize_bilinear(attn.values, image.rows, image.cols);
        break;
    case HeadKind::pretrained_adapter: {
        if (!head.delegate) {
            throw BackendUnavailable("fine_segment: pretrained head has no weights loaded");
        }
        const LatentTensor z_t = noisy_latent(backend, image, t, cfg.seed);
        soft = head.delegate->fine_segment(z_t, t, concept.embedding, attn);
        if (soft.type() != CV_64FC1) {
            throw ShapeError("fine_segment: adapter head returned wrong map type");
        }
        if (soft.size() != image.size()) {
            soft = resize_bilinear(soft, image.rows, image.cols);
        }
        break;
    }
    }
    if (soft.size() != image.size()) {
        throw ShapeError("fine_segment: output resolution mismatch after upsampling");
    }
    return clamp_unit(soft);
}

cv::Mat binarize(const cv::Mat& soft, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw ValidationError("binarize: lambda must lie in [0,1]");
    }
    if (soft.empty() || soft.type() != CV_64FC1) {
        throw ShapeError("binarize: expected a CV_64FC1 soft map");
    }
    require_finite(soft, "binarize");
    cv::Mat out(soft.size(), CV_8UC1);
    for (int y = 0; y < soft.rows; ++y) {
        const double* src = soft.ptr<double>(y);
        uint8_t* dst = out.ptr<uint8_t>(y);
        for (int x = 0; x < soft.cols; ++x) {
            dst[x] = src[x] >= lambda ? 1 : 0;
        }
    }
    return out;
}

SegmentationHead make_head(HeadKind kind, std::shared_ptr<FineSegDelegate> delegate) {
    SegmentationHead head;
    head.kind = kind;
    head.delegate = std::move(delegate);
    return head;
}

std::vector<SegmentationResult> segment_group(const DiffusionBackend& backend,
                                              const ImageGroup& group, const Concept& concept,
                                              const SegmentationConfig& cfg) {
    if (concept.backend.d_text > 0 &&
        concept.backend.d_text != backend.descriptor().d_text) {
        throw ValidationError("segment_group: concept was learned for a different backend (d_text " +
                              std::to_string(concept.backend.d_text) + " vs " +
                              std::to_string(backend.descriptor().d_text) + ")");
    }
    const SegmentationHead head = make_head(cfg.head);

    std::vector<SegmentationResult> results;
    results.reserve(group.images.size());
    for (const auto& entry : group.images) {
        SegmentationResult res;
        res.image_name = entry.name;
        try {
            const AttentionMap attn =
                extract_attention(backend, entry.image, concept, cfg.timestep, cfg);
            res.soft = fine_segment(backend, entry.image, concept, attn, head, cfg.timestep, cfg);
            res.binary = binarize(res.soft, cfg.lambda);
        } catch (const std::exception& e) {
            const std::string what = group.name + "/" + entry.name + ": " + e.what();
            if (cfg.fail_fast) {
                throw std::runtime_error(what);
            }
            res.error = what;
        }
        results.push_back(std::move(res));
    }
    return results;
}

} // namespace cosod
