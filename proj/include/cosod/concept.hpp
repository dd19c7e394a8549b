#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cosod/backend.hpp"
#include "cosod/dataset.hpp"
#include "cosod/rng.hpp"

namespace cosod {

/// Half-open integer interval [begin, end).
struct Interval {
    int begin = 0;
    int end = 0;

    int size() const { return end - begin; }
    bool contains(int t) const { return t >= begin && t < end; }
};

/// Three-interval timestep resampling distribution. The middle interval is
/// oversampled by the ratio alpha:
///   p(t) = 1/(2|T1|(1+a)) on T1,  a/(|T2|(1+a)) on T2,  1/(2|T3|(1+a)) on T3.
struct ResamplingConfig {
    Interval t1{0, 300};
    Interval t2{300, 800};
    Interval t3{800, 1000};
    double alpha = 1.5;

    void validate(int total_steps) const;

    nlohmann::json to_json() const;
    static ResamplingConfig from_json(const nlohmann::json& j);
};

/// Per-step probability p_alpha(t).
double resampling_pmf(int t, const ResamplingConfig& cfg);

/// Closed-form interval masses: (1/(2(1+a)), a/(1+a), 1/(2(1+a))).
std::array<double, 3> interval_masses(const ResamplingConfig& cfg);

/// Draw a timestep distributed per resampling_pmf.
int sample_timestep(const ResamplingConfig& cfg, Rng& rng);

enum class ConceptSource { learned, vocabulary };

struct TrainingMeta {
    int steps = 0;
    double lr = 0.0;
    int batch = 0;
    double alpha = 0.0;           // 0 when the uniform sampler was used
    uint64_t seed = 0;
    std::string sampler;          // "resampled" | "uniform" | "none"
    std::string init_token;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::string cache_key;        // set by the pipeline for concept reuse
};

/// A learned (or vocabulary) embedding in the text-encoder token space that
/// represents the group's common object.
struct Concept {
    std::vector<double> embedding;
    std::string placeholder_token = kPlaceholderToken;
    ConceptSource source = ConceptSource::learned;
    TrainingMeta training_meta;
    BackendDescriptor backend;

    void validate() const;
};

struct LearnConfig {
    double learning_rate = 5e-4;
    int batch_size = 4;
    int max_steps = 2000;
    std::string prompt_template = "a photo of S*";
    std::string init_token = "object";
    uint64_t seed = 0;
    /// nullopt selects the uniform baseline sampler over [0, total_steps).
    std::optional<ResamplingConfig> resampling = ResamplingConfig{};

    void validate(const BackendDescriptor& backend) const;

    nlohmann::json to_json() const;
    static LearnConfig from_json(const nlohmann::json& j);
};

/// Replace the placeholder row of `text` with the concept embedding.
/// The input is not mutated; all other rows are copied bit-identically.
TextEmbeddingSequence inject_concept(const TextEmbeddingSequence& text, const Concept& concept);

struct LossGrad {
    double loss = 0.0;
    std::vector<double> grad;
};

/// Batch-mean denoising loss ||eps_theta(z_t, t, inject(prompt, c)) - eps||^2
/// (mean over batch and latent elements) and its gradient with respect to the
/// concept embedding. Per image: encode, draw eps ~ N(0,1), draw t from the
/// configured sampler, form z_t, evaluate the residual.
LossGrad concept_loss(const DiffusionBackend& backend, const Concept& concept,
                      const std::vector<cv::Mat>& image_batch, Rng& rng,
                      const LearnConfig& cfg);

struct LearnTrace {
    std::vector<double> loss_history;
};

/// Learn the group concept: initialize from a vocabulary token, then run
/// max_steps of Adam at a constant learning rate over batches sampled from
/// the group with replacement.
Concept learn_concept(const DiffusionBackend& backend, const ImageGroup& group,
                      const LearnConfig& cfg, LearnTrace* trace = nullptr);

/// Wrap a native vocabulary token as a Concept (the upper-bound experiment).
Concept concept_from_token(const DiffusionBackend& backend, const std::string& token);

nlohmann::json concept_to_json(const Concept& concept);
Concept concept_from_json(const nlohmann::json& j);

/// Concept file I/O (extension .concept.json).
void save_concept(const Concept& concept, const std::filesystem::path& path);
Concept load_concept(const std::filesystem::path& path);

} // namespace cosod
