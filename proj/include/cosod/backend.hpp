#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <opencv2/core.hpp>

namespace cosod {

/// Forward-process schedule: alpha_bar(t) in (0,1], nonincreasing.
struct NoiseSchedule {
    int total_steps = 1000;
    std::vector<double> alpha_bar;

    /// The scaled-linear beta schedule used by the SD v1.x family.
    static NoiseSchedule scaled_linear(int total_steps = 1000,
                                       double beta_start = 0.00085,
                                       double beta_end = 0.012);
    static NoiseSchedule linear(int total_steps = 1000,
                                double beta_start = 1e-4,
                                double beta_end = 0.02);
    static NoiseSchedule from_alpha_bar(std::vector<double> values);

    double at(int t) const;
    void validate() const;
};

/// Flat (channels, height, width) tensor of doubles.
struct LatentTensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> values; // channel-major

    LatentTensor() = default;
    LatentTensor(int c, int h, int w) : channels(c), height(h), width(w),
                                        values(static_cast<size_t>(c) * h * w, 0.0) {}

    size_t size() const { return values.size(); }
    double& at(int c, int y, int x) {
        return values[(static_cast<size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return values[(static_cast<size_t>(c) * height + y) * width + x];
    }
    bool same_shape(const LatentTensor& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
    void require_finite(const std::string& what) const;
};

/// Token embeddings for a prompt, with the position of the placeholder token
/// (when the prompt contains one).
struct TextEmbeddingSequence {
    int dim = 0;
    std::vector<std::vector<double>> rows;
    std::vector<int> token_ids;
    std::optional<size_t> placeholder_index;

    size_t length() const { return rows.size(); }
};

enum class BackendKind { toy, latent_diffusion_adapter };

std::string to_string(BackendKind kind);
BackendKind backend_kind_from_string(const std::string& s);

struct BackendDescriptor {
    BackendKind kind = BackendKind::toy;
    std::string model_id;
    std::array<int, 3> latent_shape{0, 0, 0}; // C,H,W
    int d_text = 0;
    NoiseSchedule schedule;
    bool thread_safe = true;

    nlohmann::json to_json() const;
    /// Parses the serialized form {kind, model_id, latent_shape, d_text,
    /// total_steps}; the schedule is rebuilt as scaled-linear over total_steps.
    static BackendDescriptor from_json(const nlohmann::json& j);
};

/// The placeholder token replaced by the learned concept during injection.
inline constexpr const char* kPlaceholderToken = "S*";

/// Interface to a latent text-to-image diffusion model: autoencoder, text
/// encoder, noise predictor and schedule. Implementations are immutable after
/// construction; randomness always comes from the caller.
class DiffusionBackend {
public:
    virtual ~DiffusionBackend() = default;

    const BackendDescriptor& descriptor() const { return desc_; }

    /// E: RGB [0,1] image -> latent with the declared shape.
    virtual LatentTensor encode_image(const cv::Mat& image_rgb) const = 0;

    /// D: latent -> RGB image, values clamped to [0,1].
    virtual cv::Mat decode_latent(const LatentTensor& z) const = 0;

    /// q-sample: z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps.
    virtual LatentTensor add_noise(const LatentTensor& z0, int t, const LatentTensor& eps) const;

    virtual TextEmbeddingSequence encode_prompt(const std::string& prompt) const = 0;

    /// eps_theta(z_t, t, text).
    virtual LatentTensor predict_noise(const LatentTensor& z_t, int t,
                                       const TextEmbeddingSequence& text) const = 0;

    /// Vector-Jacobian product of predict_noise with respect to text row `row`:
    /// returns d(pred)/d(row) applied to `cotangent`, a d_text vector.
    virtual std::vector<double> predict_noise_vjp(const LatentTensor& z_t, int t,
                                                  const TextEmbeddingSequence& text,
                                                  size_t row,
                                                  const LatentTensor& cotangent) const = 0;

    /// Vocabulary embedding row for a native token.
    virtual std::vector<double> token_embedding(const std::string& token) const = 0;

    virtual bool has_attention() const = 0;

    /// Raw (unnormalized) cross-attention grid between text row `token_index`
    /// and the spatial positions of z_t.
    virtual cv::Mat cross_attention(const LatentTensor& z_t, int t,
                                    const TextEmbeddingSequence& text,
                                    size_t token_index) const = 0;

protected:
    explicit DiffusionBackend(BackendDescriptor desc) : desc_(std::move(desc)) {}

    LatentTensor q_sample(const LatentTensor& z0, int t, const LatentTensor& eps) const;
    void require_latent_shape(const LatentTensor& z, const char* op) const;
    void require_timestep(int t, const char* op) const;

    BackendDescriptor desc_;
};

struct ToyBackendConfig {
    uint64_t seed = 0;
    int d_text = 16;
    std::array<int, 3> latent_shape{4, 8, 8};
    NoiseSchedule schedule = NoiseSchedule::scaled_linear();
    /// Scale of the seeded vocabulary rows and of the optimum embedding.
    double embedding_scale = 0.1;
};

/// Deterministic analytic backend with a closed-form training optimum.
///
/// E/D are an exact average-pool / nearest-unpool pair, so D(E(X)) == X for
/// block-constant X. predict_noise returns eps_true + A (e - e*), where
/// eps_true is the noise recorded when this backend produced z_t, e is the
/// placeholder row of the prompt, e* a fixed seeded target and A a fixed
/// seeded full-column-rank map. The denoising MSE is therefore a strictly
/// convex quadratic in e with unique minimizer e*.
class ToyBackend final : public DiffusionBackend {
public:
    explicit ToyBackend(ToyBackendConfig cfg = {});

    LatentTensor encode_image(const cv::Mat& image_rgb) const override;
    cv::Mat decode_latent(const LatentTensor& z) const override;
    LatentTensor add_noise(const LatentTensor& z0, int t, const LatentTensor& eps) const override;
    TextEmbeddingSequence encode_prompt(const std::string& prompt) const override;
    LatentTensor predict_noise(const LatentTensor& z_t, int t,
                               const TextEmbeddingSequence& text) const override;
    std::vector<double> predict_noise_vjp(const LatentTensor& z_t, int t,
                                          const TextEmbeddingSequence& text, size_t row,
                                          const LatentTensor& cotangent) const override;
    std::vector<double> token_embedding(const std::string& token) const override;
    bool has_attention() const override { return true; }
    cv::Mat cross_attention(const LatentTensor& z_t, int t,
                            const TextEmbeddingSequence& text,
                            size_t token_index) const override;

    /// The closed-form optimum of the denoising objective.
    const std::vector<double>& target_embedding() const { return e_star_; }
    const std::vector<std::string>& vocabulary() const { return vocab_words_; }

private:
    std::vector<double> placeholder_row_or_target(const TextEmbeddingSequence& text) const;
    uint64_t latent_key(const LatentTensor& z, int t) const;

    ToyBackendConfig cfg_;
    std::vector<std::string> vocab_words_;
    std::unordered_map<std::string, int> vocab_index_;
    std::vector<std::vector<double>> vocab_rows_;
    std::vector<double> e_star_;           // d_text
    std::vector<double> residual_map_;     // latent_size x d_text, row-major (the A matrix)
    std::vector<double> attn_key_;         // d_text x latent_channels (the K matrix)

    // eps recorded per generated z_t so predict_noise can reproduce it.
    mutable std::mutex cache_mutex_;
    mutable std::unordered_map<uint64_t, std::vector<double>> noise_cache_;
};

/// The six model operations an external pretrained pipeline must provide.
/// Weight loading, tokenizer details and device placement live behind this.
class ExternalDiffusionPipeline {
public:
    virtual ~ExternalDiffusionPipeline() = default;
    virtual LatentTensor encode_image(const cv::Mat& image_rgb) = 0;
    virtual cv::Mat decode_latent(const LatentTensor& z) = 0;
    virtual TextEmbeddingSequence encode_prompt(const std::string& prompt) = 0;
    virtual LatentTensor predict_noise(const LatentTensor& z_t, int t,
                                       const TextEmbeddingSequence& text) = 0;
    virtual std::vector<double> predict_noise_vjp(const LatentTensor& z_t, int t,
                                                  const TextEmbeddingSequence& text, size_t row,
                                                  const LatentTensor& cotangent) = 0;
    virtual std::vector<double> token_embedding(const std::string& token) = 0;
    virtual bool has_attention() const { return false; }
    virtual cv::Mat cross_attention(const LatentTensor& z_t, int t,
                                    const TextEmbeddingSequence& text, size_t token_index) = 0;
};

/// Thin validating wrapper around an external pretrained pipeline.
/// Without a pipeline every model operation throws BackendUnavailable.
class AdapterBackend final : public DiffusionBackend {
public:
    AdapterBackend(BackendDescriptor desc,
                   std::shared_ptr<ExternalDiffusionPipeline> pipeline = nullptr);

    LatentTensor encode_image(const cv::Mat& image_rgb) const override;
    cv::Mat decode_latent(const LatentTensor& z) const override;
    TextEmbeddingSequence encode_prompt(const std::string& prompt) const override;
    LatentTensor predict_noise(const LatentTensor& z_t, int t,
                               const TextEmbeddingSequence& text) const override;
    std::vector<double> predict_noise_vjp(const LatentTensor& z_t, int t,
                                          const TextEmbeddingSequence& text, size_t row,
                                          const LatentTensor& cotangent) const override;
    std::vector<double> token_embedding(const std::string& token) const override;
    bool has_attention() const override;
    cv::Mat cross_attention(const LatentTensor& z_t, int t,
                            const TextEmbeddingSequence& text,
                            size_t token_index) const override;

private:
    ExternalDiffusionPipeline& require_pipeline(const char* op) const;
    std::shared_ptr<ExternalDiffusionPipeline> pipeline_;
};

/// Backend section of a run config.
struct BackendConfig {
    BackendKind kind = BackendKind::toy;
    std::string model_id = "toy-v1";
    uint64_t seed = 0;
    int total_steps = 1000;
    std::string schedule = "scaled_linear";
    double beta_start = 0.00085;
    double beta_end = 0.012;

    nlohmann::json to_json() const;
    static BackendConfig from_json(const nlohmann::json& j);
};

NoiseSchedule make_schedule(const std::string& name, int total_steps,
                            double beta_start, double beta_end);

std::shared_ptr<DiffusionBackend> make_backend(const BackendConfig& cfg);

} // namespace cosod
