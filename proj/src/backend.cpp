#include "cosod/backend.hpp"

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cosod/errors.hpp"
#include "cosod/rng.hpp"

namespace cosod {

using nlohmann::json;

// ---------------------------------------------------------------------------
// NoiseSchedule
// ---------------------------------------------------------------------------

NoiseSchedule NoiseSchedule::scaled_linear(int total_steps, double beta_start, double beta_end) {
    if (total_steps <= 0) {
        throw ValidationError("schedule: total_steps must be positive");
    }
    NoiseSchedule s;
    s.total_steps = total_steps;
    s.alpha_bar.resize(total_steps);
    const double b0 = std::sqrt(beta_start);
    const double b1 = std::sqrt(beta_end);
    double prod = 1.0;
    for (int i = 0; i < total_steps; ++i) {
        const double frac = total_steps > 1 ? static_cast<double>(i) / (total_steps - 1) : 0.0;
        const double sb = b0 + frac * (b1 - b0);
        prod *= 1.0 - sb * sb;
        s.alpha_bar[i] = prod;
    }
    s.validate();
    return s;
}

NoiseSchedule NoiseSchedule::linear(int total_steps, double beta_start, double beta_end) {
    if (total_steps <= 0) {
        throw ValidationError("schedule: total_steps must be positive");
    }
    NoiseSchedule s;
    s.total_steps = total_steps;
    s.alpha_bar.resize(total_steps);
    double prod = 1.0;
    for (int i = 0; i < total_steps; ++i) {
        const double frac = total_steps > 1 ? static_cast<double>(i) / (total_steps - 1) : 0.0;
        prod *= 1.0 - (beta_start + frac * (beta_end - beta_start));
        s.alpha_bar[i] = prod;
    }
    s.validate();
    return s;
}

NoiseSchedule NoiseSchedule::from_alpha_bar(std::vector<double> values) {
    NoiseSchedule s;
    s.total_steps = static_cast<int>(values.size());
    s.alpha_bar = std::move(values);
    s.validate();
    return s;
}

double NoiseSchedule::at(int t) const {
    if (t < 0 || t >= total_steps) {
        throw ValidationError("timestep " + std::to_string(t) + " outside [0, " +
                              std::to_string(total_steps) + ")");
    }
    return alpha_bar[static_cast<size_t>(t)];
}

void NoiseSchedule::validate() const {
    if (total_steps <= 0 || alpha_bar.size() != static_cast<size_t>(total_steps)) {
        throw ValidationError("schedule: alpha_bar length must equal total_steps");
    }
    double prev = 1.0 + 1e-15;
    for (int t = 0; t < total_steps; ++t) {
        const double a = alpha_bar[static_cast<size_t>(t)];
        if (!(a > 0.0 && a <= 1.0)) {
            throw ValidationError("schedule: alpha_bar(" + std::to_string(t) + ") outside (0,1]");
        }
        if (a > prev) {
            throw ValidationError("schedule: alpha_bar must be nonincreasing");
        }
        prev = a;
    }
}

void LatentTensor::require_finite(const std::string& what) const {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw ValidationError(what + ": non-finite latent value");
        }
    }
}

// ---------------------------------------------------------------------------
// Descriptor
// ---------------------------------------------------------------------------

std::string to_string(BackendKind kind) {
    switch (kind) {
    case BackendKind::toy: return "toy";
    case BackendKind::latent_diffusion_adapter: return "latent-diffusion-adapter";
    }
    return "unknown";
}

BackendKind backend_kind_from_string(const std::string& s) {
    if (s == "toy") return BackendKind::toy;
    if (s == "latent-diffusion-adapter" || s == "sd") return BackendKind::latent_diffusion_adapter;
    throw ValidationError("unknown backend kind: " + s);
}

json BackendDescriptor::to_json() const {
    return json{{"kind", to_string(kind)},
                {"model_id", model_id},
                {"latent_shape", latent_shape},
                {"d_text", d_text},
                {"total_steps", schedule.total_steps}};
}

BackendDescriptor BackendDescriptor::from_json(const json& j) {
    BackendDescriptor d;
    d.kind = backend_kind_from_string(j.at("kind").get<std::string>());
    d.model_id = j.at("model_id").get<std::string>();
    const auto shape = j.at("latent_shape").get<std::vector<int>>();
    if (shape.size() != 3) {
        throw ValidationError("descriptor: latent_shape must have 3 entries");
    }
    d.latent_shape = {shape[0], shape[1], shape[2]};
    d.d_text = j.at("d_text").get<int>();
    d.schedule = NoiseSchedule::scaled_linear(j.at("total_steps").get<int>());
    return d;
}

// ---------------------------------------------------------------------------
// Base operations
// ---------------------------------------------------------------------------

void DiffusionBackend::require_latent_shape(const LatentTensor& z, const char* op) const {
    const auto& s = desc_.latent_shape;
    if (z.channels != s[0] || z.height != s[1] || z.width != s[2]) {
        std::ostringstream msg;
        msg << op << ": latent shape (" << z.channels << "," << z.height << "," << z.width
            << ") does not match backend (" << s[0] << "," << s[1] << "," << s[2] << ")";
        throw ShapeError(msg.str());
    }
}

void DiffusionBackend::require_timestep(int t, const char* op) const {
    if (t < 0 || t >= desc_.schedule.total_steps) {
        throw ValidationError(std::string(op) + ": timestep " + std::to_string(t) +
                              " outside [0, " + std::to_string(desc_.schedule.total_steps) + ")");
    }
}

LatentTensor DiffusionBackend::q_sample(const LatentTensor& z0, int t,
                                        const LatentTensor& eps) const {
    require_timestep(t, "add_noise");
    if (!z0.same_shape(eps)) {
        throw ShapeError("add_noise: eps shape differs from z0");
    }
    const double abar = desc_.schedule.at(t);
    const double a = std::sqrt(abar);
    const double b = std::sqrt(1.0 - abar);
    LatentTensor out = z0;
    for (size_t i = 0; i < out.values.size(); ++i) {
        out.values[i] = a * z0.values[i] + b * eps.values[i];
    }
    return out;
}

LatentTensor DiffusionBackend::add_noise(const LatentTensor& z0, int t,
                                         const LatentTensor& eps) const {
    return q_sample(z0, t, eps);
}

// ---------------------------------------------------------------------------
// ToyBackend
// ---------------------------------------------------------------------------

namespace {

const char* kToyVocabulary[] = {
    "a", "an", "the", "photo", "of", "in", "on", "S*",
    "object", "thing", "cat", "dog", "bird", "car", "apple", "guitar",
};

std::vector<std::string> tokenize(const std::string& prompt) {
    std::vector<std::string> tokens;
    std::istringstream in(prompt);
    std::string w;
    while (in >> w) {
        tokens.push_back(w);
    }
    return tokens;
}

} // namespace

ToyBackend::ToyBackend(ToyBackendConfig cfg)
    : DiffusionBackend([&] {
          BackendDescriptor d;
          d.kind = BackendKind::toy;
          d.model_id = "toy-v1/seed" + std::to_string(cfg.seed);
          d.latent_shape = cfg.latent_shape;
          d.d_text = cfg.d_text;
          d.schedule = cfg.schedule;
          d.thread_safe = true;
          return d;
      }()),
      cfg_(std::move(cfg)) {
    if (cfg_.d_text <= 0 || cfg_.latent_shape[0] <= 0 || cfg_.latent_shape[1] <= 0 ||
        cfg_.latent_shape[2] <= 0) {
        throw ValidationError("toy backend: dimensions must be positive");
    }
    Rng rng(mix_seed(cfg_.seed, 0x70795f6261636bull)); // "toy_back"

    vocab_words_.assign(std::begin(kToyVocabulary), std::end(kToyVocabulary));
    vocab_rows_.reserve(vocab_words_.size());
    for (size_t i = 0; i < vocab_words_.size(); ++i) {
        vocab_index_[vocab_words_[i]] = static_cast<int>(i);
        std::vector<double> row(cfg_.d_text);
        for (double& v : row) {
            v = cfg_.embedding_scale * rng.normal();
        }
        vocab_rows_.push_back(std::move(row));
    }

    e_star_.resize(cfg_.d_text);
    for (double& v : e_star_) {
        v = cfg_.embedding_scale * rng.normal();
    }

    const size_t latent_size =
        static_cast<size_t>(cfg_.latent_shape[0]) * cfg_.latent_shape[1] * cfg_.latent_shape[2];
    residual_map_.resize(latent_size * cfg_.d_text);
    for (double& v : residual_map_) {
        v = rng.normal();
    }
    attn_key_.resize(static_cast<size_t>(cfg_.d_text) * cfg_.latent_shape[0]);
    for (double& v : attn_key_) {
        v = rng.normal();
    }
}

LatentTensor ToyBackend::encode_image(const cv::Mat& image_rgb) const {
    if (image_rgb.empty() || image_rgb.type() != CV_64FC3) {
        throw ShapeError("encode_image: expected a CV_64FC3 RGB image");
    }
    const int lh = desc_.latent_shape[1];
    const int lw = desc_.latent_shape[2];
    if (image_rgb.rows % lh != 0 || image_rgb.cols % lw != 0) {
        throw ShapeError("encode_image: image size " + std::to_string(image_rgb.rows) + "x" +
                         std::to_string(image_rgb.cols) + " not divisible by latent grid " +
                         std::to_string(lh) + "x" + std::to_string(lw));
    }
    const int by = image_rgb.rows / lh;
    const int bx = image_rgb.cols / lw;
    LatentTensor z(desc_.latent_shape[0], lh, lw);
    for (int gy = 0; gy < lh; ++gy) {
        for (int gx = 0; gx < lw; ++gx) {
            double sum[3] = {0, 0, 0};
            for (int y = gy * by; y < (gy + 1) * by; ++y) {
                const cv::Vec3d* p = image_rgb.ptr<cv::Vec3d>(y);
                for (int x = gx * bx; x < (gx + 1) * bx; ++x) {
                    for (int c = 0; c < 3; ++c) {
                        const double v = p[x][c];
                        if (!std::isfinite(v)) {
                            throw ValidationError("encode_image: non-finite pixel");
                        }
                        sum[c] += v;
                    }
                }
            }
            const double inv = 1.0 / (static_cast<double>(by) * bx);
            for (int c = 0; c < 3 && c < z.channels; ++c) {
                z.at(c, gy, gx) = sum[c] * inv;
            }
            if (z.channels > 3) {
                z.at(3, gy, gx) = (sum[0] + sum[1] + sum[2]) * inv / 3.0;
            }
        }
    }
    return z;
}

cv::Mat ToyBackend::decode_latent(const LatentTensor& z) const {
    require_latent_shape(z, "decode_latent");
    // Nearest unpool at a fixed factor; the exact inverse of encode_image for
    // block-constant inputs of the matching size.
    constexpr int kScale = 8;
    const int rows = z.height * kScale;
    const int cols = z.width * kScale;
    cv::Mat img(rows, cols, CV_64FC3);
    for (int y = 0; y < rows; ++y) {
        cv::Vec3d* p = img.ptr<cv::Vec3d>(y);
        const int gy = y / kScale;
        for (int x = 0; x < cols; ++x) {
            const int gx = x / kScale;
            for (int c = 0; c < 3; ++c) {
                const double v = c < z.channels ? z.at(c, gy, gx) : 0.0;
                p[x][c] = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return img;
}

uint64_t ToyBackend::latent_key(const LatentTensor& z, int t) const {
    uint64_t h = fnv1a64(&t, sizeof(t));
    h = fnv1a64(z.values.data(), z.values.size() * sizeof(double), h);
    return h;
}

LatentTensor ToyBackend::add_noise(const LatentTensor& z0, int t, const LatentTensor& eps) const {
    require_latent_shape(z0, "add_noise");
    LatentTensor z_t = q_sample(z0, t, eps);
    {
        std::lock_guard<std::mutex> lock(cache_mutex_);
        noise_cache_[latent_key(z_t, t)] = eps.values;
    }
    return z_t;
}

TextEmbeddingSequence ToyBackend::encode_prompt(const std::string& prompt) const {
    const auto tokens = tokenize(prompt);
    if (tokens.empty()) {
        throw ValidationError("encode_prompt: empty prompt");
    }
    TextEmbeddingSequence seq;
    seq.dim = cfg_.d_text;
    for (const auto& tok : tokens) {
        auto it = vocab_index_.find(tok);
        if (it == vocab_index_.end()) {
            throw ValidationError("encode_prompt: unknown token '" + tok + "'");
        }
        if (tok == kPlaceholderToken && !seq.placeholder_index) {
            seq.placeholder_index = seq.rows.size();
        }
        seq.token_ids.push_back(it->second);
        seq.rows.push_back(vocab_rows_[static_cast<size_t>(it->second)]);
    }
    return seq;
}

std::vector<double> ToyBackend::placeholder_row_or_target(const TextEmbeddingSequence& text) const {
    if (text.dim != cfg_.d_text) {
        throw ShapeError("text embedding dim " + std::to_string(text.dim) +
                         " does not match backend d_text " + std::to_string(cfg_.d_text));
    }
    if (text.placeholder_index) {
        if (*text.placeholder_index >= text.rows.size()) {
            throw ValidationError("placeholder_index out of range");
        }
        return text.rows[*text.placeholder_index];
    }
    // Prompts without a placeholder carry no learnable signal; behave as if
    // the placeholder sat exactly at the target.
    return e_star_;
}

LatentTensor ToyBackend::predict_noise(const LatentTensor& z_t, int t,
                                       const TextEmbeddingSequence& text) const {
    require_latent_shape(z_t, "predict_noise");
    require_timestep(t, "predict_noise");
    const std::vector<double> e = placeholder_row_or_target(text);

    LatentTensor out(z_t.channels, z_t.height, z_t.width);
    {
        std::lock_guard<std::mutex> lock(cache_mutex_);
        auto it = noise_cache_.find(latent_key(z_t, t));
        if (it != noise_cache_.end()) {
            out.values = it->second;
        }
    }
    const size_t n = out.values.size();
    for (size_t i = 0; i < n; ++i) {
        const double* arow = &residual_map_[i * cfg_.d_text];
        double acc = 0.0;
        for (int j = 0; j < cfg_.d_text; ++j) {
            acc += arow[j] * (e[static_cast<size_t>(j)] - e_star_[static_cast<size_t>(j)]);
        }
        out.values[i] += acc;
    }
    return out;
}

std::vector<double> ToyBackend::predict_noise_vjp(const LatentTensor& z_t, int t,
                                                  const TextEmbeddingSequence& text, size_t row,
                                                  const LatentTensor& cotangent) const {
    require_latent_shape(z_t, "predict_noise_vjp");
    require_timestep(t, "predict_noise_vjp");
    if (row >= text.rows.size()) {
        throw ValidationError("predict_noise_vjp: row out of range");
    }
    std::vector<double> grad(static_cast<size_t>(cfg_.d_text), 0.0);
    // Output depends on the text only through the placeholder row.
    if (!text.placeholder_index || *text.placeholder_index != row) {
        return grad;
    }
    if (!z_t.same_shape(cotangent)) {
        throw ShapeError("predict_noise_vjp: cotangent shape mismatch");
    }
    const size_t n = cotangent.values.size();
    for (size_t i = 0; i < n; ++i) {
        const double c = cotangent.values[i];
        if (c == 0.0) continue;
        const double* arow = &residual_map_[i * cfg_.d_text];
        for (int j = 0; j < cfg_.d_text; ++j) {
            grad[static_cast<size_t>(j)] += arow[j] * c;
        }
    }
    return grad;
}

std::vector<double> ToyBackend::token_embedding(const std::string& token) const {
    auto it = vocab_index_.find(token);
    if (it == vocab_index_.end()) {
        throw ValidationError("token_embedding: out-of-vocabulary token '" + token + "'");
    }
    return vocab_rows_[static_cast<size_t>(it->second)];
}

cv::Mat ToyBackend::cross_attention(const LatentTensor& z_t, int t,
                                    const TextEmbeddingSequence& text,
                                    size_t token_index) const {
    require_latent_shape(z_t, "cross_attention");
    require_timestep(t, "cross_attention");
    if (token_index >= text.rows.size()) {
        throw ValidationError("cross_attention: token index out of range");
    }
    if (text.dim != cfg_.d_text) {
        throw ShapeError("cross_attention: text dim mismatch");
    }
    const auto& e = text.rows[token_index];
    cv::Mat raw(z_t.height, z_t.width, CV_64FC1);
    for (int y = 0; y < z_t.height; ++y) {
        double* p = raw.ptr<double>(y);
        for (int x = 0; x < z_t.width; ++x) {
            // query = token row, key = K * (channel vector at this position)
            double acc = 0.0;
            for (int j = 0; j < cfg_.d_text; ++j) {
                double kz = 0.0;
                for (int c = 0; c < z_t.channels; ++c) {
                    kz += attn_key_[static_cast<size_t>(j) * z_t.channels + c] * z_t.at(c, y, x);
                }
                acc += e[static_cast<size_t>(j)] * kz;
            }
            p[x] = acc;
        }
    }
    return raw;
}

// ---------------------------------------------------------------------------
// AdapterBackend
// ---------------------------------------------------------------------------

AdapterBackend::AdapterBackend(BackendDescriptor desc,
                               std::shared_ptr<ExternalDiffusionPipeline> pipeline)
    : DiffusionBackend(std::move(desc)), pipeline_(std::move(pipeline)) {
    desc_.kind = BackendKind::latent_diffusion_adapter;
}

ExternalDiffusionPipeline& AdapterBackend::require_pipeline(const char* op) const {
    if (!pipeline_) {
        throw BackendUnavailable(std::string(op) +
                                 ": latent-diffusion adapter has no pretrained pipeline loaded");
    }
    return *pipeline_;
}

LatentTensor AdapterBackend::encode_image(const cv::Mat& image_rgb) const {
    LatentTensor z = require_pipeline("encode_image").encode_image(image_rgb);
    require_latent_shape(z, "encode_image (adapter output)");
    return z;
}

cv::Mat AdapterBackend::decode_latent(const LatentTensor& z) const {
    require_latent_shape(z, "decode_latent");
    return require_pipeline("decode_latent").decode_latent(z);
}

TextEmbeddingSequence AdapterBackend::encode_prompt(const std::string& prompt) const {
    if (prompt.empty()) {
        throw ValidationError("encode_prompt: empty prompt");
    }
    TextEmbeddingSequence seq = require_pipeline("encode_prompt").encode_prompt(prompt);
    if (seq.dim != desc_.d_text) {
        throw ShapeError("encode_prompt (adapter output): dim mismatch");
    }
    return seq;
}

LatentTensor AdapterBackend::predict_noise(const LatentTensor& z_t, int t,
                                           const TextEmbeddingSequence& text) const {
    require_latent_shape(z_t, "predict_noise");
    require_timestep(t, "predict_noise");
    LatentTensor out = require_pipeline("predict_noise").predict_noise(z_t, t, text);
    require_latent_shape(out, "predict_noise (adapter output)");
    return out;
}

std::vector<double> AdapterBackend::predict_noise_vjp(const LatentTensor& z_t, int t,
                                                      const TextEmbeddingSequence& text,
                                                      size_t row,
                                                      const LatentTensor& cotangent) const {
    require_latent_shape(z_t, "predict_noise_vjp");
    require_timestep(t, "predict_noise_vjp");
    return require_pipeline("predict_noise_vjp").predict_noise_vjp(z_t, t, text, row, cotangent);
}

std::vector<double> AdapterBackend::token_embedding(const std::string& token) const {
    return require_pipeline("token_embedding").token_embedding(token);
}

bool AdapterBackend::has_attention() const {
    return pipeline_ && pipeline_->has_attention();
}

cv::Mat AdapterBackend::cross_attention(const LatentTensor& z_t, int t,
                                        const TextEmbeddingSequence& text,
                                        size_t token_index) const {
    auto& p = require_pipeline("cross_attention");
    if (!p.has_attention()) {
        throw FeatureUnavailable("cross_attention: pipeline does not expose attention capture");
    }
    return p.cross_attention(z_t, t, text, token_index);
}

// ---------------------------------------------------------------------------
// Config / factory
// ---------------------------------------------------------------------------

json BackendConfig::to_json() const {
    return json{{"kind", to_string(kind)},     {"model_id", model_id},
                {"seed", seed},                {"total_steps", total_steps},
                {"schedule", schedule},        {"beta_start", beta_start},
                {"beta_end", beta_end}};
}

BackendConfig BackendConfig::from_json(const json& j) {
    BackendConfig c;
    if (j.contains("kind")) c.kind = backend_kind_from_string(j.at("kind").get<std::string>());
    if (j.contains("model_id")) c.model_id = j.at("model_id").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("total_steps")) c.total_steps = j.at("total_steps").get<int>();
    if (j.contains("schedule")) c.schedule = j.at("schedule").get<std::string>();
    if (j.contains("beta_start")) c.beta_start = j.at("beta_start").get<double>();
    if (j.contains("beta_end")) c.beta_end = j.at("beta_end").get<double>();
    return c;
}

NoiseSchedule make_schedule(const std::string& name, int total_steps, double beta_start,
                            double beta_end) {
    if (name == "scaled_linear") return NoiseSchedule::scaled_linear(total_steps, beta_start, beta_end);
    if (name == "linear") return NoiseSchedule::linear(total_steps, beta_start, beta_end);
    throw ValidationError("unknown schedule '" + name + "'");
}

std::shared_ptr<DiffusionBackend> make_backend(const BackendConfig& cfg) {
    const NoiseSchedule schedule =
        make_schedule(cfg.schedule, cfg.total_steps, cfg.beta_start, cfg.beta_end);
    switch (cfg.kind) {
    case BackendKind::toy: {
        ToyBackendConfig tc;
        tc.seed = cfg.seed;
        tc.schedule = schedule;
        return std::make_shared<ToyBackend>(tc);
    }
    case BackendKind::latent_diffusion_adapter: {
        BackendDescriptor d;
        d.kind = BackendKind::latent_diffusion_adapter;
        d.model_id = cfg.model_id;
        d.latent_shape = {4, 64, 64};
        d.d_text = 768;
        d.schedule = schedule;
        d.thread_safe = false;
        return std::make_shared<AdapterBackend>(std::move(d));
    }
    }
    throw ValidationError("unknown backend kind");
}

} // namespace cosod
