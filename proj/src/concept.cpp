#include "cosod/concept.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cosod/errors.hpp"
#include "cosod/image.hpp"

namespace cosod {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Timestep resampling
// ---------------------------------------------------------------------------

void ResamplingConfig::validate(int total_steps) const {
    if (alpha <= 0.0) {
        throw ValidationError("resampling: alpha must be positive");
    }
    if (t1.size() <= 0 || t2.size() <= 0 || t3.size() <= 0) {
        throw ValidationError("resampling: intervals must be nonempty");
    }
    if (t1.begin != 0 || t1.end != t2.begin || t2.end != t3.begin || t3.end != total_steps) {
        std::ostringstream msg;
        msg << "resampling: intervals [" << t1.begin << "," << t1.end << ") [" << t2.begin << ","
            << t2.end << ") [" << t3.begin << "," << t3.end
            << ") must be contiguous and cover [0," << total_steps << ")";
        throw ValidationError(msg.str());
    }
}

double resampling_pmf(int t, const ResamplingConfig& cfg) {
    const double denom = 1.0 + cfg.alpha;
    if (cfg.t1.contains(t)) {
        return 1.0 / (2.0 * cfg.t1.size() * denom);
    }
    if (cfg.t2.contains(t)) {
        return cfg.alpha / (cfg.t2.size() * denom);
    }
    if (cfg.t3.contains(t)) {
        return 1.0 / (2.0 * cfg.t3.size() * denom);
    }
    throw ValidationError("resampling_pmf: timestep " + std::to_string(t) +
                          " outside [" + std::to_string(cfg.t1.begin) + "," +
                          std::to_string(cfg.t3.end) + ")");
}

std::array<double, 3> interval_masses(const ResamplingConfig& cfg) {
    const double denom = 1.0 + cfg.alpha;
    return {1.0 / (2.0 * denom), cfg.alpha / denom, 1.0 / (2.0 * denom)};
}

int sample_timestep(const ResamplingConfig& cfg, Rng& rng) {
    const auto masses = interval_masses(cfg);
    const double u = rng.uniform();
    const Interval* iv = &cfg.t3;
    if (u < masses[0]) {
        iv = &cfg.t1;
    } else if (u < masses[0] + masses[1]) {
        iv = &cfg.t2;
    }
    return iv->begin + rng.uniform_int(iv->size());
}

json ResamplingConfig::to_json() const {
    return json{{"t1", {t1.begin, t1.end}},
                {"t2", {t2.begin, t2.end}},
                {"t3", {t3.begin, t3.end}},
                {"alpha", alpha}};
}

ResamplingConfig ResamplingConfig::from_json(const json& j) {
    ResamplingConfig cfg;
    auto read_interval = [&](const char* key, Interval& iv) {
        if (!j.contains(key)) return;
        const auto v = j.at(key).get<std::vector<int>>();
        if (v.size() != 2) {
            throw ValidationError(std::string("resampling: interval '") + key +
                                  "' must be [begin, end]");
        }
        iv = Interval{v[0], v[1]};
    };
    read_interval("t1", cfg.t1);
    read_interval("t2", cfg.t2);
    read_interval("t3", cfg.t3);
    if (j.contains("alpha")) cfg.alpha = j.at("alpha").get<double>();
    return cfg;
}

// ---------------------------------------------------------------------------
// Concept
// ---------------------------------------------------------------------------

void Concept::validate() const {
    if (embedding.empty()) {
        throw ValidationError("concept: empty embedding");
    }
    if (backend.d_text > 0 && static_cast<int>(embedding.size()) != backend.d_text) {
        throw ValidationError("concept: embedding dim " + std::to_string(embedding.size()) +
                              " does not match backend d_text " + std::to_string(backend.d_text));
    }
    for (double v : embedding) {
        if (!std::isfinite(v)) {
            throw ValidationError("concept: non-finite embedding component");
        }
    }
}

void LearnConfig::validate(const BackendDescriptor& backend) const {
    if (learning_rate <= 0.0) throw ValidationError("learn: learning_rate must be positive");
    if (batch_size <= 0) throw ValidationError("learn: batch_size must be positive");
    if (max_steps < 0) throw ValidationError("learn: max_steps must be nonnegative");
    if (prompt_template.empty()) throw ValidationError("learn: empty prompt template");
    if (resampling) {
        resampling->validate(backend.schedule.total_steps);
    }
}

TextEmbeddingSequence inject_concept(const TextEmbeddingSequence& text, const Concept& concept) {
    if (!text.placeholder_index) {
        throw ValidationError("inject_concept: prompt has no placeholder token");
    }
    if (text.dim != static_cast<int>(concept.embedding.size())) {
        throw ShapeError("inject_concept: embedding dim " +
                         std::to_string(concept.embedding.size()) + " vs text dim " +
                         std::to_string(text.dim));
    }
    TextEmbeddingSequence out = text;
    out.rows[*text.placeholder_index] = concept.embedding;
    return out;
}

// ---------------------------------------------------------------------------
// Loss / learning
// ---------------------------------------------------------------------------

namespace {

int draw_timestep(const LearnConfig& cfg, int total_steps, Rng& rng) {
    if (cfg.resampling) {
        return sample_timestep(*cfg.resampling, rng);
    }
    return rng.uniform_int(total_steps);
}

LossGrad concept_loss_latents(const DiffusionBackend& backend, const Concept& concept,
                              const std::vector<const LatentTensor*>& latents, Rng& rng,
                              const LearnConfig& cfg, const TextEmbeddingSequence& prompt) {
    const int total_steps = backend.descriptor().schedule.total_steps;
    const TextEmbeddingSequence text = inject_concept(prompt, concept);
    const size_t row = *text.placeholder_index;

    LossGrad out;
    out.grad.assign(concept.embedding.size(), 0.0);
    const double batch_norm = 1.0 / static_cast<double>(latents.size());

    for (const LatentTensor* z0 : latents) {
        const int t = draw_timestep(cfg, total_steps, rng);
        LatentTensor eps(z0->channels, z0->height, z0->width);
        for (double& v : eps.values) {
            v = rng.normal();
        }
        const LatentTensor z_t = backend.add_noise(*z0, t, eps);
        const LatentTensor pred = backend.predict_noise(z_t, t, text);

        const double elem_norm = 1.0 / static_cast<double>(pred.size());
        LatentTensor residual = pred;
        double sample_loss = 0.0;
        for (size_t i = 0; i < residual.values.size(); ++i) {
            residual.values[i] -= eps.values[i];
            sample_loss += residual.values[i] * residual.values[i];
        }
        out.loss += sample_loss * elem_norm * batch_norm;

        // dL/dpred = 2 * residual / (elements * batch)
        for (double& v : residual.values) {
            v *= 2.0 * elem_norm * batch_norm;
        }
        const auto g = backend.predict_noise_vjp(z_t, t, text, row, residual);
        for (size_t j = 0; j < out.grad.size(); ++j) {
            out.grad[j] += g[j];
        }
    }
    return out;
}

} // namespace

LossGrad concept_loss(const DiffusionBackend& backend, const Concept& concept,
                      const std::vector<cv::Mat>& image_batch, Rng& rng,
                      const LearnConfig& cfg) {
    if (image_batch.empty()) {
        throw ValidationError("concept_loss: empty batch");
    }
    cfg.validate(backend.descriptor());
    const TextEmbeddingSequence prompt = backend.encode_prompt(cfg.prompt_template);

    std::vector<LatentTensor> encoded;
    encoded.reserve(image_batch.size());
    std::vector<const LatentTensor*> latents;
    for (const auto& img : image_batch) {
        encoded.push_back(backend.encode_image(img));
        latents.push_back(&encoded.back());
    }
    return concept_loss_latents(backend, concept, latents, rng, cfg, prompt);
}

Concept learn_concept(const DiffusionBackend& backend, const ImageGroup& group,
                      const LearnConfig& cfg, LearnTrace* trace) {
    if (group.images.empty()) {
        throw ValidationError("learn_concept: empty group");
    }
    cfg.validate(backend.descriptor());
    const TextEmbeddingSequence prompt = backend.encode_prompt(cfg.prompt_template);
    if (!prompt.placeholder_index) {
        throw ValidationError("learn_concept: prompt template has no placeholder token");
    }

    Concept concept;
    concept.embedding = backend.token_embedding(cfg.init_token);
    concept.placeholder_token = kPlaceholderToken;
    concept.source = ConceptSource::learned;
    concept.backend = backend.descriptor();

    // Group latents are fixed across steps; encode once.
    std::vector<LatentTensor> latents;
    latents.reserve(group.images.size());
    for (const auto& entry : group.images) {
        latents.push_back(backend.encode_image(entry.image));
    }

    Rng rng(cfg.seed);
    const size_t dim = concept.embedding.size();
    std::vector<double> m(dim, 0.0);
    std::vector<double> v(dim, 0.0);
    constexpr double kBeta1 = 0.9;
    constexpr double kBeta2 = 0.999;
    constexpr double kEps = 1e-8;

    double initial_loss = 0.0;
    double last_loss = 0.0;
    for (int step = 0; step < cfg.max_steps; ++step) {
        std::vector<const LatentTensor*> batch(static_cast<size_t>(cfg.batch_size));
        for (auto& slot : batch) {
            slot = &latents[static_cast<size_t>(rng.uniform_int(static_cast<int>(latents.size())))];
        }
        const LossGrad lg = concept_loss_latents(backend, concept, batch, rng, cfg, prompt);
        if (!std::isfinite(lg.loss)) {
            throw NumericalError("learn_concept: non-finite loss " + std::to_string(lg.loss) +
                                 " at step " + std::to_string(step) + " (lr=" +
                                 std::to_string(cfg.learning_rate) + ", seed=" +
                                 std::to_string(cfg.seed) + ")");
        }
        if (step == 0) {
            initial_loss = lg.loss;
        }
        last_loss = lg.loss;
        if (trace) {
            trace->loss_history.push_back(lg.loss);
        }

        const double bc1 = 1.0 - std::pow(kBeta1, step + 1);
        const double bc2 = 1.0 - std::pow(kBeta2, step + 1);
        for (size_t j = 0; j < dim; ++j) {
            const double g = lg.grad[j];
            m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g;
            v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            concept.embedding[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + kEps);
        }
    }

    concept.training_meta.steps = cfg.max_steps;
    concept.training_meta.lr = cfg.learning_rate;
    concept.training_meta.batch = cfg.batch_size;
    concept.training_meta.alpha = cfg.resampling ? cfg.resampling->alpha : 0.0;
    concept.training_meta.seed = cfg.seed;
    concept.training_meta.sampler = cfg.resampling ? "resampled" : "uniform";
    concept.training_meta.init_token = cfg.init_token;
    concept.training_meta.initial_loss = initial_loss;
    concept.training_meta.final_loss = last_loss;
    concept.validate();
    return concept;
}

Concept concept_from_token(const DiffusionBackend& backend, const std::string& token) {
    Concept concept;
    concept.embedding = backend.token_embedding(token);
    concept.placeholder_token = kPlaceholderToken;
    concept.source = ConceptSource::vocabulary;
    concept.backend = backend.descriptor();
    concept.training_meta.sampler = "none";
    concept.training_meta.init_token = token;
    concept.validate();
    return concept;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {
constexpr int kConceptFormatVersion = 1;
}

json concept_to_json(const Concept& concept) {
    json meta{{"steps", concept.training_meta.steps},
              {"lr", concept.training_meta.lr},
              {"batch", concept.training_meta.batch},
              {"alpha", concept.training_meta.alpha},
              {"seed", concept.training_meta.seed},
              {"sampler", concept.training_meta.sampler},
              {"init_token", concept.training_meta.init_token},
              {"initial_loss", concept.training_meta.initial_loss},
              {"final_loss", concept.training_meta.final_loss}};
    if (!concept.training_meta.cache_key.empty()) {
        meta["cache_key"] = concept.training_meta.cache_key;
    }
    return json{{"format_version", kConceptFormatVersion},
                {"placeholder_token", concept.placeholder_token},
                {"source", concept.source == ConceptSource::learned ? "learned" : "vocabulary"},
                {"embedding", concept.embedding},
                {"training_meta", meta},
                {"backend", concept.backend.to_json()}};
}

Concept concept_from_json(const json& j) {
    if (j.value("format_version", 0) != kConceptFormatVersion) {
        throw ValidationError("concept file: unsupported format_version");
    }
    Concept c;
    c.placeholder_token = j.at("placeholder_token").get<std::string>();
    const std::string source = j.at("source").get<std::string>();
    if (source == "learned") {
        c.source = ConceptSource::learned;
    } else if (source == "vocabulary") {
        c.source = ConceptSource::vocabulary;
    } else {
        throw ValidationError("concept file: unknown source '" + source + "'");
    }
    c.embedding = j.at("embedding").get<std::vector<double>>();
    const json& meta = j.at("training_meta");
    c.training_meta.steps = meta.value("steps", 0);
    c.training_meta.lr = meta.value("lr", 0.0);
    c.training_meta.batch = meta.value("batch", 0);
    c.training_meta.alpha = meta.value("alpha", 0.0);
    c.training_meta.seed = meta.value("seed", uint64_t{0});
    c.training_meta.sampler = meta.value("sampler", "");
    c.training_meta.init_token = meta.value("init_token", "");
    c.training_meta.initial_loss = meta.value("initial_loss", 0.0);
    c.training_meta.final_loss = meta.value("final_loss", 0.0);
    c.training_meta.cache_key = meta.value("cache_key", "");
    c.backend = BackendDescriptor::from_json(j.at("backend"));
    c.validate();
    return c;
}

void save_concept(const Concept& concept, const std::filesystem::path& path) {
    atomic_write_text(path, concept_to_json(concept).dump(2) + "\n");
}

Concept load_concept(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read concept file: " + path.string());
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("concept file: invalid JSON in " + path.string() + ": " + e.what());
    }
    return concept_from_json(j);
}

json LearnConfig::to_json() const {
    json j{{"learning_rate", learning_rate},
           {"batch_size", batch_size},
           {"max_steps", max_steps},
           {"prompt_template", prompt_template},
           {"init_token", init_token},
           {"seed", seed}};
    j["resampling"] = resampling ? resampling->to_json() : json("uniform");
    return j;
}

LearnConfig LearnConfig::from_json(const json& j) {
    LearnConfig c;
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("max_steps")) c.max_steps = j.at("max_steps").get<int>();
    if (j.contains("prompt_template")) c.prompt_template = j.at("prompt_template").get<std::string>();
    if (j.contains("init_token")) c.init_token = j.at("init_token").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("resampling")) {
        const json& r = j.at("resampling");
        if (r.is_string() && r.get<std::string>() == "uniform") {
            c.resampling = std::nullopt;
        } else {
            c.resampling = ResamplingConfig::from_json(r);
        }
    }
    return c;
}

} // namespace cosod
