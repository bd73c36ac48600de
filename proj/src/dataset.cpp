#include "vitkd/dataset.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "vitkd/error.hpp"
#include "vitkd/rng.hpp"

namespace vitkd {

namespace fs = std::filesystem;
using nlohmann::json;

void SyntheticDatasetSpec::validate() const {
    if (num_samples <= 0) throw ConfigError("dataset spec: num_samples must be positive");
    if (image_size < 8) throw ConfigError("dataset spec: image_size must be >= 8");
    if (num_classes < 2 || num_classes > 8)
        throw ConfigError("dataset spec: num_classes must be in [2, 8], got " +
                          std::to_string(num_classes));
    if (generator != "shapes" && generator != "gaussian_textures")
        throw ConfigError("dataset spec: unknown generator '" + generator +
                          "' (expected 'shapes' or 'gaussian_textures')");
}

json SyntheticDatasetSpec::to_json() const {
    return json{{"num_samples", num_samples}, {"image_size", image_size},
                {"num_classes", num_classes}, {"generator", generator},
                {"seed", seed}};
}

SyntheticDatasetSpec SyntheticDatasetSpec::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("dataset spec: expected a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (key != "num_samples" && key != "image_size" && key != "num_classes" &&
            key != "generator" && key != "seed")
            throw ConfigError("dataset spec: unknown key '" + key + "'");
    }
    SyntheticDatasetSpec s;
    try {
        s.num_samples = j.at("num_samples").get<int64_t>();
        if (j.contains("image_size")) s.image_size = j.at("image_size").get<int64_t>();
        if (j.contains("num_classes")) s.num_classes = j.at("num_classes").get<int64_t>();
        if (j.contains("generator")) s.generator = j.at("generator").get<std::string>();
        if (j.contains("seed")) s.seed = j.at("seed").get<uint64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("dataset spec: ") + e.what());
    }
    s.validate();
    return s;
}

namespace {

// Paints one sample into img[3*S*S]. Class identity comes from the painted
// structure; position, scale and color jitter keep samples distinct.
void paint_shapes(float* img, int64_t S, int64_t cls, Rng& rng) {
    const auto Sf = static_cast<float>(S);
    for (int64_t i = 0; i < 3 * S * S; ++i) img[i] = rng.normal(0.0f, 0.25f);
    const float cx = Sf * rng.uniform(0.38f, 0.62f);
    const float cy = Sf * rng.uniform(0.38f, 0.62f);
    const float r = Sf * rng.uniform(0.22f, 0.34f);
    float color[3];
    for (float& c : color) c = rng.uniform(0.8f, 1.6f);
    const int64_t period = std::max<int64_t>(2, S / 4);
    const float phase = rng.uniform(0.0f, static_cast<float>(period));
    for (int64_t y = 0; y < S; ++y) {
        for (int64_t x = 0; x < S; ++x) {
            const float dx = static_cast<float>(x) + 0.5f - cx;
            const float dy = static_cast<float>(y) + 0.5f - cy;
            const float dist = std::sqrt(dx * dx + dy * dy);
            const float box = std::max(std::fabs(dx), std::fabs(dy));
            bool hit = false;
            switch (cls) {
                case 0: hit = dist <= r; break;                          // disk
                case 1: hit = box <= r && box >= 0.6f * r; break;        // hollow square
                case 2:                                                  // cross
                    hit = box <= r && (std::fabs(dx) <= 0.3f * r || std::fabs(dy) <= 0.3f * r);
                    break;
                case 3:                                                  // diagonal stripes
                    hit = std::fmod(static_cast<float>(x + y) + phase,
                                    static_cast<float>(period)) < 0.5f * static_cast<float>(period);
                    break;
                case 4:                                                  // horizontal stripes
                    hit = std::fmod(static_cast<float>(y) + phase, static_cast<float>(period)) <
                          0.5f * static_cast<float>(period);
                    break;
                case 5:                                                  // checkerboard
                    hit = ((x / period) + (y / period)) % 2 == 0;
                    break;
                case 6: hit = dist <= r && dist >= 0.6f * r; break;      // ring
                case 7:                                                  // solid triangle
                    hit = dy >= -r && dy <= r && std::fabs(dx) <= 0.6f * (dy + r);
                    break;
                default: break;
            }
            if (hit)
                for (int64_t c = 0; c < 3; ++c) img[c * S * S + y * S + x] += color[c];
        }
    }
}

// Oriented sinusoid whose spatial frequency encodes the class.
void paint_gaussian_texture(float* img, int64_t S, int64_t cls, Rng& rng) {
    const auto Sf = static_cast<float>(S);
    const float freq = static_cast<float>(cls + 1);
    const float theta = rng.uniform(0.0f, 3.14159265f);
    const float phase = rng.uniform(0.0f, 6.2831853f);
    const float ct = std::cos(theta), st = std::sin(theta);
    float amp[3];
    for (float& a : amp) a = rng.uniform(0.8f, 1.2f);
    for (int64_t y = 0; y < S; ++y) {
        for (int64_t x = 0; x < S; ++x) {
            const float u = (static_cast<float>(x) * ct + static_cast<float>(y) * st) / Sf;
            const float wave = std::sin(6.2831853f * freq * u + phase);
            const float noise = rng.normal(0.0f, 0.3f);
            for (int64_t c = 0; c < 3; ++c) img[c * S * S + y * S + x] = amp[c] * wave + noise;
        }
    }
}

}  // namespace

Dataset generate_dataset(const SyntheticDatasetSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    const int64_t n = spec.num_samples;
    const int64_t S = spec.image_size;
    const int64_t per = 3 * S * S;

    // Round-robin assignment keeps class counts within one of each other;
    // the shuffle only reorders samples.
    ds.labels.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        ds.labels[static_cast<size_t>(i)] = i % spec.num_classes;
    Rng order_rng = Rng(spec.seed).derive(0xD5u);
    order_rng.shuffle(ds.labels);

    ds.pixels.assign(static_cast<size_t>(n * per), 0.0f);
    const bool shapes = spec.generator == "shapes";
    for (int64_t i = 0; i < n; ++i) {
        Rng rng = Rng(spec.seed).derive(0x1000u + static_cast<uint64_t>(i));
        float* img = ds.pixels.data() + i * per;
        if (shapes)
            paint_shapes(img, S, ds.labels[static_cast<size_t>(i)], rng);
        else
            paint_gaussian_texture(img, S, ds.labels[static_cast<size_t>(i)], rng);
    }

    // Per-channel standardization over the full dataset.
    for (int64_t c = 0; c < 3; ++c) {
        double sum = 0.0, sq = 0.0;
        const int64_t plane = S * S;
        for (int64_t i = 0; i < n; ++i) {
            const float* p = ds.pixels.data() + i * per + c * plane;
            for (int64_t k = 0; k < plane; ++k) {
                sum += p[k];
                sq += static_cast<double>(p[k]) * p[k];
            }
        }
        const double count = static_cast<double>(n * plane);
        const double mean = sum / count;
        const double var = std::max(sq / count - mean * mean, 1e-12);
        const float m = static_cast<float>(mean);
        const float inv = static_cast<float>(1.0 / std::sqrt(var));
        for (int64_t i = 0; i < n; ++i) {
            float* p = ds.pixels.data() + i * per + c * plane;
            for (int64_t k = 0; k < plane; ++k) p[k] = (p[k] - m) * inv;
        }
    }
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    const fs::path blob_path = fs::path(dir) / "images.bin";
    {
        std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cannot write dataset blob: " + blob_path.string());
        out.write(reinterpret_cast<const char*>(ds.pixels.data()),
                  static_cast<std::streamsize>(ds.pixels.size() * sizeof(float)));
        if (!out) throw ConfigError("short write to dataset blob: " + blob_path.string());
    }
    json index;
    index["format"] = "vitkd-dataset-v1";
    index["spec"] = ds.spec.to_json();
    index["channels"] = ds.channels;
    index["blob"] = "images.bin";
    index["blob_bytes"] = ds.pixels.size() * sizeof(float);
    index["labels"] = ds.labels;
    const fs::path index_path = fs::path(dir) / "index.json";
    std::ofstream out(index_path, std::ios::trunc);
    if (!out) throw ConfigError("cannot write dataset index: " + index_path.string());
    out << index.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    const fs::path index_path = fs::path(dir) / "index.json";
    std::ifstream in(index_path);
    if (!in) throw ConfigError("cannot open dataset index: " + index_path.string());
    json index;
    try {
        in >> index;
    } catch (const json::exception& e) {
        throw ConfigError("dataset index " + index_path.string() + ": " + e.what());
    }
    if (!index.is_object() || index.value("format", "") != "vitkd-dataset-v1")
        throw ConfigError("dataset index " + index_path.string() +
                          ": missing or unknown format marker");
    Dataset ds;
    try {
        ds.spec = SyntheticDatasetSpec::from_json(index.at("spec"));
        ds.channels = index.at("channels").get<int64_t>();
        ds.labels = index.at("labels").get<std::vector<int64_t>>();
    } catch (const json::exception& e) {
        throw ConfigError("dataset index " + index_path.string() + ": " + e.what());
    }
    if (static_cast<int64_t>(ds.labels.size()) != ds.spec.num_samples)
        throw ConfigError("dataset index: label count does not match num_samples");
    const fs::path blob_path = fs::path(dir) / index.value("blob", "images.bin");
    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw ConfigError("cannot open dataset blob: " + blob_path.string());
    const size_t expect = static_cast<size_t>(ds.spec.num_samples * ds.sample_floats());
    ds.pixels.resize(expect);
    blob.read(reinterpret_cast<char*>(ds.pixels.data()),
              static_cast<std::streamsize>(expect * sizeof(float)));
    if (static_cast<size_t>(blob.gcount()) != expect * sizeof(float))
        throw ConfigError("dataset blob " + blob_path.string() + " is truncated");
    return ds;
}

Tensor Dataset::batch(const std::vector<int64_t>& indices) const {
    if (indices.empty()) throw ContractError("batch needs at least one index");
    const int64_t per = sample_floats();
    std::vector<float> out(indices.size() * static_cast<size_t>(per));
    for (size_t b = 0; b < indices.size(); ++b) {
        const int64_t i = indices[b];
        if (i < 0 || i >= size())
            throw ContractError("batch index " + std::to_string(i) + " out of range");
        std::memcpy(out.data() + b * static_cast<size_t>(per), pixels.data() + i * per,
                    static_cast<size_t>(per) * sizeof(float));
    }
    return Tensor::from_data({static_cast<int64_t>(indices.size()), channels, spec.image_size,
                              spec.image_size},
                             std::move(out));
}

std::vector<int64_t> Dataset::batch_labels(const std::vector<int64_t>& indices) const {
    std::vector<int64_t> out;
    out.reserve(indices.size());
    for (int64_t i : indices) {
        if (i < 0 || i >= size())
            throw ContractError("label index " + std::to_string(i) + " out of range");
        out.push_back(labels[static_cast<size_t>(i)]);
    }
    return out;
}

Tensor one_hot(const std::vector<int64_t>& labels, int64_t num_classes) {
    std::vector<float> out(labels.size() * static_cast<size_t>(num_classes), 0.0f);
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw ContractError("label " + std::to_string(labels[i]) + " outside [0, " +
                                std::to_string(num_classes) + ")");
        out[i * static_cast<size_t>(num_classes) + static_cast<size_t>(labels[i])] = 1.0f;
    }
    return Tensor::from_data({static_cast<int64_t>(labels.size()), num_classes}, std::move(out));
}

}  // namespace vitkd
