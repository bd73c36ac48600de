#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitkd/tensor.hpp"

namespace vitkd {

// Recipe for a deterministic synthetic image-classification dataset.
struct SyntheticDatasetSpec {
    int64_t num_samples = 0;
    int64_t image_size = 16;
    int64_t num_classes = 4;
    std::string generator = "shapes";  // "shapes" | "gaussian_textures"
    uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static SyntheticDatasetSpec from_json(const nlohmann::json& j);
};

// In-memory dataset: normalized pixels in one flat [n, 3, S, S] buffer.
struct Dataset {
    SyntheticDatasetSpec spec;
    int64_t channels = 3;
    std::vector<float> pixels;
    std::vector<int64_t> labels;

    int64_t size() const { return spec.num_samples; }
    int64_t sample_floats() const { return channels * spec.image_size * spec.image_size; }

    // Gathers the given samples into a [B, 3, S, S] constant tensor.
    Tensor batch(const std::vector<int64_t>& indices) const;
    std::vector<int64_t> batch_labels(const std::vector<int64_t>& indices) const;
};

// Builds the dataset described by `spec`. Same spec => bit-identical buffers.
// Labels are class-balanced within one sample; pixels are normalized to zero
// mean and unit variance per channel over the whole dataset.
Dataset generate_dataset(const SyntheticDatasetSpec& spec);

// On-disk layout: <dir>/index.json (spec, labels, blob name) + <dir>/images.bin
// (raw little-endian f32, already normalized).
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// [B, num_classes] with one 1.0 per row; labels must lie in [0, num_classes).
Tensor one_hot(const std::vector<int64_t>& labels, int64_t num_classes);

}  // namespace vitkd
