#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vitkd/tensor.hpp"

namespace vitkd {

uint64_t fnv1a64(const void* data, size_t len);
uint64_t fnv1a64(const std::string& s);
std::string hex64(uint64_t h);
// Content hash of a file on disk; throws ConfigError if unreadable.
uint64_t file_fnv1a64(const std::string& path);

// A checkpoint on disk is a JSON manifest plus one raw little-endian f32 blob
// sitting next to it. The manifest records name -> shape -> byte offset for
// every tensor and carries an arbitrary "config" document.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> tensors;  // manifest order
    nlohmann::json config;

    const Tensor* find(const std::string& name) const;
    const Tensor& at(const std::string& name) const;  // ConfigError if absent
};

void save_checkpoint(const std::string& manifest_path,
                     const std::vector<std::pair<std::string, Tensor>>& tensors,
                     const nlohmann::json& config);

Checkpoint load_checkpoint(const std::string& manifest_path);

// Hash of the weight blob a manifest points at (chain-linkage checks).
uint64_t checkpoint_blob_hash(const std::string& manifest_path);

}  // namespace vitkd
