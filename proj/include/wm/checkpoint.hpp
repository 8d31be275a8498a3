#pragma once

// Binary container of named double-precision arrays plus a JSON manifest.
// Round trips are bit-exact; files carry no timestamps so identical content
// always produces identical bytes.

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "wm/tensor.hpp"

namespace wm::ckpt {

inline constexpr int kFormatVersion = 1;

struct Checkpoint {
    nlohmann::json manifest;  // must include "format_version"
    std::vector<std::pair<std::string, diff::Tensor>> arrays;  // insertion order preserved

    void add(const std::string& name, const diff::Tensor& t) { arrays.emplace_back(name, t); }
    const diff::Tensor* find(const std::string& name) const;
    // Throwing lookup for required arrays.
    diff::Tensor get(const std::string& name) const;
};

void save(const std::string& path, const Checkpoint& c);
Checkpoint load(const std::string& path);

// FNV-1a over the raw bytes of every array in insertion order; used as a
// tamper/freeze check for model weights.
uint64_t weights_checksum(const std::vector<std::pair<std::string, diff::Tensor>>& arrays);

}  // namespace wm::ckpt
