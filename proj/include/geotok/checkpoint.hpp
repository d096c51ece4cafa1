#pragma once

// Binary checkpoint container.
//
//   "GSQ1" | u32 version | u64 manifest_bytes | manifest JSON | payloads
//
// All integers little-endian. The manifest lists {name, shape, dtype} for
// every tensor; payloads are raw f32 little-endian in manifest order. The
// file length must match the manifest exactly.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "geotok/model.hpp"

namespace geotok::checkpoint {

inline constexpr char kMagic[4] = {'G', 'S', 'Q', '1'};
inline constexpr std::uint32_t kVersion = 1;

struct StoredTensor {
    std::string name;
    tensor::Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<StoredTensor> tensors;

    const StoredTensor* find(const std::string& name) const;
};

void write(std::ostream& out, const Checkpoint& ckpt);
// Reads the whole container before returning; throws FormatError on bad
// magic, version, manifest, or any size mismatch.
Checkpoint read(std::istream& in);

void save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load(const std::filesystem::path& path);

// Packs a model's named parameters (prefixed) into a checkpoint.
template <typename T>
void append_tensors(Checkpoint& ckpt, std::span<const model::NamedTensor<T>> tensors,
                    const std::string& prefix = "");

// Stored tensors whose name starts with `prefix`, prefix stripped.
template <typename T>
std::vector<model::NamedTensor<T>> extract_tensors(const Checkpoint& ckpt, const std::string& prefix = "");

// Model checkpoint: meta.model holds the config, tensors under "model.".
template <typename T>
Checkpoint from_model(const model::LocationModel<T>& m, nlohmann::json extra_meta = nlohmann::json::object());

// Rebuilds the model stored in `ckpt` from its own config.
template <typename T>
model::LocationModel<T> to_model(const Checkpoint& ckpt);

// Loads the stored model tensors into an existing model. Throws ShapeError
// naming the first tensor that is missing, extra, or of the wrong shape; the
// target is untouched on failure.
template <typename T>
void load_into(model::LocationModel<T>& m, const Checkpoint& ckpt);

}  // namespace geotok::checkpoint
