#pragma once

// DMB container.
//
//   bytes 0..3   magic "DMB1"
//   bytes 4..11  manifest length L, uint64 little-endian
//   next L bytes UTF-8 JSON manifest
//   remainder    concatenated little-endian f64 blobs; entry byte_offset is
//                relative to the start of this section
//
// The manifest carries {"format":"DMB","version":1,"bundle":<kind>,"meta":{},
// "entries":[...]} plus "lambda" and "n_samples" for gradient bundles. Each
// entry has name, role, layer_id, shape, dtype ("f64"), byte_offset and
// byte_length; weight and mask entries also carry flops_per_weight, kind and
// prunable.

#include <filesystem>
#include <string>
#include <variant>

#include "dmprune/model_ir.hpp"

namespace dmprune {

enum class BundleKind { model, gradients, calibration };

using AnyBundle = std::variant<ModelBundle, GradientBundle, CalibrationSet>;

inline constexpr int kDmbVersion = 1;

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path);
void save_bundle(const GradientBundle& bundle, const std::filesystem::path& path);
void save_bundle(const CalibrationSet& calib, const std::filesystem::path& path);

// Loads any DMB file and re-validates every invariant.
AnyBundle load_bundle(const std::filesystem::path& path);

ModelBundle load_model(const std::filesystem::path& path);
GradientBundle load_gradients(const std::filesystem::path& path);
CalibrationSet load_calibration(const std::filesystem::path& path);

// In-memory variants, used by the file functions and by tests.
std::string encode_bundle(const ModelBundle& bundle);
std::string encode_bundle(const GradientBundle& bundle);
std::string encode_bundle(const CalibrationSet& calib);
AnyBundle decode_bundle(const std::string& bytes);

}  // namespace dmprune
