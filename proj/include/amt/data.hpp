#pragma once

#include <functional>
#include <string>
#include <vector>

#include "amt/common.hpp"

namespace amt {

/// Synthetic "oriented texture" dataset. Class identity is a radial frequency
/// pattern (invariant under 90-degree rotation), while a near-horizontal
/// grating plus a vertical luminance ramp make every sample orientation
/// sensitive, so the rotation task stays learnable without contradicting the
/// rotation-invariant class supervision.
struct SyntheticSpec {
    int64_t n_classes = 20;
    int64_t samples_per_class = 40;
    int64_t image_size = 32;
    int64_t channels = 3;
    uint64_t seed = 1;
    int64_t class_id_offset = 0;  // global ids are offset..offset+n_classes
    std::string split = "base";   // "base" | "novel"
    double phase_jitter = 3.141592653589793;  // per-sample phase range (+-)
    double noise = 0.2;
    double orientation_strength = 0.5;
};

struct LoadedSample {
    std::vector<float> pixels;  // normalized, C order (channel, row, col)
    int64_t sample_id = 0;
};

struct DatasetClass {
    int64_t class_id = 0;  // global id, disjoint across splits
    std::vector<LoadedSample> samples;
};

struct Dataset {
    std::string split;
    int64_t channels = 0, height = 0, width = 0;
    std::vector<DatasetClass> classes;
    std::vector<double> mean, stddev;  // per-channel stats applied at load

    int64_t n_classes() const { return static_cast<int64_t>(classes.size()); }
    int64_t pixel_count() const { return channels * height * width; }
    int64_t total_samples() const {
        int64_t n = 0;
        for (const auto& c : classes) n += static_cast<int64_t>(c.samples.size());
        return n;
    }
};

/// Writes manifest.json plus one raw float32 file per sample under dir.
/// Byte-identical across runs for a fixed spec.
void generate_synthetic(const SyntheticSpec& spec, const std::string& dir);

/// Loads a split, verifying checksums/shapes and normalizing with the stored
/// per-channel statistics.
Dataset load_dataset(const std::string& manifest_path);

/// Base and novel splits must not share class ids.
void check_disjoint_splits(const Dataset& base, const Dataset& novel);

/// Training-time augmentations; deterministic for a given rng state.
struct AugmentConfig {
    bool enabled = true;
    double flip_prob = 0.5;
    int64_t crop_pad = 4;
    double erase_prob = 0.5;
    double jitter_scale = 0.1;  // 3-channel only
};

std::vector<float> augment_sample(const std::vector<float>& pixels, int64_t channels,
                                  int64_t height, int64_t width, const AugmentConfig& cfg,
                                  Rng& rng);

/// CSV rows of (sample id, class id, feature...) for external projection
/// tooling. `embed` maps a normalized pixel buffer to its pooled feature.
void export_embeddings(const Dataset& ds,
                       const std::function<std::vector<double>(const std::vector<float>&)>& embed,
                       const std::string& csv_path);

}  // namespace amt
