#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "advit/augment.hpp"
#include "advit/data.hpp"
#include "advit/train.hpp"
#include "advit/vit.hpp"

namespace advit {

// ---------------------------------------------------------------------------
// Config text: line-oriented `key = value` with `#` comments and dotted
// section keys (model.*, train.*, augment.*). Unknown keys and malformed
// values are rejected with the offending line number. A `preset` key (light
// or canonical) rebaselines the recipe before later lines override fields.
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  ModelConfig model;
  TrainRecipe recipe;  // carries the augmentation policy and the seed
};

ExperimentConfig light_preset();
ExperimentConfig canonical_preset();

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

// Canonical rendering: every key, fixed order, 17-significant-digit reals.
// parse_config_text(render_config(c)) reproduces c exactly.
std::string render_config(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Dataset files: little-endian binary, 8-byte magic "ADVDSET1", u32 version,
// u32 count/height/width/channels/classes, count*H*W*C pixel bytes, then
// count label bytes. Pixels store round(v * 255) and decode as v / 255.
// ---------------------------------------------------------------------------

void save_dataset(const std::string& path, const Dataset& data);
Dataset load_dataset(const std::string& path);

// Two-class constant-free blob sampler. Pixels are Gaussian around a per-
// class level and clamped into disjoint per-class slabs whose gap is exactly
// `margin` in every coordinate, so a per-pixel threshold classifier is
// correct under any perturbation smaller than margin / 2. Slab bounds are
// aligned to the 8-bit pixel grid so file quantization cannot shrink the gap.
struct BlobSpec {
  int count = 256;
  int height = 8, width = 8, channels = 1;
  double margin = 0.4;
  std::uint64_t seed = 0;
};

Dataset generate_blobs(const BlobSpec& spec);

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic "ADVTCKPT", u32 version, length-prefixed config
// text, tensor directory (name, dtype tag, rank, extents), tensor payloads
// as 32-bit IEEE-754 little-endian, training history, then an optional
// optimizer section. Loading restores 64-bit working copies; saving a loaded
// checkpoint reproduces the file byte for byte.
// ---------------------------------------------------------------------------

struct Checkpoint {
  ExperimentConfig config;
  Params params;
  TrainHistory history;
  std::optional<OptimizerState> optimizer;
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Metrics: CSV with a header row, fixed column order, and 17-significant-
// digit reals so 64-bit values survive the text round trip.
// ---------------------------------------------------------------------------

struct MetricsTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

void write_metrics(const std::string& path, const MetricsTable& table);

MetricsTable history_table(const TrainHistory& history);

// ---------------------------------------------------------------------------
// Image dumps: binary portable pixmap family, single channel as P5 and three
// channels as P6, 8 bits per sample, pixels expected in [0, 1].
// ---------------------------------------------------------------------------

void write_image(const std::string& path, const Tensor& image);

}  // namespace advit
