#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtnet/box.hpp"
#include "dtnet/tensor.hpp"

namespace dtnet {

// One synthetic scene: an RGB image in [0,1] and its ground-truth boxes.
struct Sample {
  Tensor<float> image;  // (1, 3, H, W)
  std::vector<GtBox> boxes;
};

struct SynthConfig {
  Index height = 256;
  Index width = 256;
};

inline constexpr int kSynthClasses = 4;

// Deterministic scene generator: background gradient, 1..6 class-styled
// vehicle rectangles with partial occlusion (pairwise overlap capped at 60%
// of the earlier box), global brightness in [0.3, 1.0], additive Gaussian
// noise (sigma 0.02). Boxes always lie inside the image.
std::vector<Sample> synth_generate(std::uint64_t seed, Index n, const SynthConfig& cfg);

// Binary PPM (P6, maxval 255).
void write_ppm(const std::string& path, const Tensor<float>& image);
Tensor<float> read_ppm(const std::string& path);

// Dataset directory: numbered .ppm files plus annotations.jsonl with one
// {"image", "boxes": [{"cx","cy","w","h","class"}]} record per line.
void save_dataset(const std::string& dir, const std::vector<Sample>& samples);
std::vector<Sample> load_dataset(const std::string& dir);

}  // namespace dtnet
