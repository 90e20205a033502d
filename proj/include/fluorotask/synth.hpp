#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fluorotask {

// Parameters of the procedural fluoroscopy generator. Depths are intensity
// drops relative to the background; all geometry is in pixels.
struct GeneratorConfig {
  int size = 64;  // square images; must be divisible by 16 and within [32,256]
  int min_electrodes = 3;
  int max_electrodes = 5;
  double electrode_radius_min = 2.5;
  double electrode_radius_max = 4.0;
  double tube_half_width_min = 0.5;  // catheter body thickness 1-3 px
  double tube_half_width_max = 1.5;
  double tube_depth_min = 0.26;
  double tube_depth_max = 0.38;
  double electrode_depth_min = 0.45;
  double electrode_depth_max = 0.60;
  int max_distractors = 3;
  double distractor_depth_min = 0.06;
  double distractor_depth_max = 0.14;
  double noise_amplitude = 0.035;
  double background_base = 0.8;
  double gradient_amplitude = 0.06;
  double collimation_prob = 0.25;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

struct ElectrodeBox {
  double cx = 0.0, cy = 0.0;  // pixel coordinates, origin top-left
  double w = 0.0, h = 0.0;    // pixel extents
};

struct SampleRecord {
  std::string id;
  int size = 0;  // square side
  std::vector<double> image;       // size*size values in [0,1] on the 1/255 grid
  std::vector<std::uint8_t> mask;  // size*size, 1 = catheter device
  std::vector<ElectrodeBox> electrodes;
  std::vector<std::array<double, 2>> centerline;  // sampled [x,y] polyline
  std::uint64_t seed = 0;
};

// Deterministic render of one synthetic fluoroscopy frame: a smooth catheter
// curve with electrode discs (both in the mask), distractor wires and imaging
// artifacts (not in the mask). Throws std::runtime_error if no valid curve is
// found within the retry limit.
SampleRecord generate_sample(std::uint64_t seed, const GeneratorConfig& cfg);

// Throws std::logic_error when a record violates its structural invariants
// (shape agreement, value range/quantization, non-empty mask, electrodes in
// bounds and on the centerline).
void validate_record(const SampleRecord& rec);

// Detection training targets on the stride-reduced grid.
struct TargetBundle {
  int stride = 0;
  int gw = 0, gh = 0;
  std::vector<double> heatmap;      // gh*gw in [0,1]; exactly 1.0 at peak cells
  std::vector<double> size_map;     // 2*gh*gw; plane 0 = w, plane 1 = h
  std::vector<double> center_mask;  // gh*gw, 1.0 at peak cells
  int peak_count = 0;
};

TargetBundle make_targets(const SampleRecord& rec, int stride);

struct AugmentConfig {
  bool flips = true;
  bool rotations = true;   // multiples of 90 degrees
  double zoom_prob = 0.25; // integer half-crop then nearest x2 resize
};

// Random flip / 90-degree rotation / crop-zoom combination. Every transform
// keeps image, mask, boxes and centerline consistent; a zoom that would push
// an electrode out of frame is skipped for that sample.
SampleRecord augment(const SampleRecord& rec, std::uint64_t seed,
                     const AugmentConfig& cfg = {});

// Individual deterministic transforms (exposed for property tests).
SampleRecord flip_horizontal(const SampleRecord& rec);
SampleRecord flip_vertical(const SampleRecord& rec);
SampleRecord rotate90cw(const SampleRecord& rec);

}  // namespace fluorotask
