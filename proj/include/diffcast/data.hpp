#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "diffcast/core.hpp"
#include "diffcast/rng.hpp"

namespace diffcast::data {

// Gaussian-cell advection process standing in for real radar events.
struct SyntheticConfig {
  int64_t H = 32;
  int64_t W = 32;
  int64_t n_cells_min = 2;
  int64_t n_cells_max = 4;
  real velocity_x = 0.6;   // pixels per frame
  real velocity_y = 0.35;
  real jitter = 0.08;      // per-frame velocity noise scale
  real growth_decay = 0.04;  // per-cell intensity random-walk step
  real birth_rate = 0.06;  // per-frame spawn probability
  real death_rate = 0.02;  // per-cell per-frame removal probability
  real cell_sigma_min = 2.0;
  real cell_sigma_max = 4.5;
  int64_t length = 25;     // frames per raw sequence

  std::vector<std::string> validate() const;
};

SyntheticConfig synthetic_config_from_json_text(const std::string& text);
std::string synthetic_config_to_json_text(const SyntheticConfig& cfg);

// Renders advected Gaussian cells with intensity random walks and Bernoulli
// birth/death; values clipped to [0,1] and quantized to float32 precision so
// store round-trips are bit-exact. Deterministic given the rng state.
RadarSequence generate_sequence(const SyntheticConfig& cfg, Rng& rng);

struct FilterParams {
  int64_t start_index = 10;       // scan start, fixed by the filtering procedure
  real acceptance_factor = 0.5;   // event accepted when sum of frame means >= (L_in+L_out)*T_pixel*factor
};

// Scans a raw sequence for precipitation events: trigger on frame mean above
// T_pixel, cut [i-L_in, i+L_out), accept on the windowed mean-sum test, then
// jump ahead by L_out; otherwise advance by one frame.
std::vector<EventSample> filter_events(const RadarSequence& s, real T_pixel, int64_t L_in, int64_t L_out,
                                       const FilterParams& params = {});

struct ManifestEntry {
  std::string id;
  std::string split;
  int64_t L = 0, H = 0, W = 0, C = 0;
  DataRange data_range;
};

// Layout: <root>/manifest.json plus events/<id>.bin payloads of raw
// little-endian float32 in frame-major [L,H,W,C] order.
struct EventStore {
  std::filesystem::path root;
  int64_t L_in = 0;
  int64_t L_out = 0;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> split_entries(const std::string& split) const;
};

EventStore create_store(const std::filesystem::path& root, int64_t L_in, int64_t L_out);
EventStore open_store(const std::filesystem::path& root);
void save_events(EventStore& store, const std::vector<EventSample>& events, const std::string& split);
std::vector<EventSample> load_events(const EventStore& store, const std::string& split);
EventSample load_event(const EventStore& store, const std::string& id);

struct SplitCounts {
  int64_t train = 0;
  int64_t val = 0;
  int64_t test = 0;
};

struct BenchmarkParams {
  SyntheticConfig synth;
  SplitCounts counts;
  real T_pixel = 0.05;
  int64_t L_in = 5;
  int64_t L_out = 8;
  uint64_t seed = 0;
  int64_t max_sequences_per_split = 20000;
};

// Generates raw sequences with per-split seeds, filters events, writes a
// reproducible store. Throws if a split cannot reach its requested count.
EventStore make_benchmark(const BenchmarkParams& params, const std::filesystem::path& root);

// Raw float32 payload IO (shared with forecast outputs).
void write_f32_payload(const std::filesystem::path& path, const Tensor& t);
Tensor read_f32_payload(const std::filesystem::path& path, const Shape& expected_shape);

}  // namespace diffcast::data
